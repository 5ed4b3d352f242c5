import numpy as np
import pytest
from numpy.testing import assert_allclose

from rakesurv.designs import (
    DesignSpec,
    allocate,
    draw_case_control,
    draw_scc_balanced,
    draw_scc_neyman,
    draw_srs,
    realized_inclusion,
    stratify,
)
from rakesurv.errors import DesignError, ParameterError
from rakesurv.numeric import RngStream


def test_srs():
    s = draw_srs(100, 30, RngStream(1))
    assert s.n_validated == 30
    assert_allclose(s.pi, 0.3)
    with pytest.raises(DesignError):
        draw_srs(10, 11, RngStream(1))


def test_case_control_counts():
    d = np.zeros(1000)
    d[:248] = 1
    s = draw_case_control(d, 340, RngStream(2))
    assert s.n_validated == 340
    assert np.all(s.r[:248] == 1) and np.all(s.pi[:248] == 1)
    assert_allclose(s.pi[248:], 92 / 752)
    assert s.design.stratum_sampled == (92, 248)
    s = draw_case_control(d, None, RngStream(2), cc_ratio=1.0)
    assert s.n_validated == 496
    with pytest.raises(DesignError):
        draw_case_control(d, 200, RngStream(2))


def test_stratify_cutpoint_ties_fall_low():
    labels = stratify([0, 0, 1, 1], [1.0, 1.5, 1.0, 3.0], [1.0, 2.0])
    assert labels.tolist() == [0, 1, 3, 5]


def test_balanced_equal_when_feasible():
    rng = np.random.default_rng(0)
    d = np.repeat([0, 1], 500)
    x = np.tile(np.repeat(np.arange(4.0), 125), 2)
    s = draw_scc_balanced(d, x, [0.5, 1.5, 2.5], 680, RngStream(3))
    assert s.design.stratum_sampled == (85,) * 8
    assert not s.design.warnings


def test_balanced_redistributes_exhausted():
    d = np.r_[np.zeros(900), np.ones(100)]
    x = np.r_[np.arange(900) % 4, np.arange(100) % 4].astype(float)
    s = draw_scc_balanced(d, x, [0.5, 1.5, 2.5], 400, RngStream(4))
    sampled = np.array(s.design.stratum_sampled)
    assert sampled.sum() == 400
    assert np.all(sampled[4:] == 25)
    assert s.design.warnings
    # HT total of ones is exactly N under stratified sampling
    assert_allclose(np.sum(s.r / s.pi), 1000)


def test_neyman_constant_sd_equal_sizes_is_balanced():
    d = np.repeat([0, 1], 400)
    x = np.tile(np.repeat(np.arange(4.0), 100), 2)
    infl = np.tile([1.0, -1.0], 400)
    a = draw_scc_neyman(d, x, [0.5, 1.5, 2.5], infl, 400, RngStream(5))
    b = draw_scc_balanced(d, x, [0.5, 1.5, 2.5], 400, RngStream(5))
    assert a.design.stratum_sampled == b.design.stratum_sampled


def test_neyman_floor_one():
    d = np.repeat([0, 1], 400)
    x = np.tile(np.repeat(np.arange(4.0), 100), 2)
    infl = np.where(x == 0, 0.0, 1.0) + 1e-9 * np.arange(800)
    s = draw_scc_neyman(d, x, [0.5, 1.5, 2.5], infl, 100, RngStream(5))
    assert min(s.design.stratum_sampled) >= 1


@pytest.mark.parametrize("seed", range(10))
def test_allocate_properties(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(0, 60, 8)
    n = int(rng.integers(1, sizes.sum()))
    shares = rng.uniform(0.1, 2, 8)
    alloc, _ = allocate(sizes, n, shares)
    assert alloc.sum() == n
    assert np.all(alloc <= sizes) and np.all(alloc >= 0)


def test_realized_inclusion_matches_draw():
    d = np.repeat([0, 1], 500)
    x = np.tile(np.arange(500.0), 2)
    s = draw_scc_balanced(d, x, [100.0, 200.0, 400.0], 400, RngStream(6))
    back = realized_inclusion("SCCB", s.r, d, x, [100.0, 200.0, 400.0])
    assert_allclose(back.pi, s.pi, rtol=0)


def test_spec_validation():
    with pytest.raises(ParameterError):
        DesignSpec("XYZ", 10)
    with pytest.raises(ParameterError):
        DesignSpec("SRS")
    with pytest.raises(ParameterError):
        DesignSpec("SCCB", 10, quantiles=(0.5, 0.2))
