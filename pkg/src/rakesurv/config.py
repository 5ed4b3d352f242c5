"""JSON configuration: schema validation, presets and expansion into scenario cells."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources

import jsonschema

from .designs import DesignSpec
from .errors import SchemaError
from .simulation import CENSORING_SEED, ScenarioConfig

PROFILES = ("desk", "paper")
FULL_SCALE_PROFILE = {"replicates": 2000, "M": 50, "L": 500}


def load_schema(name: str) -> dict:
    text = resources.files("rakesurv").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_document(doc, schema_name: str) -> None:
    """Raise :class:`SchemaError` listing every violation with its JSON path."""
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{e.json_path}: {e.message}" for e in errors]
        raise SchemaError(f"{schema_name} document is invalid:\n  " + "\n  ".join(lines), violations=lines)


def read_json(path, schema_name: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})", violations=[f"$: {exc}"]) from exc
    validate_document(doc, schema_name)
    return doc


def preset_names() -> list:
    folder = resources.files("rakesurv").joinpath("presets")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    text = resources.files("rakesurv").joinpath("presets", f"{name}.json").read_text()
    doc = json.loads(text)
    validate_document(doc, "config")
    return doc


@dataclass(frozen=True)
class Cell:
    """One (scenario, censoring, hazard ratio, design) combination."""

    scenario: int
    censoring: float
    hr_x: float
    design: dict
    config: ScenarioConfig

    @property
    def design_label(self) -> str:
        return self.design["kind"]


def apply_profile(doc: dict, profile: str = "desk", replicates: int = None) -> dict:
    """Settings after the profile and command-line overrides."""
    if profile not in PROFILES:
        raise SchemaError(f"unknown profile {profile!r}", violations=[f"$.profile: {profile}"])
    out = dict(doc)
    if profile == "paper":
        out.update(FULL_SCALE_PROFILE)
    out.update(doc.get("profiles", {}).get(profile, {}))
    if replicates is not None:
        out["replicates"] = int(replicates)
    return out


def _design_spec(d: dict, n: int) -> DesignSpec:
    kw = {"n_target": n}
    if "cc_ratio" in d:
        kw["cc_ratio"] = float(d["cc_ratio"])
    if "quantiles" in d:
        kw["quantiles"] = tuple(d["quantiles"])
    if "cutpoints" in d:
        kw["cutpoints"] = tuple(d["cutpoints"])
    if "influence_column" in d:
        kw["influence_column"] = int(d["influence_column"])
    return DesignSpec(d["kind"], **kw)


def expand_cells(doc: dict) -> list:
    """Cartesian product of scenarios, censoring rates, hazard ratios and designs."""
    cells = []
    for scen, cens, hr, design in itertools.product(doc["scenario"], doc["censoring"], doc["hr_x"], doc["designs"]):
        cfg = ScenarioConfig(
            N=doc["N"], n=doc["n"],
            beta_x=math.log(hr), beta_z=math.log(doc.get("hr_z", 0.5)),
            lambda0=doc.get("lambda0", 0.1), censoring=cens, scenario=scen,
            misclass_model=doc.get("misclass_model", "main"),
            design=_design_spec(design, doc["n"]),
            methods=tuple(doc["methods"]),
            M=doc.get("M", 10), L=doc.get("L", 50),
            replicates=doc.get("replicates", 500),
            seed=doc.get("seed", CENSORING_SEED),
            intercept=doc.get("intercept", True),
        )
        cells.append(Cell(scen, cens, hr, design, cfg))
    return cells
