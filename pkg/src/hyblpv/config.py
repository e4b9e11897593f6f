"""Versioned YAML run configuration: schema, defaults and object builders."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .amb import (FOUR_REGIONS, TWO_REGIONS, AmbParameters, SpeedProfile, speed_profile_paper,
                  weighted_interconnection)
from .lpv import BasisSet, LpvPlant, ParameterDomain, Partition, build_grids
from .sdp import SolveOptions

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


_POS = {"type": "number", "exclusiveMinimum": 0}
_NUM = {"type": "number"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


_AMB_FIELDS = {f.name: ({"type": ["number", "null"], "exclusiveMinimum": 0}
                        if f.name == "effective_mass" else _POS)
               for f in fields(AmbParameters)}
_AMB_FIELDS.update(pole_area_mm2=_POS, pole_height_mm=_POS, gap_mm=_POS)

SCHEMA = _obj({
    "version": {"const": CONFIG_VERSION},
    "plant": _obj({
        "kind": {"enum": ["amb-rigid", "file"]},
        "path": {"type": "string"},
        "amb": _obj(_AMB_FIELDS),
        "disturbance_damping": {"type": "number", "minimum": 0},
    }),
    "partition": _obj({
        "preset": {"enum": ["single", "two", "four"]},
        "intervals": {"type": "array", "minItems": 1,
                      "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
        "points_per_subset": {"type": "integer", "minimum": 2},
    }),
    "basis": _obj({"kind": {"enum": ["paper-default", "constant"]}, "normalize": {"type": "boolean"}}),
    "rates": {"type": "array", "minItems": 1, "items": _POS},
    "weights": {"type": "array", "minItems": 1, "items": _POS},
    "single_pdlf": {"type": "boolean"},
    "solver": _obj({
        "margin": {"type": "number", "minimum": 0},
        "backoff": {"type": "number", "minimum": 0},
        "coupling_cap": {"type": "number", "minimum": 1},
        "tol": _POS,
        "relaxed_tol": _POS,
        "max_iter": {"type": "integer", "minimum": 1},
    }),
    "validation": _obj({"tolerance": _POS, "density": {"type": "integer", "minimum": 1}}),
    "simulation": _obj({
        "rate": _POS,
        "profile": {"oneOf": [
            {"const": "paper"},
            _obj({"constant": _NUM}, ["constant"]),
            _obj({"breakpoints": _obj({
                "times": {"type": "array", "minItems": 1, "items": _NUM},
                "values": {"type": "array", "minItems": 1, "items": _NUM}}, ["times", "values"])},
                ["breakpoints"]),
            _obj({"sinusoid": _obj({"offset": _NUM, "amplitude": _NUM, "omega": _NUM, "phase": _NUM},
                                   ["offset", "amplitude", "omega"])}, ["sinusoid"]),
        ]},
        "horizon": _POS,
        "step": _POS,
        "disturbance": {"type": "array", "minItems": 1, "items": _NUM},
        "record_every": {"type": "integer", "minimum": 1},
        "initial_region": {"type": "integer", "minimum": 1},
    }),
    "output": {"type": "string", "minLength": 1},
}, ["version", "rates"])

DEFAULTS = {
    "plant": {"kind": "amb-rigid", "amb": {}, "disturbance_damping": 1.0},
    "partition": {"preset": "two"},
    "basis": {"kind": "paper-default", "normalize": True},
    "single_pdlf": False,
    "solver": {"margin": 1e-7, "backoff": 1e-2, "coupling_cap": 10.0},
    "validation": {"tolerance": 1e-5, "density": 5},
    "simulation": {"profile": "paper", "horizon": 22.0, "step": 1e-5,
                   "disturbance": [1.3e-4, 0.0, 0.0], "record_every": 100},
    "output": "results",
}

PRESETS = {"single": ((300.0, 2000.0),), "two": TWO_REGIONS, "four": FOUR_REGIONS}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form of the configuration as written."""
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class RunConfig:
    raw: dict
    data: dict
    base_dir: Path

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def provenance(self) -> dict:
        return {"config_sha256": self.hash, "toolkit_version": __version__}

    @property
    def output_dir(self) -> Path:
        p = Path(self.data["output"])
        return p if p.is_absolute() else self.base_dir / p

    # builders ------------------------------------------------------------
    def intervals(self, single: bool = False) -> tuple[tuple[float, float], ...]:
        part = self.data["partition"]
        iv = tuple(tuple(map(float, x)) for x in part.get("intervals") or PRESETS[part["preset"]])
        if single:
            return ((min(a for a, _ in iv), max(b for _, b in iv)),)
        return iv

    def plant(self, single: bool = False) -> LpvPlant:
        iv = self.intervals(single)
        pts = self.data["partition"].get("points_per_subset") or (10 if len(iv) <= 2 else 6)
        part = build_grids(Partition.from_intervals(iv), pts)
        pc = self.data["plant"]
        if pc["kind"] == "file":
            from .serialize import read_plant
            path = Path(pc["path"])
            fn = read_plant(path if path.is_absolute() else self.base_dir / path)
            name = path.stem
        else:
            fn = weighted_interconnection(self.amb_parameters(), disturbance_damping=pc["disturbance_damping"])
            name = f"amb-{len(iv)}"
        return LpvPlant(part, [fn], name=name)

    def amb_parameters(self) -> AmbParameters:
        over = dict(self.data["plant"]["amb"])
        mm = {k: over.pop(k) for k in ("pole_area_mm2", "pole_height_mm", "gap_mm") if k in over}
        clash = {"pole_area_mm2": "pole_area", "pole_height_mm": "pole_height", "gap_mm": "gap"}
        for k in mm:
            if clash[k] in over:
                raise ConfigError(f"plant.amb: give {k} or {clash[k]}, not both")
        if "turns" in over:
            over["turns"] = int(over["turns"])
        try:
            return AmbParameters.from_mm(**mm, **over) if mm else AmbParameters(**over)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"plant.amb: {exc}") from None

    def bases(self, plant: LpvPlant) -> list[BasisSet]:
        b = self.data["basis"]
        if b["kind"] == "constant":
            return [BasisSet.constant_only(plant.partition.dim)] * plant.partition.size
        return [BasisSet.paper_default(box, b["normalize"]) for box in plant.partition.boxes]

    def domain(self, plant: LpvPlant, rate: float) -> ParameterDomain:
        hull = plant.partition.hull()
        return ParameterDomain(hull, tuple(-rate for _ in hull.lo), tuple(rate for _ in hull.lo))

    def weights(self, plant: LpvPlant) -> list[float]:
        w = self.data.get("weights")
        if w is None or plant.partition.size == 1:
            return [1.0] * plant.partition.size
        if len(w) != plant.partition.size:
            raise ConfigError(f"weights: expected {plant.partition.size} values, got {len(w)}")
        return [float(x) for x in w]

    def solve_options(self) -> SolveOptions | None:
        s = self.data["solver"]
        kw = {k: s[k] for k in ("tol", "relaxed_tol", "max_iter") if k in s}
        if not kw:
            return None
        kw.setdefault("relaxed_tol", 1e-3)
        return SolveOptions(**kw)

    def profile(self):
        """Speed signal for simulation as a :class:`SignalSource`."""
        from .hybridsim import SignalSource
        prof = self.data["simulation"]["profile"]
        if prof == "paper":
            return SignalSource.profile(speed_profile_paper())
        if "constant" in prof:
            return SignalSource.constant([prof["constant"]])
        if "sinusoid" in prof:
            s = prof["sinusoid"]
            return SignalSource.sinusoid(s["amplitude"], s["omega"], s.get("phase", 0.0), s["offset"])
        bp = prof["breakpoints"]
        if len(bp["times"]) != len(bp["values"]):
            raise ConfigError("simulation.profile.breakpoints: times and values differ in length")
        try:
            return SignalSource.profile(SpeedProfile.from_breakpoints(bp["times"], bp["values"]))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"simulation.profile.breakpoints: {exc}") from None

    def simulation_rate(self) -> float:
        """Design row driving the simulation: explicit, else the smallest bound covering the profile."""
        sim = self.data["simulation"]
        rates = sorted(self.data["rates"])
        if "rate" in sim:
            if sim["rate"] not in self.data["rates"]:
                raise ConfigError(f"simulation.rate {sim['rate']} is not one of the design rates")
            return float(sim["rate"])
        ts = np.linspace(0.0, sim["horizon"], 2001)
        need = float(np.max(np.abs(self.profile().sample_rate(ts))))
        for r in rates:
            if r >= need - 1e-12:
                return float(r)
        raise ConfigError(f"no design rate covers the profile's rate {need:g}")


def validate(raw) -> None:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    return from_dict(raw, path.parent)


def from_dict(raw, base_dir=".") -> RunConfig:
    validate(raw)
    data = _merge(DEFAULTS, raw)
    part = data["partition"]
    if "intervals" in part and "preset" in raw.get("partition", {}):
        raise ConfigError("partition: give a preset or intervals, not both")
    for lo, hi in part.get("intervals") or []:
        if not lo < hi:
            raise ConfigError(f"partition.intervals: empty interval [{lo}, {hi}]")
    if data["plant"]["kind"] == "file" and "path" not in data["plant"]:
        raise ConfigError("plant: kind 'file' needs a path")
    if len(set(data["rates"])) != len(data["rates"]):
        raise ConfigError("rates: duplicate rate bounds")
    cfg = RunConfig(raw, data, Path(base_dir))
    cfg.amb_parameters()
    return cfg
