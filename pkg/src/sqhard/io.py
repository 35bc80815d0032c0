"""File formats: instance/pack/report JSON validated against the bundled schemas, sample CSV.

JSON floats use Python's shortest round-trip repr, so every real survives a dump and
load unchanged; CSV values are written with 17 significant digits.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from . import __version__
from .multivariate import PackingSet
from .piecewise import MomentReport, PiecewiseSignFunction

SCHEMA_VERSION = 1
SCHEMA_NAMES = ("instance", "pack", "attack", "certificate", "report", "verification")


class FormatError(ValueError):
    """A file failed to parse or to validate against its schema."""


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    if name not in SCHEMA_NAMES:
        raise KeyError(f"unknown schema {name!r}; choose from {', '.join(SCHEMA_NAMES)}")
    text = resources.files("sqhard").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc: Any, name: str) -> None:
    try:
        jsonschema.validate(doc, schema(name))
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise FormatError(f"{name} schema violation at {path}: {err.message}") from err


def _clean(obj):
    """Plain-JSON view: numpy scalars to Python, non-finite floats to None, tuples to lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj, name: Optional[str] = None) -> str:
    text = dumps(obj)
    if name is not None:
        validate(json.loads(text), name)
    Path(path).write_text(text)
    return text


def read_json(path, name: Optional[str] = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: not valid JSON ({err})") from err
    if name is not None:
        validate(doc, name)
    return doc


def provenance(argv=None, rng_seeds: Optional[dict] = None) -> dict:
    return {"command_line": list(argv) if argv is not None else [], "rng_seeds": dict(rng_seeds or {}),
            "tool_version": __version__}


@dataclass(frozen=True)
class InstanceFile:
    task: str
    k: int
    f: PiecewiseSignFunction
    scale_C: float
    relu_corr: float
    moment_report: MomentReport
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "task": self.task,
            "k": self.k,
            "leading_sign": self.f.leading_sign,
            "breakpoints": list(self.f.breakpoints),
            "scale_C": self.scale_C,
            "relu_corr": self.relu_corr,
            "moment_report": self.moment_report.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceFile":
        validate(d, "instance")
        try:
            f = PiecewiseSignFunction.from_dict(d)
        except ValueError as err:
            raise FormatError(f"bad breakpoints: {err}") from err
        return cls(d["task"], int(d["k"]), f, float(d["scale_C"]), float(d["relu_corr"]),
                   MomentReport.from_dict(d["moment_report"]), dict(d["provenance"]))


def save_instance(path, inst: InstanceFile) -> str:
    return write_json(path, inst.to_dict(), "instance")


def load_instance(path) -> InstanceFile:
    return InstanceFile.from_dict(read_json(path))


def pack_to_dict(pack: PackingSet, bound: float, prov: Optional[dict] = None) -> dict:
    d = pack.to_dict()
    d.update({"schema_version": SCHEMA_VERSION, "bound": bound, "provenance": prov or provenance()})
    return d


def load_pack(path) -> PackingSet:
    d = read_json(path, "pack")
    pack = PackingSet.from_dict(d)
    if pack.m != int(d["m"]):
        raise FormatError(f"pack declares m={d['m']} but holds {pack.m} vectors")
    norms = np.linalg.norm(pack.vectors, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise FormatError("pack vectors must be unit vectors")
    return pack


def write_samples(path, x: np.ndarray, y: np.ndarray) -> None:
    d = x.shape[1]
    header = ",".join([f"x_{i + 1}" for i in range(d)] + ["y"])
    np.savetxt(path, np.column_stack([x, y]), fmt="%.17g", delimiter=",", header=header, comments="")


def read_samples(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if not header or header[-1] != "y" or any(h != f"x_{i + 1}" for i, h in enumerate(header[:-1])):
                raise FormatError(f"{path}: header must be x_1,...,x_d,y")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except ValueError as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(f"{path}: {err}") from err
    if data.shape[1] != len(header):
        raise FormatError(f"{path}: rows have {data.shape[1]} columns, header has {len(header)}")
    return data[:, :-1], data[:, -1]

