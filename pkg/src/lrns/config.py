"""Experiment configuration: JSON documents validated against a generated schema."""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

import jsonschema

from .control import ControlConfig
from .diffusion import DiffusionConfig
from .functions import REGISTRY

PIPELINES = ("solve-diffusion", "solve-control", "compress", "scan-tau", "scan-sigma", "verify")

# dataclass fields naming registry functions
_FUNCTION_FIELDS = {"source", "boundary", "initial", "desired"}
_CHOICES = {
    "kernel": ["exponential", "gaussian"],
    "store": ["auto", "dense", "implicit"],
    "rank_count": ["nodes", "interior"],
    "ellipticity": ["error", "warn", "resample"],
    "optimizer": ["newton", "steepest", "sgd"],
    "gradient_mode": ["chain", "literal"],
    "grad_norm": ["dual", "euclidean"],
    "materialize": ["auto", "dense", "free"],
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


def _field_schema(name: str, tp) -> dict:
    if name in _FUNCTION_FIELDS:
        return {"type": "string", "enum": sorted(REGISTRY)}
    if name in _CHOICES:
        return {"type": "string", "enum": _CHOICES[name]}
    args = typing.get_args(tp)
    if type(None) in args:
        inner = next(a for a in args if a is not type(None))
        return {"type": [_json_type(inner), "null"]}
    return {"type": _json_type(tp)}


def _json_type(tp) -> str:
    return {int: "integer", float: "number", str: "string", bool: "boolean"}[tp]


def _section_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {f.name: _field_schema(f.name, hints[f.name]) for f in fields(cls)},
    }


_NUM_LIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["pipeline"],
    "properties": {
        "pipeline": {"type": "string", "enum": list(PIPELINES)},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "reproducible": {"type": "boolean"},
        "compare_reference": {"type": "boolean"},
        "threads": {"type": ["integer", "null"], "minimum": 1},
        "diffusion": _section_schema(DiffusionConfig),
        "control": _section_schema(ControlConfig),
        "compress": {
            "type": "object",
            "additionalProperties": False,
            "required": ["collection"],
            "properties": {
                "collection": {"type": "string"},
                "tau": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "oversampling": {"type": ["integer", "null"], "minimum": 0},
                "power_iters": {"type": "integer", "minimum": 0},
                "write_factors": {"type": "boolean"},
            },
        },
        "scan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "taus": _NUM_LIST,
                "sigmas": _NUM_LIST,
                "terms": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tolerances": {"type": "object", "additionalProperties": {"type": "number"}},
                "only": {"type": "array", "items": {"type": "string"}},
            },
        },
    },
}


@dataclass
class ExperimentConfig:
    pipeline: str
    seed: int | None = None
    output: str = "out"
    reproducible: bool = True
    threads: int | None = None
    compare_reference: bool = False
    sections: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def effective_seed(self, section: str | None = None) -> int:
        """Top-level seed (or ``--seed``) wins over a section seed; default 0."""
        if self.seed is not None:
            return self.seed
        return int(self.sections.get(section, {}).get("seed", 0)) if section else 0

    def diffusion(self) -> DiffusionConfig:
        values = {**self.sections.get("diffusion", {}), "seed": self.effective_seed("diffusion")}
        return _build(DiffusionConfig, "diffusion", values)

    def control(self) -> ControlConfig:
        values = {**self.sections.get("control", {}), "seed": self.effective_seed("control")}
        return _build(ControlConfig, "control", values)

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))

    def digest(self) -> str:
        """sha256 of the canonical JSON form after overrides, minus output path and thread count."""
        doc = self.as_dict()
        doc.pop("output")
        doc.pop("threads")
        return hashlib.sha256(canonical(doc).encode()).hexdigest()

    def as_dict(self) -> dict:
        doc = {"pipeline": self.pipeline, "seed": self.seed, "output": self.output,
               "reproducible": self.reproducible, "threads": self.threads,
               "compare_reference": self.compare_reference}
        doc.update(self.sections)
        return doc


def canonical(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except (ValueError, KeyError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise ConfigError(f"{section}: {msg}") from None


def validate(doc) -> None:
    """Raise :class:`ConfigError` naming the first offending field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_path(err.absolute_path)}: {err.message}")


def parse(doc: dict) -> ExperimentConfig:
    validate(doc)
    sections = {k: v for k, v in doc.items() if k in ("diffusion", "control", "compress", "scan", "verify")}
    cfg = ExperimentConfig(
        pipeline=doc["pipeline"],
        seed=doc.get("seed"),
        output=doc.get("output", "out"),
        reproducible=doc.get("reproducible", True),
        threads=doc.get("threads"),
        compare_reference=doc.get("compare_reference", False),
        sections=sections,
        raw=doc,
    )
    # run the dataclass checks early so errors surface before any work
    if cfg.pipeline in ("solve-diffusion", "scan-tau", "scan-sigma"):
        cfg.diffusion()
    elif cfg.pipeline == "solve-control":
        cfg.control()
    elif cfg.pipeline == "compress" and "compress" not in sections:
        raise ConfigError("compress: section is required for the compress pipeline")
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse(doc)


def defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls) if f.default is not MISSING}
