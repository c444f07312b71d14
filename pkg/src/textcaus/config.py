"""Run configuration: a nested YAML document validated into plain dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .effects import RULE_SOURCES


class ConfigError(ValueError):
    """Invalid run configuration; the message carries the offending field path."""


@dataclass
class InputsConfig:
    notes: str | None = None
    covariates: str | None = None
    outcomes: str | None = None
    column_kinds: str | None = None
    embeddings: str | None = None
    key_terms: str | None = None


@dataclass
class PreprocessConfig:
    cutoff_hours: float = 24.0
    ngram_orders: list = field(default_factory=lambda: [1, 2, 3])
    min_df: int = 5
    max_df_fraction: float = 0.95
    stem: bool = False
    stop_list: str | None = None


@dataclass
class MnirSection:
    n_lambda: int = 20
    lambda_min_ratio: float = 1e-2
    patience: int = 3
    penalty: float | None = None
    max_iter: int = 50
    max_sweeps: int = 200
    tol: float = 1e-5


@dataclass
class ImputeSection:
    m: int = 5
    n_iter: int = 10
    use_text: bool = True
    evaluate: bool = True
    cv_folds: int = 10
    cv_targets: list | None = None


@dataclass
class MatchSection:
    caliper: float = 0.1
    scale: str = "probability"
    ridge: float = 1e-6
    solver: str = "assignment"
    max_controls: int | None = None
    max_treated: int | None = None


@dataclass
class HetfxSection:
    methods: list = field(default_factory=lambda: ["structured_threshold", "token_presence", "dtm_pca"])
    sample: str = "text"
    k: int = 50
    q: float = 0.05
    min_subgroup: int = 20


@dataclass
class RunConfig:
    seed: int
    inputs: InputsConfig = field(default_factory=InputsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    mnir: MnirSection = field(default_factory=MnirSection)
    impute: ImputeSection = field(default_factory=ImputeSection)
    match: MatchSection = field(default_factory=MatchSection)
    hetfx: HetfxSection = field(default_factory=HetfxSection)
    synth: dict = field(default_factory=dict)
    output_dir: str | None = None
    base_dir: str = field(default=".", compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTIONS = {
    "inputs": InputsConfig,
    "preprocess": PreprocessConfig,
    "mnir": MnirSection,
    "impute": ImputeSection,
    "match": MatchSection,
    "hetfx": HetfxSection,
}


def _build(cls, raw: Any, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    out = cls(**dict(raw))
    for name, f in known.items():
        v = getattr(out, name)
        ann = str(f.type)
        if v is None:
            if "None" not in ann:
                raise ConfigError(f"{path}.{name}: must not be null")
            continue
        base = ann.replace("| None", "").strip()
        if base == "float":
            if isinstance(v, str):
                # YAML 1.1 reads exponent forms like 1e-9 as strings
                try:
                    v = float(v)
                except ValueError:
                    raise ConfigError(f"{path}.{name}: expected float, got {v!r}") from None
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}.{name}: expected float, got {type(v).__name__}")
            setattr(out, name, float(v))
        elif base in ("int", "bool", "str", "list"):
            typ = {"int": int, "bool": bool, "str": str, "list": list}[base]
            if not isinstance(v, typ) or (typ is int and isinstance(v, bool)):
                raise ConfigError(f"{path}.{name}: expected {base}, got {type(v).__name__}")
    return out


def _check(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def from_mapping(raw: Mapping, base_dir: str | Path = ".") -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config: top level must be a mapping")
    allowed = set(_SECTIONS) | {"seed", "synth", "output_dir"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    if "seed" not in raw or raw["seed"] is None:
        raise ConfigError("seed: required (no implicit randomness)")
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a nonnegative integer")
    sections = {k: _build(cls, raw.get(k), k) for k, cls in _SECTIONS.items()}
    synth = raw.get("synth") or {}
    if not isinstance(synth, Mapping):
        raise ConfigError("synth: expected a mapping")
    cfg = RunConfig(seed=seed, synth=dict(synth), output_dir=raw.get("output_dir"), base_dir=str(base_dir), **sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    pre = cfg.preprocess
    _check(all(o in (1, 2, 3) for o in pre.ngram_orders) and len(pre.ngram_orders) > 0, "preprocess.ngram_orders", "orders must be drawn from 1, 2, 3")
    _check(pre.min_df >= 1, "preprocess.min_df", "must be >= 1")
    _check(0 < pre.max_df_fraction <= 1, "preprocess.max_df_fraction", "must lie in (0, 1]")
    _check(pre.cutoff_hours >= 0, "preprocess.cutoff_hours", "must be >= 0")
    mn = cfg.mnir
    _check(mn.n_lambda >= 1, "mnir.n_lambda", "must be >= 1")
    _check(0 < mn.lambda_min_ratio < 1, "mnir.lambda_min_ratio", "must lie in (0, 1)")
    _check(mn.penalty is None or mn.penalty >= 0, "mnir.penalty", "must be >= 0")
    _check(mn.max_iter >= 1 and mn.tol > 0, "mnir.max_iter", "max_iter >= 1 and tol > 0 required")
    im = cfg.impute
    _check(im.m >= 1, "impute.m", "must be >= 1")
    _check(im.n_iter >= 1, "impute.n_iter", "must be >= 1")
    _check(im.cv_folds >= 2, "impute.cv_folds", "must be >= 2")
    ma = cfg.match
    _check(ma.caliper > 0, "match.caliper", "must be > 0")
    _check(ma.scale in ("probability", "logit"), "match.scale", "must be 'probability' or 'logit'")
    _check(ma.solver in ("assignment", "flow"), "match.solver", "must be 'assignment' or 'flow'")
    _check(ma.ridge >= 0, "match.ridge", "must be >= 0")
    for name in ("max_controls", "max_treated"):
        v = getattr(ma, name)
        _check(v is None or (isinstance(v, int) and v >= 1), f"match.{name}", "must be a positive integer or null")
    h = cfg.hetfx
    for i, m in enumerate(h.methods):
        _check(m in RULE_SOURCES, f"hetfx.methods[{i}]", f"unknown method {m!r}")
    _check(h.sample in ("text", "psm"), "hetfx.sample", "must be 'text' or 'psm'")
    _check(0 < h.q < 1, "hetfx.q", "must lie in (0, 1)")
    _check(h.k >= 1, "hetfx.k", "must be >= 1")
    _check(h.min_subgroup >= 1, "hetfx.min_subgroup", "must be >= 1")
    if any(m.startswith("embedding") for m in h.methods):
        _check(cfg.inputs.embeddings is not None or cfg.synth.get("embedding_dim", 0) > 0, "inputs.embeddings", "required by embedding subgroup methods")


def check_inputs(cfg: RunConfig, required: tuple[str, ...]) -> None:
    """Referenced paths must exist."""
    for name in required:
        v = getattr(cfg.inputs, name)
        _check(v is not None, f"inputs.{name}", "required")
    for f in fields(cfg.inputs):
        v = getattr(cfg.inputs, f.name)
        if v is not None:
            _check(cfg.resolve(v).exists(), f"inputs.{f.name}", f"file not found: {v}")


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML: {exc}") from exc
    return from_mapping(raw or {}, base_dir=path.parent)


def dump(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    return yaml.safe_dump(d, sort_keys=True)


