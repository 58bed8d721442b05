"""Resolved run configuration: a flat ``key = value`` file plus overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from slifmr.errors import ConfigError

SEED_ENV = "SLIF_SEED"


@dataclass(frozen=True)
class TrainConfig:
    # data
    data_dir: str = ""
    synthetic: bool = True
    synth_users: int = 1000
    synth_items: int = 1000
    synth_clusters: int = 5
    synth_interactions: int = 20000
    synth_seed: int = 0
    kcore: int = 0
    split_valid: float = 0.1
    split_test: float = 0.1
    output_dir: str = "runs"
    # seeds and schedule
    seed: int = 0
    epochs: int = 30
    eval_interval: int = 1
    patience: int = 10
    K_list: tuple = (20,)
    # model
    d: int = 64
    batch_size: int = 4096
    lr: float = 1e-3
    L_b: int = 2
    L_m: int = 2
    L_k: int = 2
    topk_per_modality: int = 10
    prune_ratio: float = 0.1
    kg_inverse_edges: bool = True
    static_attention: bool = False
    fusion_mode: str = "ailf"
    # self-loop enhancement
    sge_enabled: bool = True
    sge_interval: int = 1
    sge_topn: int = 10
    sge_merge: str = "replace"
    # objectives
    tau: float = 0.2
    t_uniform: float = 2.0
    beta: float = 0.5
    gamma: float = 1e-3
    eta: float = 1e-4
    intra_form: str = "literal"
    intra_map: str = "l2"
    cl_enabled: bool = True
    # ablations
    kg_enabled: bool = True
    mm_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "K_list", tuple(int(k) for k in self.K_list))
        validate(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["K_list"] = list(self.K_list)
        return out


_CHOICES = {
    "fusion_mode": ("ailf", "concat", "sum", "attention"),
    "sge_merge": ("replace", "accumulate"),
    "intra_form": ("literal", "logsumexp"),
    "intra_map": ("l2", "identity"),
}

_POSITIVE_INT = ("synth_users", "synth_items", "synth_clusters", "synth_interactions", "epochs",
                 "eval_interval", "patience", "d", "batch_size", "L_b", "L_m", "L_k",
                 "topk_per_modality", "sge_interval", "sge_topn")


def _fail(key, msg):
    raise ConfigError(f"{key}: {msg}")


def validate(cfg: TrainConfig):
    for key in _POSITIVE_INT:
        if getattr(cfg, key) < 1:
            _fail(key, "must be >= 1")
    for key, options in _CHOICES.items():
        if getattr(cfg, key) not in options:
            _fail(key, f"must be one of {options}, got {getattr(cfg, key)!r}")
    if not 0 < cfg.lr <= 1:
        _fail("lr", "must lie in (0, 1]")
    if not 0 <= cfg.prune_ratio < 1:
        _fail("prune_ratio", "must lie in [0, 1)")
    if cfg.tau <= 0:
        _fail("tau", "must be positive")
    if cfg.t_uniform <= 0:
        _fail("t_uniform", "must be positive")
    for key in ("beta", "gamma", "eta"):
        if getattr(cfg, key) < 0:
            _fail(key, "must be non-negative")
    if cfg.kcore < 0:
        _fail("kcore", "must be >= 0")
    for key in ("split_valid", "split_test"):
        if not 0 <= getattr(cfg, key) < 1:
            _fail(key, "must lie in [0, 1)")
    if cfg.split_valid + cfg.split_test >= 1:
        _fail("split_test", "valid + test fractions must be < 1")
    if not cfg.K_list or min(cfg.K_list) < 1:
        _fail("K_list", "needs at least one K >= 1")
    if cfg.seed < 0:
        _fail("seed", "must be >= 0")
    if not cfg.synthetic and not cfg.data_dir:
        _fail("data_dir", "required when synthetic = false")


# parsing -----------------------------------------------------------------

_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_assignment(text: str):
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip().removeprefix("--")
    return key, _coerce(key, value)


def read_config_file(path) -> dict:
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                key, value = parse_assignment(line)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{no}: {exc}") from None
            out[key] = value
    return out


def resolve(config_path=None, overrides=(), env=None) -> TrainConfig:
    """File values, then ``key=value`` overrides, then the seed env var."""
    values = read_config_file(config_path) if config_path else {}
    for item in overrides:
        key, value = parse_assignment(item)
        values[key] = value
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _coerce("seed", env[SEED_ENV])
    return TrainConfig(**values)


def write_config(path, cfg: TrainConfig):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in cfg.to_dict().items():
            if isinstance(value, list):
                value = ",".join(map(str, value))
            elif isinstance(value, bool):
                value = str(value).lower()
            fh.write(f"{key} = {value}\n")
