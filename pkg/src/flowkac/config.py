"""Experiment configuration files (INI layout, JSON-encoded values).

Example::

    [sde]
    name = "ou2d"

    [train]
    n_x = 1000
    mode = "trick"

Every key is validated against a schema; unknown sections or keys raise
:class:`ConfigError` naming the offender.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FlowKacError
from .models import CATALOG_NAMES, catalog, catalog_param_keys
from .training import AdaptiveConfig, TrainConfig

SECTIONS = ("sde", "flow", "train", "eval", "output")

# key -> default; None means "leave to the downstream default"
SCHEMA: dict[str, dict[str, object]] = {
    "sde": {"name": None, "params": {}},
    "flow": {"depth": 4, "width": 32, "n_bins": 32},
    "train": {
        "n_x": 2000, "n_t": 10, "n_W": 300, "n_epochs": 50, "batch_size": 2000, "lr": 1e-3,
        "box": None, "T": None, "mode": "trick", "taylor_order": 1, "seed": 0, "dt": 1e-3,
        "x_ref": None, "checkpoint_every": 0,
        "adaptive": False, "warmup_epochs": 50, "mix_ratio": 0.5, "adaptive_every": 10,
    },
    "eval": {
        "mode": "grid", "n_eval": None, "times": [0.0, 1.0], "seed": 0,
        "adi_delta": 0.05, "adi_h": 1e-4,
        "bench_sizes": [[2000, 10]], "bench_n_W": 500,
        "amort_n_x": 5000, "amort_n_t": 20, "amort_n_W": 100,
    },
    "output": {"dir": "runs/out"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)  # section -> key -> value (fully populated)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def sde_name(self) -> str:
        return self.values["sde"]["name"]

    @property
    def seed(self) -> int:
        return int(self.values["train"]["seed"])

    def sde(self):
        return catalog(self.sde_name, self.values["sde"]["params"])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        v = json.loads(json.dumps(self.values))
        v["train"]["seed"] = int(seed)
        return ExperimentConfig(v)

    def train_config(self, checkpoint_path: str | None = None) -> TrainConfig:
        tr, fl = self.values["train"], self.values["flow"]
        box = tr["box"]
        return TrainConfig(
            n_x=tr["n_x"], n_t=tr["n_t"], n_W=tr["n_W"], n_epochs=tr["n_epochs"],
            batch_size=tr["batch_size"], lr=tr["lr"],
            box=None if box is None else (tuple(box[0]), tuple(box[1])),
            T=tr["T"], mode=tr["mode"], taylor_order=tr["taylor_order"],
            adaptive=AdaptiveConfig(tr["adaptive"], tr["warmup_epochs"], tr["mix_ratio"], tr["adaptive_every"]),
            seed=tr["seed"], depth=fl["depth"], width=fl["width"], n_bins=fl["n_bins"], dt=tr["dt"],
            x_ref=None if tr["x_ref"] is None else tuple(tr["x_ref"]),
            checkpoint_every=tr["checkpoint_every"], checkpoint_path=checkpoint_path,
        )

    def canonical(self) -> str:
        return serialize(self)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _decode(section: str, key: str, raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        raise ConfigError(f"[{section}] {key}: value {raw!r} is not valid JSON") from None


def parse_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case-sensitive (n_W, T)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    values = {s: dict(keys) for s, keys in SCHEMA.items()}
    values = json.loads(json.dumps(values))
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            values[section][key] = _decode(section, key, raw)
    cfg = ExperimentConfig(values)
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text)


def validate(cfg: ExperimentConfig) -> None:
    name = cfg.values["sde"]["name"]
    if name not in CATALOG_NAMES:
        raise ConfigError(f"[sde] name: unknown SDE {name!r}")
    params = cfg.values["sde"]["params"]
    if not isinstance(params, dict):
        raise ConfigError("[sde] params must be a JSON object")
    allowed = catalog_param_keys(name)
    for key in params:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [sde] params for {name}")
    try:
        sde = cfg.sde()
        cfg.train_config().flow_config(sde)
    except FlowKacError as exc:
        raise ConfigError(str(exc)) from None
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid value: {exc}") from None
    ev = cfg.values["eval"]
    if ev["mode"] not in ("grid", "sample"):
        raise ConfigError("[eval] mode must be 'grid' or 'sample'")
    if not isinstance(ev["times"], list) or not ev["times"]:
        raise ConfigError("[eval] times must be a non-empty list")


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key in sorted(cfg.values[section]):
            lines.append(f"{key} = {json.dumps(cfg.values[section][key], sort_keys=True)}")
        lines.append("")
    return "\n".join(lines)


def provenance_header(cfg: ExperimentConfig, seed: int | None = None) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.seed if seed is None else seed}\n"
