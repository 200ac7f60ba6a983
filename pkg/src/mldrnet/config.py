"""Run configuration: flat ``key=value`` files and overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .model import DEFAULT_TRUNK, ModelConfig, mldrnet_trace
from .training import TrainConfig

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed")


def _parse_floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _parse_ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    # when set, train_data is split into (train, test, val) with these fractions
    split: tuple = ()
    out_dir: str = "run"

    def validate(self) -> "RunConfig":
        self.model.seed = self.seed
        self.train.seed = self.seed
        self.model.validate()
        if self.model.arch == "mldrnet":
            mldrnet_trace(self.model)  # every stage must keep a positive spatial size
        self.train.validate()
        if self.split and (len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0):
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        return self

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "train_data": self.train_data, "val_data": self.val_data,
             "test_data": self.test_data, "split": list(self.split), "out_dir": self.out_dir}
        d.update({k: v for k, v in self.model.to_dict().items() if k != "seed"})
        d.update({k: getattr(self.train, k) for k in TRAIN_KEYS})
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that determines the numbers (paths and output dir excluded)."""
        d = self.to_dict()
        for k in ("train_data", "val_data", "test_data", "out_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _convert(key, value):
    if key == "trunk_channels":
        return _parse_ints(value)
    if key == "split":
        return _parse_floats(value)
    if key in ("fusion", "arch", "lr_policy", "train_data", "val_data", "test_data", "out_dir"):
        return str(value)
    if key in ("seed", "depth", "n_classes", "input_size", "branch_hidden", "reduce_channels",
               "first_stride", "width_divisor", "epochs", "batch_size", "lr_every"):
        return int(value)
    return float(value)


def apply(cfg: RunConfig, values: dict) -> RunConfig:
    """Return ``cfg`` with ``values`` (strings or typed) applied; unknown keys are errors."""
    for key, raw in values.items():
        key = key.replace("-", "_")
        try:
            value = _convert(key, raw)
        except ValueError:
            raise ValueError(f"bad value for {key}: {raw!r}") from None
        if key in MODEL_KEYS and key != "seed":
            setattr(cfg.model, key, value)
        elif key in TRAIN_KEYS:
            setattr(cfg.train, key, value)
        elif key in ("seed", "train_data", "val_data", "test_data", "split", "out_dir"):
            setattr(cfg, key, value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    given = {k.replace("-", "_") for k in values}
    if "depth" in given and "trunk_channels" not in given:
        cfg.model.trunk_channels = DEFAULT_TRUNK[:cfg.model.depth]
    cfg.model.trunk_channels = tuple(cfg.model.trunk_channels)
    return cfg


def parse_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = value
    return values


def load_file(path) -> dict:
    with open(path) as fh:
        return parse_text(fh.read())
