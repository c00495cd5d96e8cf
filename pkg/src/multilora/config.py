"""Run configuration shared by the trainer and the command line."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .model import PROJECTIONS, ModelConfig
from .tasks import TASKS

METHODS = ("ft", "lora", "multilora")

# Appendix-style defaults: AdamW, linear schedule, 5% warmup, 2 epochs.
DEFAULT_LR = {"ft": 5e-6, "lora": 5e-5, "multilora": 5e-5}


@dataclass
class RunConfig:
    # model
    d_model: int = 64
    n_heads: int = 4
    d_mid: int = 172
    n_layers: int = 2
    vocab: int = 64
    max_seq: int = 64
    precision: str = "double"
    # method
    method: str = "lora"
    r: int = 8
    n: int = 3
    alpha: float | None = None  # None -> alpha = r, i.e. static scale 1
    targets: tuple = PROJECTIONS
    # optimisation
    lr: float | None = None  # None -> DEFAULT_LR[method]
    lr_scale: float = 1.0
    epochs: int = 2
    batch: int = 8
    warmup_ratio: float = 0.05
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0  # <= 0 disables clipping
    steps: int = 0  # 0 -> epochs * batches per epoch
    # seeds: base model init, adapter init + data order, mixture generation
    base_seed: int = 0
    seed: int = 0
    data_seed: int = 0
    task_counts: dict = field(default_factory=lambda: {t: 1000 for t in TASKS})

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        self.targets = tuple(self.targets)
        bad = [t for t in self.targets if t not in PROJECTIONS]
        if bad:
            raise ValueError(f"unknown target(s) {bad}; valid: {', '.join(PROJECTIONS)}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        self.model_config()  # validates dimensions

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d_model, self.n_heads, self.d_mid, self.n_layers,
                           self.vocab, self.max_seq, self.precision)

    @property
    def effective_alpha(self) -> float:
        return float(self.r if self.alpha is None else self.alpha)

    @property
    def effective_lr(self) -> float:
        base = DEFAULT_LR[self.method] if self.lr is None else self.lr
        return base * self.lr_scale

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _convert(name: str, raw: str, current):
    if name == "targets":
        return tuple(t.strip() for t in raw.split(",") if t.strip())
    if name == "task_counts":
        out = {}
        for item in raw.split(","):
            task, _, count = item.partition(":")
            out[task.strip()] = int(count)
        return out
    if name in ("alpha", "lr"):
        return None if raw.lower() in ("", "none") else float(raw)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_overrides(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """New config with string-valued overrides (from a kv file) applied."""
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - fields
    if unknown:
        raise ValueError(f"unknown config key(s): {sorted(unknown)}")
    d = cfg.to_dict()
    for key, raw in values.items():
        d[key] = _convert(key, raw, getattr(cfg, key))
    return RunConfig.from_dict(d)
