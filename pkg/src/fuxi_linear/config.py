from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np

__all__ = ["ModelConfig", "TrainConfig", "BenchConfig", "ConfigError", "load_toml"]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``vocab`` counts the padding id 0, so real items are ``1 .. vocab-1``.
    ``n`` is both the training sequence length and the capacity of the
    absolute and kernel positional tables.
    """

    n: int = 50
    d: int = 64
    L: int = 2
    H: int = 4
    H_t: int = 4
    d_p: int = 32
    d_ffn: int = 128
    C: int = 128
    B: int = 8
    b0: int = 0
    vocab: int = 201
    neg_samples: int = 128
    time_scale: float = 86400.0
    precision: str = "float32"
    seed: int = 0
    use_retention: bool = True
    use_positional: bool = True
    use_temporal: bool = True
    use_temporal_qk: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def periods(self) -> list[int]:
        """Integer period ``B ** (b0 + h)`` of each temporal head pair, h = 1..H_t."""
        return [self.B ** (self.b0 + h) for h in range(1, self.H_t + 1)]

    def validate(self) -> None:
        positive = ["n", "d", "H", "H_t", "d_p", "d_ffn", "C", "vocab", "neg_samples"]
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.L < 0:
            raise ConfigError("L must be >= 0")
        if self.d % self.H:
            raise ConfigError(f"d={self.d} is not divisible by H={self.H}")
        if self.d % (2 * self.H_t):
            raise ConfigError(f"d={self.d} is not divisible by 2*H_t={2 * self.H_t}")
        if not isinstance(self.B, (int, np.integer)) or self.B < 2:
            raise ConfigError("B must be an integer >= 2")
        # B^b0 is an integer exactly when b0 >= 0 for integer B >= 2
        if not isinstance(self.b0, (int, np.integer)) or self.b0 < 0:
            raise ConfigError("B**b0 must be an integer, so b0 must be a non-negative integer")
        if self.B ** (self.b0 + self.H_t) >= 2 ** 62:
            raise ConfigError("largest temporal period overflows int64")
        if self.time_scale <= 0:
            raise ConfigError("time_scale must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model options: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.98)
    seed: int = 0
    data: str = ""
    log_every: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BenchConfig:
    lengths: list = field(default_factory=lambda: [512, 1024, 2048])
    repeats: int = 7
    warmup: int = 3
    mode: str = "prefill"
    comparator: str = "none"

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown bench options: {sorted(unknown)}")
        return cls(**d)


def load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)
