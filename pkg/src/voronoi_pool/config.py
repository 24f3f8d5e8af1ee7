"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # model
    C_in: int = 8
    H: int = 0  # 0 -> 2 * max(C_in, C, M)
    C: int = 8
    M: int = 8
    sigma_mode: str = "sqrt_m"  # sqrt_m | m | <positive number>
    eps: float = 1e-5
    momentum: float = 0.1
    # training
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 8  # places per mini-batch
    margin: float = 1.0
    # synthetic generator
    places: int = 64
    views: int = 4
    locations: int = 24
    noise: float = 0.5
    spacing: float = 20.0
    hetero: bool = False
    gain_range: float = 3.0
    offset_scale: float = 2.0

    @property
    def hidden(self) -> int:
        return self.H if self.H > 0 else 2 * max(self.C_in, self.C, self.M)

    @property
    def sigma(self) -> float:
        from .whitening import sigma_for
        return sigma_for(self.sigma_mode, self.M)

    def validate(self) -> "RunConfig":
        for name in ("C_in", "C", "places", "views", "locations", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.M < 2:
            raise ConfigError("M must be >= 2")
        if self.H < 0:
            raise ConfigError("H must be >= 0")
        if self.eps < 0 or self.lr <= 0 or self.noise < 0 or self.margin < 0:
            raise ConfigError("eps, noise and margin must be >= 0 and lr > 0")
        if self.spacing < 10.0:
            raise ConfigError("spacing must be at least 10 m")
        if not 0 < self.momentum <= 1:
            raise ConfigError("momentum must be in (0, 1]")
        if self.gain_range < 1.0:
            raise ConfigError("gain_range must be >= 1")
        try:
            self.sigma
        except ValueError as exc:
            raise ConfigError(f"sigma_mode: {exc}") from None
        return self

    def with_overrides(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None}).validate()

    def rng(self, stream: int = 0) -> np.random.Generator:
        """Philox (counter-based, 64-bit) stream derived from the seed."""
        return np.random.Generator(np.random.Philox(key=[self.seed, stream]))

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _convert(name: str, typ, raw: str):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, types[key], raw)
    return RunConfig(**values).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text(encoding="utf-8"))
