"""Run configuration read from a plain ``key = value`` text file.

Recognised keys::

    d = 3
    margin = 1.1
    n = 10000            # calibration sample count
    seed = 0
    tol.expansion = 1e-9 # any name from TOLERANCE_KEYS

Blank lines and ``#`` comments are ignored.  Any other content is an error
that names the offending line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import DomainError

TOLERANCE_KEYS = (
    "expansion",
    "boundary",
    "ball_lemmas",
    "roundtrips_and_zeros",
    "pair_contraction",
    "periodic",
)


class ConfigError(DomainError):
    pass


@dataclass
class RunConfig:
    d: int = 2
    margin: float = 1.1
    n: int = 10_000
    seed: int = 0
    tolerances: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.d < 2:
            raise ConfigError(f"d must be >= 2, got {self.d}")
        if not self.margin > 1:
            raise ConfigError(f"margin must exceed 1, got {self.margin}")
        if self.n < 10_000:
            raise ConfigError(f"n must be >= 10000, got {self.n}")
        for k, v in self.tolerances.items():
            if k not in TOLERANCE_KEYS:
                raise ConfigError(f"unknown tolerance {k!r}")
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"tolerance {k} must be positive and finite")
        return self

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{source}:{lineno}"
            if "=" not in line:
                raise ConfigError(f"{where}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in seen:
                raise ConfigError(f"{where}: duplicate key {key!r}")
            seen.add(key)
            try:
                if key in ("d", "n", "seed"):
                    setattr(cfg, key, int(value))
                elif key == "margin":
                    cfg.margin = float(value)
                elif key.startswith("tol.") and key[4:] in TOLERANCE_KEYS:
                    cfg.tolerances[key[4:]] = float(value)
                else:
                    raise ConfigError(f"{where}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{where}: bad value for {key}: {value!r}") from None
        try:
            return cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        return cls.parse(text, str(path))

    def dumps(self) -> str:
        lines = [f"d = {self.d}", f"margin = {self.margin!r}", f"n = {self.n}", f"seed = {self.seed}"]
        lines += [f"tol.{k} = {self.tolerances[k]!r}" for k in sorted(self.tolerances)]
        return "\n".join(lines) + "\n"
