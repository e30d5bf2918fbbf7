"""Layer hyperparameters and the ``MANAR-M.m.C`` naming codec."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace

DEFAULT_K_TOP = 8

_NAME_RE = re.compile(r"^MANAR-(\d+[Kk]?)\.(\d+[Kk]?)\.(\d+[Kk]?)(?:-[A-Za-z]+)?$")
NAME_PATTERN = "MANAR-<M>.<m>.<C>  (integers, optional K suffix = x1024, e.g. MANAR-256.32.96)"


class ConfigError(ValueError):
    pass


class ParseError(ConfigError):
    pass


def _count(tok: str) -> int:
    if tok[-1] in "Kk":
        return int(tok[:-1]) * 1024
    return int(tok)


def parse_config(name: str) -> tuple[int, int, int]:
    """Split ``MANAR-M.m.C`` into ``(M, m, C)``.

    >>> parse_config("MANAR-484.64.128")
    (484, 64, 128)
    """
    match = _NAME_RE.match(name.strip())
    if match is None:
        raise ParseError(f"malformed config name {name!r}; expected {NAME_PATTERN}")
    return tuple(_count(g) for g in match.groups())


def format_config(M: int, m: int, C: int) -> str:
    return f"MANAR-{M}.{m}.{C}"


def is_square(x: int) -> bool:
    r = math.isqrt(x)
    return r * r == x


@dataclass(frozen=True)
class ManarConfig:
    D: int
    h: int
    M: int
    m: int
    l: int
    k_top: int = DEFAULT_K_TOP
    key_mode: str = "flat"

    @property
    def d(self) -> int:
        return self.D // self.h

    @property
    def C(self) -> int:
        return 2 * self.l

    @property
    def name(self) -> str:
        return format_config(self.M, self.m, self.C)

    @classmethod
    def from_name(cls, name: str, D: int, h: int, **kw) -> "ManarConfig":
        M, m, C = parse_config(name)
        if C % 2:
            raise ConfigError(f"context window length C={C} must be even (C = 2l)")
        cfg = cls(D=D, h=h, M=M, m=m, l=C // 2, **kw)
        cfg.validate()
        return cfg

    def with_(self, **kw) -> "ManarConfig":
        return replace(self, **kw)

    def validate(self) -> "ManarConfig":
        if self.h < 1 or self.D % self.h:
            raise ConfigError(f"D={self.D} must be a positive multiple of h={self.h}")
        if self.m < 0:
            raise ConfigError(f"m={self.m} must be >= 0")
        if self.l < 1:
            raise ConfigError(f"half-window l={self.l} must be >= 1")
        if self.M < 1 or self.k_top < 1:
            raise ConfigError(f"need M >= 1 and k_top >= 1 (M={self.M}, k_top={self.k_top})")
        if self.key_mode == "flat":
            if self.k_top > self.M:
                raise ConfigError(f"k_top={self.k_top} exceeds memory size M={self.M}")
        elif self.key_mode == "product":
            if not is_square(self.M):
                raise ConfigError(f"product keys need a perfect-square M, got {self.M}")
            if self.d % 2:
                raise ConfigError(f"product keys need an even head width, got d={self.d}")
            if self.k_top > math.isqrt(self.M):
                raise ConfigError(f"k_top={self.k_top} exceeds sqrt(M)={math.isqrt(self.M)}")
        else:
            raise ConfigError(f"unknown key_mode {self.key_mode!r}")
        return self
