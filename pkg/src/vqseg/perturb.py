"""Input perturbations f(x) and their offsets delta(x) = f(x) - x.

Noise levels use one fixed calibration (see ``CALIBRATION``).  Every
realisation is a pure function of (seed, draw, image index).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, PreconditionError
from .seeding import stream_key

KINDS = ("gaussian", "salt_pepper", "poisson", "domain_shift", "identity")

CALIBRATION = (
    "gaussian: std=level (unit intensity range); "
    "salt_pepper: exactly round(level*pixels) pixels per image set to 0/1 with p=1/2; "
    "poisson: counts scale C=max(1,round(0.5/(0.5*level)^2)), relative std=level at 0.5; "
    "domain_shift: x+level*(shift(x)-x), shift=clamp(contrast*(x^gamma-0.5)+0.5+bias); "
    "all outputs clamped to [0,1]"
)


@dataclass(frozen=True)
class DomainParams:
    gamma: float = 1.6
    contrast: float = 0.8
    bias_amp: float = 0.08


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "identity"
    level: float = 0.0
    seed: int = 0
    domain_params: DomainParams | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.level <= 1.0:
            raise ConfigError(f"perturbation level must be in [0,1], got {self.level}")

    @property
    def effective_level(self) -> float:
        return 0.0 if self.kind == "identity" else self.level

    def with_level(self, level: float) -> "PerturbationSpec":
        return replace(self, level=level)

    def __str__(self) -> str:
        return f"{self.kind}:{self.level:g}:{self.seed}"

    @classmethod
    def parse(cls, text: str) -> "PerturbationSpec":
        """Parse ``kind:level:seed`` (seed optional)."""
        parts = text.strip().split(":")
        if not 1 <= len(parts) <= 3:
            raise ConfigError(f"perturbation spec must be kind:level:seed, got {text!r}")
        try:
            level = float(parts[1]) if len(parts) > 1 else 0.0
            seed = int(parts[2]) if len(parts) > 2 else 0
        except ValueError as exc:
            raise ConfigError(f"bad perturbation spec {text!r}: {exc}") from exc
        return cls(parts[0], level, seed)


def poisson_scale(level: float) -> float:
    return max(1.0, round(0.5 / (0.5 * level) ** 2))


def _rng(spec: PerturbationSpec, draw: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(spec.seed), stream_key(spec.kind), int(draw), int(index)])


def _bias_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros((h, w))
    for _ in range(2):
        fy, fx = rng.uniform(-1.0, 1.0, size=2)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return field / max(np.abs(field).max(), 1e-12)


def _perturb_image(spec: PerturbationSpec, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    level = spec.effective_level
    x = img.astype(np.float64)
    if spec.kind == "gaussian":
        out = x + rng.normal(0.0, level, size=x.shape)
    elif spec.kind == "salt_pepper":
        out = x.copy()
        flat = out.reshape(-1)
        n = int(round(level * flat.size))
        where = rng.choice(flat.size, size=n, replace=False)
        flat[where] = (rng.random(n) < 0.5).astype(np.float64)
    elif spec.kind == "poisson":
        c = poisson_scale(level)
        out = rng.poisson(np.clip(x, 0.0, 1.0) * c) / c
    elif spec.kind == "domain_shift":
        p = spec.domain_params or DomainParams()
        bias = p.bias_amp * _bias_field(rng, *x.shape[-2:])
        shifted = np.clip(p.contrast * (x**p.gamma - 0.5) + 0.5 + bias, 0.0, 1.0)
        out = x + level * (shifted - x)
    else:
        return img.copy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply(spec: PerturbationSpec, x: np.ndarray, draw: int = 0, offset: int = 0) -> np.ndarray:
    """Perturb a batch ``x[N,C,H,W]`` with values in [0,1].

    Image ``n`` of the batch uses the stream (seed, kind, draw, offset + n).
    A zero level returns the input unchanged.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.size and (x.min() < 0.0 or x.max() > 1.0 or not np.all(np.isfinite(x))):
        raise PreconditionError("perturbation input must lie in [0, 1]")
    if spec.effective_level == 0.0:
        return x.copy()
    out = np.empty_like(x)
    for n in range(x.shape[0]):
        out[n] = _perturb_image(spec, x[n], _rng(spec, draw, offset + n))
    return out


def delta(spec: PerturbationSpec, x: np.ndarray, draw: int = 0, offset: int = 0) -> np.ndarray:
    """f(x) - x for the same realisation ``apply`` would produce.

    Returned in float64, where differences of float32 values are exact, so
    ``x + delta`` reproduces ``apply`` bit for bit.
    """
    x = np.asarray(x, dtype=np.float32)
    return apply(spec, x, draw, offset).astype(np.float64) - x.astype(np.float64)
