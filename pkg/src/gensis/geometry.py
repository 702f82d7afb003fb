"""Interpolation in embedding space (SLERP), logit entanglement, pixel mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_CLAMP = 1e-7
# must exceed the angle implied by _CLAMP (about 4.5e-4 rad)
_DEGENERATE = 1e-3


@dataclass(frozen=True)
class AlphaPolicy:
    """How interpolation ratios are chosen: ``fixed`` or ``uniform_choice``."""

    mode: str = "fixed"
    values: tuple[float, ...] = (0.5,)

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform_choice"):
            raise ValueError(f"unknown alpha policy mode {self.mode!r}")
        if not self.values:
            raise ValueError("alpha policy needs at least one value")
        if self.mode == "fixed" and len(self.values) != 1:
            raise ValueError("fixed alpha policy takes exactly one value")
        if any(not 0.0 < a < 1.0 for a in self.values):
            raise ValueError(f"alpha values must lie in (0, 1): {self.values}")

    @classmethod
    def fixed(cls, alpha: float = 0.5) -> AlphaPolicy:
        return cls("fixed", (float(alpha),))

    @classmethod
    def uniform_choice(cls, values=(0.2, 0.4, 0.6, 0.8)) -> AlphaPolicy:
        return cls("uniform_choice", tuple(float(v) for v in values))

    def support(self) -> tuple[float, ...]:
        return self.values

    def sample(self, rng: np.random.Generator, size=None):
        if self.mode == "fixed":
            return self.values[0] if size is None else np.full(size, self.values[0])
        return rng.choice(np.asarray(self.values), size=size)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> AlphaPolicy:
        unknown = set(d) - {"mode", "values"}
        if unknown:
            raise ValueError(f"unknown alpha policy keys: {sorted(unknown)}")
        return cls(d.get("mode", "fixed"), tuple(float(v) for v in d.get("values", (0.5,))))


def slerp(e1, e2, alpha, normalize: bool = False) -> np.ndarray:
    """Spherical interpolation where ``alpha`` is the weight of ``e1``.

    The angle is measured between unit directions; the result's norm is the
    alpha-blend of the input norms (or 1 with ``normalize``). Works on single
    vectors or row batches; ``alpha`` may be a scalar or one value per row.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ValueError(f"slerp: shape mismatch {e1.shape} vs {e2.shape}")
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("slerp: alpha must lie in [0, 1]")
    n1 = np.linalg.norm(e1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(e2, axis=-1, keepdims=True)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ValueError("slerp: zero-norm input")
    if a.ndim and e1.ndim > 1:
        a = a.reshape(a.shape + (1,) * (e1.ndim - a.ndim))
    u1, u2 = e1 / n1, e2 / n2
    cos = np.clip((u1 * u2).sum(axis=-1, keepdims=True), -1.0 + _CLAMP, 1.0 - _CLAMP)
    omega = np.arccos(cos)
    sin_omega = np.sin(omega)
    direction = (np.sin(a * omega) * u1 + np.sin((1.0 - a) * omega) * u2) / sin_omega
    degenerate = (omega < _DEGENERATE) | (np.abs(np.pi - omega) < _DEGENERATE)
    if np.any(degenerate):
        lerp = a * u1 + (1.0 - a) * u2
        lerp_norm = np.linalg.norm(lerp, axis=-1, keepdims=True)
        if np.any(degenerate & (lerp_norm == 0)):
            raise ValueError("slerp: antipodal inputs with no defined midpoint")
        direction = np.where(degenerate, lerp / np.where(lerp_norm == 0, 1.0, lerp_norm), direction)
    if normalize:
        return direction
    out = direction * (a * n1 + (1.0 - a) * n2)
    # endpoints and coincident inputs are returned verbatim
    same = np.all(e1 == e2, axis=-1, keepdims=True)
    out = np.where((a == 1.0) | same, e1, out)
    return np.where(a == 0.0, e2, out)


def entangle_logits(L1, L2, alpha):
    """``alpha * L1 + (1 - alpha) * L2``; ``alpha`` scalar or one per row."""
    a = np.asarray(alpha, dtype=np.float64)
    L1 = np.asarray(L1)
    L2 = np.asarray(L2)
    if a.ndim and L1.ndim > 1:
        a = a.reshape(a.shape + (1,) * (L1.ndim - a.ndim))
    return a * L1 + (1.0 - a) * L2


def mix_pixels(I1, I2, alpha, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Pixel-space blend ``alpha * I1 + (1 - alpha) * I2`` clamped to the valid range."""
    I1 = np.asarray(I1)
    I2 = np.asarray(I2)
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim and I1.ndim > 1:
        a = a.reshape(a.shape + (1,) * (I1.ndim - a.ndim))
    out = np.clip(a * I1 + (1.0 - a) * I2, lo, hi)
    return out.astype(np.result_type(I1.dtype, I2.dtype))
