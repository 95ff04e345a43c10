"""Max-scaled and clipped uniform quantizers (signed and unsigned)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import GroupView, as_array, group_view

BOUNDARY_MODES = ("math", "twos")


@dataclass(frozen=True)
class QuantSpec:
    """Uniform quantizer configuration.

    ``boundary="math"`` keeps both end levels +-s attainable. ``"twos"`` drops
    the top signed level, as a two's-complement integer would; unsigned grids
    are not affected by it.
    """

    bits: int = 4
    signed: bool = True
    boundary: str = "math"
    rounding: str = "half_away"

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if self.rounding != "half_away":
            raise ValueError(f"unknown rounding mode {self.rounding!r}")

    @property
    def noise_coeff(self) -> float:
        """Additive-model discretization variance per unit s**2."""
        return 4.0 ** (-self.bits) / (3.0 if self.signed else 12.0)

    @property
    def step_factor(self) -> float:
        """Quantization step divided by the clipping scalar (a power of two)."""
        return 2.0 ** (1 - self.bits) if self.signed else 2.0 ** (-self.bits)

    @property
    def level_range(self) -> tuple[int, int]:
        """Smallest and largest integer level."""
        if self.signed:
            top = 2 ** (self.bits - 1)
            hi = top - 1 if self.boundary == "twos" else top
            return -top, hi
        return 0, 2**self.bits


@dataclass(frozen=True)
class ScalarSet:
    """One clipping scalar per scaling group.

    ``degenerate`` marks all-zero groups; their scalar is 0.
    """

    scalars: np.ndarray
    view: GroupView
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.scalars, dtype=np.float64)).copy()
        if s.shape != (self.view.group_count,):
            raise ValueError(
                f"expected {self.view.group_count} scalars, got {s.shape[0]}"
            )
        deg = self.degenerate
        deg = s == 0 if deg is None else np.asarray(deg, dtype=bool).copy()
        if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any((s == 0) & ~deg):
            raise ValueError("clipping scalars must be positive and finite")
        s.setflags(write=False)
        deg.setflags(write=False)
        object.__setattr__(self, "scalars", s)
        object.__setattr__(self, "degenerate", deg)

    def __len__(self):
        return len(self.scalars)

    def broadcast(self) -> np.ndarray:
        """Scalars expanded to the viewed tensor's shape."""
        rows = np.repeat(self.scalars[:, None], self.view.group_size, axis=1)
        return self.view.merge(rows)


def _as_scalar_set(s, x: np.ndarray) -> ScalarSet:
    if isinstance(s, ScalarSet):
        return s
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if s.size == 1:
        return ScalarSet(s, group_view(x.shape))
    return ScalarSet(s, group_view(x.shape, 0))


def check_unsigned(x: np.ndarray) -> None:
    if np.any(x < 0):
        raise ValueError("unsigned quantization applied to negative data")


def round_half_away(u: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact in float64)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 0:
        return round_half_away(u.reshape(1))[0]
    a = np.abs(u)
    r = np.floor(a)
    np.subtract(a, r, out=a)
    np.add(r, a >= 0.5, out=r)
    return np.copysign(r, u, out=r)


def max_scalar(t, view: GroupView | None = None, signed: bool = True) -> ScalarSet:
    """Largest magnitude (signed) or largest value (unsigned) per group."""
    x = as_array(t)
    view = view or group_view(x.shape)
    rows = view.split(x)
    if signed:
        s = np.abs(rows).max(axis=1)
    else:
        check_unsigned(rows)
        s = rows.max(axis=1)
    return ScalarSet(s, view, degenerate=s == 0)


def quantize_rows(rows: np.ndarray, s: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Quantize (G, n) ``rows`` with per-row scalars ``s`` of shape (G,).

    Rows with s == 0 must be all-zero and pass through unchanged.
    """
    lo, hi = spec.level_range
    s = np.asarray(s, dtype=np.float64)
    zero = s == 0
    step = (np.where(zero, 1.0, s) * spec.step_factor)[:, None]
    # round magnitudes, cap them, then restore the sign (same result as
    # round-then-clip, with fewer passes over the data)
    a = rows / step
    np.abs(a, out=a)
    k = np.floor(a)
    np.subtract(a, k, out=a)
    np.add(k, a >= 0.5, out=k)
    if -lo == hi or not spec.signed:
        np.minimum(k, hi, out=k)
    else:
        np.minimum(k, np.where(rows < 0, -lo, hi), out=k)
    np.copysign(k, rows, out=k)
    k *= step
    if zero.any():
        k[zero] = 0.0
    return k


def quantize_clipped(t, scalars, spec: QuantSpec) -> np.ndarray:
    """Clipped uniform quantization of ``t`` with the given clipping scalars.

    Signed: ``clip(s * 2**(1-B) * round(x * 2**(B-1) / s), -s, s)``.
    Unsigned: ``min(s * 2**-B * round(x * 2**B / s), s)``.
    ``scalars`` may be a ScalarSet, a float (per-tensor) or one value per row.
    """
    x = as_array(t)
    ss = _as_scalar_set(scalars, x)
    rows = ss.view.split(x)
    if not spec.signed:
        check_unsigned(rows)
    zero = ss.scalars == 0
    if np.any(zero) and np.any(rows[zero] != 0):
        raise ValueError("non-positive clipping scalar for a nonzero group")
    return ss.view.merge(quantize_rows(rows, ss.scalars, spec))


def quantize_max_scaled(
    t, view: GroupView | None = None, spec: QuantSpec = QuantSpec()
) -> tuple[np.ndarray, ScalarSet]:
    """Quantize with s = max magnitude per group, so nothing is clipped."""
    ss = max_scalar(t, view, spec.signed)
    return quantize_clipped(t, ss, spec), ss
