"""Backward rules for the clipped quantizer: STE, PWL and MAD."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .quantizer import QuantSpec, _as_scalar_set, quantize_clipped
from .tensor import as_array


class Estimator(str, enum.Enum):
    STE = "ste"
    PWL = "pwl"
    MAD = "mad"


@dataclass(frozen=True)
class MphPolicy:
    """Estimator per tensor role; the defaults are the MAD-PWL hybrid."""

    weight: Estimator = Estimator.MAD
    activation: Estimator = Estimator.PWL


def _magnitude(x, signed: bool):
    return np.abs(x) if signed else x


def attenuation(x, s, signed: bool = True):
    """Factor alpha with clip(x, -s, s) == alpha * x.

    alpha is 1 inside the range and s/|x| outside (s/x for unsigned data).
    In float64 the product ``alpha * x`` can land one ulp away from ``s``;
    :func:`exact_attenuation` gives the identity in rational arithmetic.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("clipping scalar must be positive")
    m = _magnitude(x, signed)
    out = m > s
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(out, s / np.where(out, m, 1.0), 1.0)
    return alpha if alpha.ndim else float(alpha)


def exact_attenuation(x: float, s: float, signed: bool = True) -> Fraction:
    """:func:`attenuation` evaluated exactly on the binary values of x and s."""
    if s <= 0:
        raise ValueError("clipping scalar must be positive")
    fx, fs = Fraction(x), Fraction(s)
    m = abs(fx) if signed else fx
    return Fraction(1) if m <= fs else fs / m


def backward(x, s, kind: Estimator, signed: bool = True):
    """Estimated dQ(x)/dx under ``kind``; |x| == s counts as in range."""
    kind = Estimator(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is Estimator.STE:
        g = np.ones_like(x)
    elif kind is Estimator.PWL:
        g = (_magnitude(x, signed) <= s).astype(np.float64)
    else:
        g = np.asarray(attenuation(x, s, signed), dtype=np.float64)
    return g if g.ndim else float(g)


def fake_quant(t, scalars, spec: QuantSpec, kind: Estimator):
    """Quantized forward values plus the element-wise backward mask.

    The mask is meant to be multiplied into the incoming gradient. Degenerate
    (all-zero) groups get a mask of ones.
    """
    x = as_array(t)
    ss = _as_scalar_set(scalars, x)
    forward = quantize_clipped(x, ss, spec)
    s = ss.broadcast()
    safe = np.where(s > 0, s, 1.0)
    mask = np.where(s > 0, backward(x, safe, kind, spec.signed), 1.0)
    return forward, mask
