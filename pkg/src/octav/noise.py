"""Quantization-noise analysis: empirical and histogram-based MSE, sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .quantizer import QuantSpec, ScalarSet, _as_scalar_set, check_unsigned, quantize_rows
from .tensor import GroupView, as_array, group_view, reduce_sum

DEFAULT_BINS = 4096


class DegenerateTensorError(ValueError):
    """A tensor or scaling group has no nonzero element."""


def empirical_mse(t, scalars, spec: QuantSpec) -> np.ndarray:
    """Mean squared quantization error per scaling group."""
    x = as_array(t)
    ss = _as_scalar_set(scalars, x)
    rows = ss.view.split(x)
    if not spec.signed:
        check_unsigned(rows)
    err = quantize_rows(rows, ss.scalars, spec)
    err -= rows
    err *= err
    return reduce_sum(err, axis=1, overwrite=True) / rows.shape[1]


@dataclass(frozen=True)
class Histogram:
    """Equal-width histogram of nonzero magnitudes on [0, max].

    Within a bin the density is taken as uniform, which is what the
    analytical MSE and its derivatives integrate against.
    """

    edges: np.ndarray
    counts: np.ndarray
    total: int
    signed: bool = True

    def _parts(self, s: float):
        """(P(|X|<=s), P(|X|>s), E[|X|; |X|>s], E[(|X|-s)^2; |X|>s])."""
        lo, hi = self.edges[:-1], self.edges[1:]
        mass = self.counts / self.total
        width = hi - lo
        below = np.clip((s - lo) / width, 0.0, 1.0)
        p_in = float(np.sum(mass * below))
        upper = mass * (1.0 - below)
        a = np.maximum(lo, s)
        p_out = float(np.sum(upper))
        first = float(np.sum(upper * 0.5 * (a + hi)))
        # mean of (x - s)^2 for x uniform on [a, hi]
        da, dh = a - s, hi - s
        second = float(np.sum(upper * (da * da + da * dh + dh * dh) / 3.0))
        return p_in, p_out, first, second


@dataclass(frozen=True)
class PointMassHistogram(Histogram):
    """Exact empirical distribution: ``edges`` holds the distinct nonzero
    magnitudes (atoms) and ``counts`` their multiplicities."""

    def _parts(self, s: float):
        atoms = self.edges
        mass = self.counts / self.total
        out = atoms > s
        p_out = float(np.sum(mass[out]))
        p_in = float(np.sum(mass[~out]))
        first = float(np.sum(mass[out] * atoms[out]))
        d = atoms[out] - s
        second = float(np.sum(mass[out] * d * d))
        return p_in, p_out, first, second


def _magnitudes(t, signed: bool) -> np.ndarray:
    x = as_array(t).ravel()
    if signed:
        return np.abs(x)
    check_unsigned(x)
    return x


def build_histogram(t, bins: int = DEFAULT_BINS, signed: bool = True) -> Histogram:
    """Histogram of nonzero magnitudes over [0, max magnitude]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    m = _magnitudes(t, signed)
    m = m[m > 0]
    if m.size == 0:
        raise DegenerateTensorError("degenerate tensor: all elements are zero")
    counts, edges = np.histogram(m, bins=bins, range=(0.0, float(m.max())))
    return Histogram(edges, counts, int(m.size), signed)


def point_mass_histogram(t, signed: bool = True) -> PointMassHistogram:
    """Exact empirical distribution of the nonzero magnitudes of ``t``."""
    m = _magnitudes(t, signed)
    m = m[m > 0]
    if m.size == 0:
        raise DegenerateTensorError("degenerate tensor: all elements are zero")
    atoms, counts = np.unique(m, return_counts=True)
    return PointMassHistogram(atoms, counts, int(m.size), signed)


def analytical_mse(h: Histogram, s: float, spec: QuantSpec) -> float:
    """Clipped-quantization MSE of the histogram's distribution at scalar ``s``.

    Additive noise ``c * s**2`` on the in-range mass plus the squared clipping
    error of the mass above ``s``.
    """
    if s <= 0:
        raise ValueError("clipping scalar must be positive")
    p_in, _, _, second = h._parts(s)
    return spec.noise_coeff * s * s * p_in + second


@dataclass(frozen=True)
class MseCurve:
    scalars: np.ndarray
    mse: np.ndarray
    source: str = "empirical"

    def __post_init__(self):
        s = np.asarray(self.scalars, dtype=np.float64)
        j = np.asarray(self.mse, dtype=np.float64)
        if s.shape != j.shape:
            raise ValueError("scalars and mse must have equal length")
        if np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("scalars must be positive and strictly increasing")
        if np.any(j < 0):
            raise ValueError("mse values must be nonnegative")
        object.__setattr__(self, "scalars", s)
        object.__setattr__(self, "mse", j)

    def __len__(self):
        return len(self.scalars)

    def argmin(self) -> int:
        return int(np.argmin(self.mse))

    @property
    def best_scalar(self) -> float:
        return float(self.scalars[self.argmin()])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scalar", "mse"])
            for s, j in zip(self.scalars, self.mse):
                w.writerow([repr(float(s)), repr(float(j))])

    @classmethod
    def from_csv(cls, path, source: str = "empirical") -> MseCurve:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["scalar"]) for r in rows], [float(r["mse"]) for r in rows], source)


def sweep(
    t,
    view: GroupView | None = None,
    spec: QuantSpec = QuantSpec(),
    points: int = 100,
    mode: str = "empirical",
    bins: int = DEFAULT_BINS,
) -> list[MseCurve]:
    """MSE at s = k/points * s_max (k = 1..points), one curve per group."""
    if points < 2:
        raise ValueError("points must be >= 2")
    if mode not in ("empirical", "analytical"):
        raise ValueError(f"unknown sweep mode {mode!r}")
    x = as_array(t)
    view = view or group_view(x.shape)
    rows = view.split(x)
    if spec.signed:
        smax = np.abs(rows).max(axis=1)
    else:
        check_unsigned(rows)
        smax = rows.max(axis=1)
    if np.any(smax == 0):
        raise DegenerateTensorError("degenerate tensor: all-zero scaling group")
    fractions = np.arange(1, points + 1) / points
    grid = fractions[None, :] * smax[:, None]

    if mode == "empirical":
        mse = np.empty_like(grid)
        n = rows.shape[1]
        for k in range(points):
            err = quantize_rows(rows, grid[:, k], spec)
            err -= rows
            err *= err
            mse[:, k] = reduce_sum(err, axis=1, overwrite=True) / n
    else:
        mse = np.empty_like(grid)
        for g in range(rows.shape[0]):
            h = build_histogram(rows[g], bins, spec.signed)
            mse[g] = [analytical_mse(h, s, spec) for s in grid[g]]
    return [MseCurve(grid[g], mse[g], mode) for g in range(rows.shape[0])]


def local_minima(curve: MseCurve) -> list[int]:
    """Indices i with mse[i] < mse[i-1] and mse[i] <= mse[i+1].

    The first point only needs mse[0] <= mse[1]; the last only
    mse[-1] < mse[-2].
    """
    j = curve.mse
    if len(j) < 3:
        raise ValueError("local_minima needs at least 3 points")
    left = np.concatenate([[True], j[1:] < j[:-1]])
    right = np.concatenate([j[:-1] <= j[1:], [True]])
    return [int(i) for i in np.flatnonzero(left & right)]


def percentile_magnitude(t, view: GroupView | None = None, p: float = 99.9) -> ScalarSet:
    """p-th percentile of |x| per group (linear interpolation)."""
    if not 0 < p <= 100:
        raise ValueError("percentile must be in (0, 100]")
    x = as_array(t)
    view = view or group_view(x.shape)
    mags = np.abs(view.split(x))
    s = np.percentile(mags, p, axis=1, method="linear")
    if p == 100:
        s = mags.max(axis=1)
    return ScalarSet(s, view, degenerate=s == 0)
