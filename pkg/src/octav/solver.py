"""OCTAV: Newton-Raphson recursion for MSE-optimal clipping scalars."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .noise import DegenerateTensorError, Histogram
from .quantizer import QuantSpec, ScalarSet, check_unsigned
from .tensor import GroupView, as_array, group_view, reduce_sum

INIT_MODES = ("mean_abs", "max", "std", "value")


@dataclass(frozen=True)
class OctavConfig:
    """Solver settings.

    ``init`` picks the starting scalar: ``"mean_abs"`` (mean nonzero
    magnitude), ``"max"``, ``"std"`` (``init_param`` times the group standard
    deviation) or ``"value"`` (``init_param`` itself). ``tol`` only feeds the
    convergence flag; exactly ``iterations`` steps are always taken.
    """

    iterations: int = 10
    init: str = "mean_abs"
    init_param: float | None = None
    tol: float = 1e-3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init {self.init!r}")
        if self.init in ("std", "value") and not (
            self.init_param is not None and self.init_param > 0
        ):
            raise ValueError(f"init={self.init!r} needs a positive init_param")


@dataclass
class OctavTrace:
    """Per-group iterate history, shape (groups, iterations + 1)."""

    iterates: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    clamped: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                str(g): {
                    "iterates": [float(v) for v in self.iterates[g]],
                    "converged": bool(self.converged[g]),
                    "degenerate": bool(self.degenerate[g]),
                }
                for g in range(len(self.iterates))
            },
            indent=2,
        )


def _magnitude_rows(rows: np.ndarray, spec: QuantSpec) -> np.ndarray:
    if spec.signed:
        return np.abs(rows)
    check_unsigned(rows)
    return rows


def _step(mags: np.ndarray, s: np.ndarray, nnz: np.ndarray, coeff: float) -> np.ndarray:
    """One recursion step for every row of ``mags`` at once."""
    clipped = mags > s[:, None]
    num = reduce_sum(mags * clipped, axis=1, overwrite=True)
    n_clip = np.count_nonzero(clipped, axis=1)
    den = coeff * (nnz - n_clip) + n_clip
    return num / den


def octav_step(group, s_n: float, spec: QuantSpec) -> float:
    """Next iterate from ``s_n`` for one group's elements.

    Returns the raw value of the recursion, i.e. 0.0 when nothing exceeds
    ``s_n``. Zero elements are excluded from the discretization count.
    """
    if s_n < 0:
        raise ValueError("s_n must be nonnegative")
    mags = _magnitude_rows(as_array(group).reshape(1, -1), spec)
    nnz = np.count_nonzero(mags, axis=1)
    if nnz[0] == 0:
        raise DegenerateTensorError("degenerate group: all elements are zero")
    return float(_step(mags, np.array([float(s_n)]), nnz, spec.noise_coeff)[0])


def _initial(mags: np.ndarray, rows: np.ndarray, nnz: np.ndarray, cfg: OctavConfig):
    if cfg.init == "mean_abs":
        return reduce_sum(mags, axis=1) / np.maximum(nnz, 1)
    if cfg.init == "max":
        return mags.max(axis=1)
    if cfg.init == "std":
        return cfg.init_param * rows.std(axis=1)
    return np.full(len(rows), float(cfg.init_param))


def octav(
    t,
    view: GroupView | None = None,
    spec: QuantSpec = QuantSpec(),
    cfg: OctavConfig = OctavConfig(),
) -> tuple[ScalarSet, OctavTrace]:
    """Run the recursion on every scaling group of ``t`` in one pass per step.

    A step whose clipping set is empty returns 0; that iterate is replaced by
    half the smallest nonzero magnitude, so every nonzero element is clipped
    on the next step (which then yields the mean nonzero magnitude). The
    returned scalar is the last iterate not produced by such a replacement.
    All-zero groups are flagged degenerate and get scalar 0.
    """
    x = as_array(t)
    view = view or group_view(x.shape)
    rows = view.split(x)
    mags = _magnitude_rows(rows, spec)
    nnz = np.count_nonzero(mags, axis=1)
    degenerate = nnz == 0
    live = ~degenerate

    smax = mags.max(axis=1)
    floor = 0.5 * np.where(mags > 0, mags, np.inf).min(axis=1)
    floor[degenerate] = 0.0

    n_groups = rows.shape[0]
    iterates = np.zeros((n_groups, cfg.iterations + 1))
    clamped = np.zeros((n_groups, cfg.iterations + 1), dtype=bool)
    s = np.where(live, _initial(mags, rows, nnz, cfg), 0.0)
    iterates[:, 0] = s

    lm, lnnz = mags[live], nnz[live]
    eps = 1e-12 * smax[live]
    for n in range(1, cfg.iterations + 1):
        nxt = _step(lm, s[live], lnnz, spec.noise_coeff)
        low = nxt < eps
        nxt = np.where(low, floor[live], nxt)
        s = np.zeros(n_groups)
        s[live] = nxt
        iterates[:, n] = s
        clamped[live, n] = low

    # last iterate that did not come from an empty clipping set
    last_ok = cfg.iterations - np.argmax(~clamped[:, ::-1], axis=1)
    result = iterates[np.arange(n_groups), last_ok]
    result[degenerate] = 0.0

    prev, final = iterates[:, -2], iterates[:, -1]
    converged = live & (np.abs(final - prev) <= cfg.tol * prev)
    trace = OctavTrace(iterates, converged, degenerate, clamped)
    return ScalarSet(result, view, degenerate=degenerate), trace


def mse_derivatives(h: Histogram, s: float, spec: QuantSpec) -> tuple[float, float]:
    """First and second derivative of the clipped MSE at ``s``.

    The indicator functions are held constant, so
    ``J'' = 2c P(|X|<=s) + 2 P(|X|>s)`` is always positive.
    """
    if s <= 0:
        raise ValueError("clipping scalar must be positive")
    c = spec.noise_coeff
    p_in, p_out, first, _ = h._parts(s)
    d1 = 2.0 * c * s * p_in + 2.0 * (s * p_out - first)
    d2 = 2.0 * c * p_in + 2.0 * p_out
    return d1, d2
