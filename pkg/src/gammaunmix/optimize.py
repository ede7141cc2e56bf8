"""Poisson likelihood and the solvers built on it.

``nnpu_fit`` estimates non-negative counts for fixed signatures with the
ML-EM multiplicative update; ``bcd_fit`` alternates it with a 1-D
Nelder-Mead search over the variability parameter of a manifold or shift
model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .signatures import SignatureError

logger = logging.getLogger(__name__)

#: Guard added to ``(Xa)_m`` in the EM ratio so dead channels never divide 0 by 0.
EPS = 1e-12


def poisson_nll(y, X, a) -> float:
    """``sum_m (Xa)_m - y_m log (Xa)_m`` with ``0 log 0 = 0``.

    Returns ``inf`` when a channel with counts has zero expected intensity.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("counts vector a must be non-negative")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    q = X @ a if X.ndim == 2 else X * a
    if q.shape != y.shape:
        raise ValueError(f"dimension mismatch: Xa has shape {q.shape}, y has {y.shape}")
    pos = y > 0
    qp = q[pos]
    if np.any(qp <= 0):
        return math.inf
    return float(q.sum() - np.dot(y[pos], np.log(qp)))


def nll_gradient(y, X, a) -> np.ndarray:
    """Gradient of :func:`poisson_nll` with respect to ``a``."""
    q = X @ a
    return X.sum(axis=0) - X.T @ (y / q)


@dataclass
class FitProblem:
    """Observed spectrum, a signature source and the columns allowed to be non-zero.

    ``source`` is a :class:`~gammaunmix.signatures.SignatureLibrary` or any
    object with ``matrix(param, columns)`` and ``param_bounds`` (manifold,
    shift model).
    """

    y: np.ndarray
    source: object
    active: Sequence[int] | None = None
    tol: float = 1e-8
    max_iter: int = 10_000
    outer_tol: float = 1e-6
    max_outer: int = 50

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1:
            raise ValueError("y must be a 1-D count vector")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("y must hold non-negative integer counts")
        self.y = y
        n = self.source.n_components
        active = tuple(range(n)) if self.active is None else tuple(int(j) for j in self.active)
        if not active:
            raise ValueError("active set must not be empty")
        if 0 not in active:
            raise ValueError("the background column (index 0) must be in the active set")
        if len(set(active)) != len(active) or min(active) < 0 or max(active) >= n:
            raise ValueError(f"invalid active set {active} for {n} components")
        self.active = active

    @property
    def n_components(self) -> int:
        return self.source.n_components

    def matrix(self, param=None) -> np.ndarray:
        return self.source.matrix(param, list(self.active))


@dataclass
class FitResult:
    """Point estimate; ``a_hat`` spans every column of the source (zero off the active set)."""

    a_hat: np.ndarray
    active: tuple[int, ...]
    nll: float
    iterations: int
    converged: bool
    param_hat: float | None = None
    history: np.ndarray = field(default=None, repr=False)

    @property
    def a_active(self) -> np.ndarray:
        return self.a_hat[list(self.active)]


def _em(y, X, a, tol, max_iter):
    colsum = X.sum(axis=0)
    pos = y > 0
    yp = y[pos]
    # channels without counts drop out of the update, and sum(Xa) = colsum . a
    Xp = np.ascontiguousarray(X[pos])
    XpT = np.ascontiguousarray(Xp.T)
    # NLL of the saturated model (Xa = y); the decrease is judged relative to
    # the distance from it, which is free of the data-only constant in L
    saturated = float(np.sum(yp - yp * np.log(yp)))

    def nll(a, qp):
        if np.any(qp <= 0):
            return math.inf
        return float(colsum @ a - yp @ np.log(qp))

    qp = Xp @ a
    cur = nll(a, qp)
    history = [cur]
    converged = False
    it = 0
    while it < max_iter:
        a = a * (XpT @ (yp / (qp + EPS))) / colsum
        qp = Xp @ a
        it += 1
        new = nll(a, qp)
        history.append(new)
        done = cur - new < tol * max(new - saturated, 1.0)
        cur = new
        if done:
            converged = True
            break
    return a, cur, it, converged, np.array(history)


def _start(y, k, a0):
    total = max(float(y.sum()), 1.0)
    if a0 is None:
        return np.full(k, total / k)
    a0 = np.array(a0, dtype=float)
    if a0.shape != (k,):
        raise ValueError(f"initial counts have shape {a0.shape}, expected ({k},)")
    # zero is absorbing under multiplicative updates
    return np.maximum(a0, 1e-6 * total / k)


def nnpu_fit(problem: FitProblem, a0=None, param=None) -> FitResult:
    """Non-negative Poisson unmixing at fixed signatures.

    Parameters
    ----------
    problem : FitProblem
    a0 : array_like, optional
        Warm start over ``problem.active``; defaults to ``sum(y) / |active|``
        for every column.
    param : float, optional
        Variability parameter at which to freeze a manifold or shift source.

    Returns
    -------
    FitResult
        ``history`` holds the NLL after every multiplicative update.
    """
    X = problem.matrix(param)
    y = problem.y
    a, nll, it, conv, hist = _em(y, X, _start(y, X.shape[1], a0), problem.tol, problem.max_iter)
    if not conv:
        logger.debug("nnpu_fit hit max_iter=%d (nll=%g)", problem.max_iter, nll)
    full = np.zeros(problem.n_components)
    full[list(problem.active)] = a
    return FitResult(full, problem.active, float(nll), it, conv, param, hist)


def nelder_mead(objective: Callable[[float], float], x0: float, bounds: tuple[float, float],
                step: float | None = None, xtol: float = 1e-5, max_iter: int = 200,
                ) -> tuple[float, float]:
    """Bounded 1-D Nelder-Mead (reflection 1, expansion 2, contraction 0.5, shrink 0.5).

    Trial points are projected onto ``bounds``.  Stops when the simplex is
    narrower than ``xtol * (hi - lo)`` or after ``max_iter`` iterations and
    returns the best point evaluated.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    width = hi - lo
    if width <= 0:
        return lo, float(objective(lo))
    step = 0.05 * width if step is None else abs(step)

    def f(x):
        return float(objective(x))

    x0 = min(max(float(x0), lo), hi)
    x1 = x0 + step if x0 + step <= hi else x0 - step
    x1 = min(max(x1, lo), hi)
    pts = [(f(x0), x0), (f(x1), x1)]
    for _ in range(max_iter):
        pts.sort(key=lambda p: p[0])
        (fb, xb), (fw, xw) = pts
        if abs(xw - xb) < xtol * width:
            break
        xr = min(max(xb + (xb - xw), lo), hi)
        fr = f(xr)
        if fr < fb:
            xe = min(max(xb + 2.0 * (xr - xb), lo), hi)
            fe = f(xe)
            pts[1] = (fe, xe) if fe < fr else (fr, xr)
            continue
        if fr < fw:
            xc = xb + 0.5 * (xr - xb)
            fc = f(xc)
            if fc <= fr:
                pts[1] = (fc, xc)
                continue
        else:
            xc = xb + 0.5 * (xw - xb)
            fc = f(xc)
            if fc < fw:
                pts[1] = (fc, xc)
                continue
        xs = xb + 0.5 * (xw - xb)
        pts[1] = (f(xs), xs)
    fb, xb = min(pts, key=lambda p: p[0])
    return xb, fb


def _nll_at(problem: FitProblem, param: float, a) -> float:
    try:
        X = problem.matrix(param)
    except SignatureError:
        # a column pushed entirely off the grid
        return math.inf
    return poisson_nll(problem.y, X, a)


def bcd_fit(problem: FitProblem, a0=None, param0: float | None = None, n_scan: int = 9) -> FitResult:
    """Joint estimate of counts and the variability parameter by block-coordinate descent.

    Without ``param0`` the start is the best of ``n_scan`` evenly spaced
    parameter values, each fitted with :func:`nnpu_fit`.  Each outer
    iteration then runs an EM a-step (warm-started) and a Nelder-Mead
    parameter step at fixed counts; ``history`` holds the outer NLL values.
    """
    bounds = problem.source.param_bounds
    if bounds is None:
        return nnpu_fit(problem, a0)
    lo, hi = bounds
    y = problem.y
    if param0 is None:
        best = None
        for p in np.linspace(lo, hi, n_scan):
            r = nnpu_fit(problem, a0, float(p))
            if best is None or r.nll < best.nll:
                best = r
        param, a, iters = float(best.param_hat), best.a_active, best.iterations
    else:
        param = min(max(float(param0), lo), hi)
        a, iters = _start(y, len(problem.active), a0), 0

    cur = math.inf
    history = []
    converged = False
    for _ in range(problem.max_outer):
        X = problem.matrix(param)
        a, nll_a, it, _, _ = _em(y, X, _start(y, len(a), a), problem.tol, problem.max_iter)
        iters += it
        a_fixed = a
        param, nll_p = nelder_mead(lambda p: _nll_at(problem, p, a_fixed), param, (lo, hi))
        new = min(nll_p, nll_a)
        history.append(new)
        done = cur - new < problem.outer_tol
        cur = new
        if done:
            converged = True
            break
    if not converged:
        logger.debug("bcd_fit hit max_outer=%d (nll=%g)", problem.max_outer, cur)
    full = np.zeros(problem.n_components)
    full[list(problem.active)] = a
    return FitResult(full, problem.active, float(cur), iters, converged, float(param), np.array(history))


def fit(problem: FitProblem, a0=None, param0: float | None = None) -> FitResult:
    """Dispatch to :func:`nnpu_fit` for fixed libraries and :func:`bcd_fit` otherwise."""
    if problem.source.param_bounds is None:
        return nnpu_fit(problem, a0)
    return bcd_fit(problem, a0, param0)
