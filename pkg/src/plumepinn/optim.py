"""Full-batch Adam and L-BFGS on flat parameter vectors.

Objectives are callables ``fun(theta) -> (f, grad)``. A non-finite loss or
gradient, or a :class:`~plumepinn.diffgraph.DivergenceError` raised by the
objective, is reported as divergence; the optimizer then leaves the
parameters at the last finite point.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffgraph import DivergenceError

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class Diverged(Exception):
    """Optimizer hit a non-finite loss or gradient."""


def _checked(fun: Objective, x: np.ndarray):
    try:
        f, g = fun(x)
    except DivergenceError as exc:
        raise Diverged(str(exc)) from exc
    f = float(f)
    if not np.isfinite(f) or not np.isfinite(g).all():
        raise Diverged("non-finite loss or gradient")
    return f, g


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState,
              hyper: AdamHyper = AdamHyper()) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new parameters and state."""
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {theta.shape}")
    if not np.isfinite(grad).all():
        raise Diverged("non-finite gradient")
    t = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    new = theta - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(m, v, t)


@dataclass
class LBFGSHyper:
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_ls: int = 25
    first_step: float = 1.0
    tol_grad: float = 1e-12
    tol_change: float = 1e-14


@dataclass
class LineSearchLog:
    f0: float
    gtd0: float
    alpha: float
    f: float
    gtd: float
    evals: int
    wolfe: bool


@dataclass
class LBFGSState:
    s_hist: deque = field(default_factory=deque)
    y_hist: deque = field(default_factory=deque)
    iteration: int = 0
    logs: list[LineSearchLog] = field(default_factory=list)


def two_loop(grad: np.ndarray, s_hist, y_hist) -> np.ndarray:
    """L-BFGS two-loop recursion; returns the search direction ``-H grad``."""
    q = grad.copy()
    alphas = []
    rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimiser of the cubic interpolant on ``[lo, hi]``; bisection fallback."""
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    disc = d1 * d1 - g1 * g2
    if disc >= 0:
        d2 = np.sqrt(disc) * np.sign(x2 - x1)
        denom = g2 - g1 + 2.0 * d2
        if denom != 0:
            x = x2 - (x2 - x1) * (g2 + d2 - d1) / denom
            if np.isfinite(x):
                return float(min(max(x, lo), hi))
    return 0.5 * (lo + hi)


def strong_wolfe(fun: Objective, x: np.ndarray, f0: float, g0: np.ndarray, d: np.ndarray,
                 alpha: float, hyper: LBFGSHyper):
    """Strong-Wolfe line search (bracketing plus cubic zoom).

    Returns ``(alpha, f, g, evals, wolfe_ok)``. When the evaluation budget
    runs out, the best point satisfying sufficient decrease is returned with
    ``wolfe_ok=False``; if none exists, ``alpha`` is 0.
    """
    gtd0 = float(g0 @ d)
    c1, c2 = hyper.c1, hyper.c2
    best = (0.0, f0, g0)
    evals = 0

    def evaluate(a):
        nonlocal evals, best
        evals += 1
        f, g = _checked(fun, x + a * d)
        if f <= f0 + c1 * a * gtd0 and f < best[1]:
            best = (a, f, g)
        return f, g, float(g @ d)

    a_prev, f_prev, gtd_prev = 0.0, f0, gtd0
    a_cur = alpha
    bracket = None
    while evals < hyper.max_ls:
        f, g, gtd = evaluate(a_cur)
        if f > f0 + c1 * a_cur * gtd0 or (evals > 1 and f >= f_prev):
            bracket = (a_prev, f_prev, gtd_prev, a_cur, f, gtd)
            break
        if abs(gtd) <= -c2 * gtd0:
            return a_cur, f, g, evals, True
        if gtd >= 0:
            bracket = (a_cur, f, gtd, a_prev, f_prev, gtd_prev)
            break
        a_next = _cubic_min(a_prev, f_prev, gtd_prev, a_cur, f, gtd, a_cur * 1.1, a_cur * 10.0)
        a_prev, f_prev, gtd_prev = a_cur, f, gtd
        a_cur = a_next

    if bracket is not None:
        a_lo, f_lo, gtd_lo, a_hi, f_hi, gtd_hi = bracket
        while evals < hyper.max_ls:
            lo, hi = sorted((a_lo, a_hi))
            width = hi - lo
            if width <= 1e-16 * max(1.0, hi):
                break
            a_j = _cubic_min(a_lo, f_lo, gtd_lo, a_hi, f_hi, gtd_hi, lo + 0.1 * width, hi - 0.1 * width)
            f, g, gtd = evaluate(a_j)
            if f > f0 + c1 * a_j * gtd0 or f >= f_lo:
                a_hi, f_hi, gtd_hi = a_j, f, gtd
            else:
                if abs(gtd) <= -c2 * gtd0:
                    return a_j, f, g, evals, True
                if gtd * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, gtd_hi = a_lo, f_lo, gtd_lo
                a_lo, f_lo, gtd_lo = a_j, f, gtd
    a, f, g = best
    return a, f, g, evals, False


def lbfgs_step(theta: np.ndarray, f: float, grad: np.ndarray, fun: Objective, state: LBFGSState,
               hyper: LBFGSHyper = LBFGSHyper()):
    """One outer L-BFGS iteration.

    Returns ``(theta, f, grad, status)`` where status is ``"ok"``,
    ``"converged"`` (gradient or progress below tolerance) or
    ``"ls_failed"`` (no sufficient decrease found; parameters unchanged).
    Raises :class:`Diverged` with the parameters untouched when the line
    search meets a non-finite loss.
    """
    if np.abs(grad).max(initial=0.0) <= hyper.tol_grad:
        return theta, f, grad, "converged"
    d = two_loop(grad, state.s_hist, state.y_hist)
    gtd = float(grad @ d)
    if not gtd < 0:
        state.s_hist.clear()
        state.y_hist.clear()
        d = -grad
        gtd = float(grad @ d)
    if state.iteration == 0 and not state.s_hist:
        alpha = min(1.0, 1.0 / np.abs(grad).sum()) * hyper.first_step
    else:
        alpha = hyper.first_step
    state.iteration += 1
    a, f_new, g_new, evals, ok = strong_wolfe(fun, theta, f, grad, d, alpha, hyper)
    state.logs.append(LineSearchLog(f, gtd, a, f_new, float(g_new @ d), evals, ok))
    if a == 0.0:
        state.s_hist.clear()
        state.y_hist.clear()
        return theta, f, grad, "ls_failed"
    s = a * d
    y = g_new - grad
    if float(y @ s) > 1e-10 * float(s @ s):
        if len(state.s_hist) == hyper.history:
            state.s_hist.popleft()
            state.y_hist.popleft()
        state.s_hist.append(s)
        state.y_hist.append(y)
    new = theta + s
    status = "ok"
    if abs(f - f_new) <= hyper.tol_change * max(1.0, abs(f)) or np.abs(s).max() <= hyper.tol_change:
        status = "converged"
    return new, f_new, g_new, status
