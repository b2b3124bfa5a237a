"""Analytic backward passes for every adapter method, plus a central-difference
oracle and a gradient-check harness that compares the two.

For the magnitude/direction methods the backward pass differentiates through
the column norms (no frozen-norm shortcut): with v_j the j-th column of
base + scaling * b @ a and n_j = ||v_j|| + eps,

    dm_j = <g_j, v_j> / n_j
    h_j  = (m_j / n_j) * (g_j - v_j <v_j, g_j> / ||v_j||^2)

where g = dL/dW' and h = dL/dv. The projector uses the exact ||v_j||^2, so
each h_j is orthogonal to v_j up to rounding; the epsilon guard shifts only
the outer 1/n_j scale, keeping h within O(eps) of the guarded forward's true
derivative while preserving the exact-projection property.

The factor gradients are db = scaling * h @ a.T and da = scaling * b.T @ h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterState, copy_state, effective_weight, forward, trainable_params
from .linalg import NumericError

__all__ = [
    "GradientSet",
    "GradCheckReport",
    "backward",
    "direction_gradient",
    "param_grads",
    "finite_diff_grads",
    "grad_check",
    "compare_gradient_sets",
]

FD_BASE_STEP = 1e-5


@dataclass
class GradientSet:
    """Gradients for one adapted layer; fields are None exactly when the
    method lacks the parameter (db/da/dm absent for full, dm absent unless
    the method carries a magnitude vector, dbase present only for full)."""

    db: np.ndarray | None
    da: np.ndarray | None
    dm: np.ndarray | None
    dx: np.ndarray
    dbase: np.ndarray | None = None


def direction_gradient(state: AdapterState, g: np.ndarray) -> np.ndarray:
    """h = dL/dv for a magnitude/direction state, given g = dL/dW'.

    Column-wise: h_j = (m_j / n_j) * (g_j - v_j <v_j, g_j> / ||v_j||^2),
    the scaled projection of g_j onto the orthogonal complement of v_j.
    """
    v = state.base + state.config.scaling * (state.b @ state.a)
    norms = np.linalg.norm(v, axis=0)
    n = norms + state.config.norm_epsilon
    proj = (v * g).sum(axis=0)
    # A zero column contributes nothing to the projector (v_j is zero);
    # guard the denominator so it does not poison the whole column with NaN.
    denom = np.where(norms > 0.0, norms * norms, 1.0)
    return (state.m / n) * (g - v * (proj / denom))


def param_grads(state: AdapterState, g: np.ndarray):
    """Map g = dL/dW' (possibly accumulated over a batch) to parameter grads.

    Returns (db, da, dm, dbase); the map is linear in g, so summing g over
    samples before calling is equivalent to summing per-sample results.
    """
    if state.method == "full":
        return None, None, None, g.copy()
    s = state.config.scaling
    if state.m is None:
        return s * (g @ state.a.T), s * (state.b.T @ g), None, None
    v = state.base + s * (state.b @ state.a)
    n = np.linalg.norm(v, axis=0) + state.config.norm_epsilon
    dm = (v * g).sum(axis=0) / n
    h = direction_gradient(state, g)
    return s * (h @ state.a.T), s * (state.b.T @ h), dm, None


def backward(state: AdapterState, x, gy) -> GradientSet:
    """Exact gradients of L with respect to the trainables and the input,
    given gy = dL/dy for y = effective_weight(state) @ x."""
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    d, k = state.base.shape
    if x.shape != (k,):
        raise ValueError(f"input length mismatch: expected {k}, got {x.shape}")
    if gy.shape != (d,):
        raise ValueError(f"output-grad length mismatch: expected {d}, got {gy.shape}")
    g = np.outer(gy, x)
    db, da, dm, dbase = param_grads(state, g)
    dx = effective_weight(state).T @ gy
    return GradientSet(db, da, dm, dx, dbase)


def finite_diff_grads(state: AdapterState, x, gy, epsilon_rule=None) -> GradientSet:
    """Central-difference gradients of L = <gy, forward(state, x)>.

    Each trainable scalar theta is displaced by +-h with
    h = epsilon_rule(theta), default 1e-5 * (1 + |theta|). All perturbations
    happen on a private copy, so the caller's state stays bit-identical.
    """
    if epsilon_rule is None:
        epsilon_rule = lambda t: FD_BASE_STEP * (1.0 + abs(t))
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    work = copy_state(state)

    def loss() -> float:
        return float(gy @ forward(work, x))

    grads: dict[str, np.ndarray] = {}
    for name, arr in trainable_params(work):
        flat = arr.reshape(-1)
        gflat = np.zeros(flat.size)
        for idx in range(flat.size):
            theta = flat[idx]
            h = epsilon_rule(theta)
            flat[idx] = theta + h
            lp = loss()
            flat[idx] = theta - h
            lm = loss()
            flat[idx] = theta
            gflat[idx] = (lp - lm) / (2.0 * h)
        grads[name] = gflat.reshape(arr.shape)

    xs = x.copy()
    dx = np.zeros(xs.size)
    for idx in range(xs.size):
        xi = xs[idx]
        h = epsilon_rule(xi)
        xs[idx] = xi + h
        lp = float(gy @ forward(work, xs))
        xs[idx] = xi - h
        lm = float(gy @ forward(work, xs))
        xs[idx] = xi
        dx[idx] = (lp - lm) / (2.0 * h)

    return GradientSet(
        db=grads.get("b"),
        da=grads.get("a"),
        dm=grads.get("m"),
        dx=dx,
        dbase=grads.get("base"),
    )


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    passed: bool
    epsilon: float
    tolerance: float


def _max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    return float((np.abs(analytic - fd) / scale).max())


def compare_gradient_sets(analytic: GradientSet, fd: GradientSet, tolerance: float):
    """Per-parameter max relative error |a-f|/max(1,|a|,|f|) and overall verdict."""
    errors: dict[str, float] = {}
    for name in ("db", "da", "dm", "dx", "dbase"):
        a = getattr(analytic, name)
        f = getattr(fd, name)
        if a is None and f is None:
            continue
        if a is None or f is None:
            raise ValueError(f"gradient sets disagree on presence of {name}")
        errors[name] = _max_rel_err(a, f)
    passed = all(err <= tolerance for err in errors.values())
    return errors, passed


def grad_check(state: AdapterState, seed: int = 0, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare backward against the finite-difference oracle on a seeded
    random (x, gy) pair. Mismatch yields passed=False, not an exception."""
    if not tolerance > 0.0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    d, k = state.base.shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(k)
    gy = rng.standard_normal(d)
    y = forward(state, x)
    if not np.all(np.isfinite(y)):
        raise NumericError("forward produced non-finite values")
    analytic = backward(state, x, gy)
    fd = finite_diff_grads(state, x, gy)
    errors, passed = compare_gradient_sets(analytic, fd, tolerance)
    return GradCheckReport(errors=errors, passed=passed, epsilon=FD_BASE_STEP, tolerance=tolerance)
