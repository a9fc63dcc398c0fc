"""L-BFGS with Armijo backtracking, and Adam.

Both operate on flat float64 vectors. The L-BFGS step is invariant to a
positive rescaling of the objective: the first (and post-reset) step moves a
fixed distance along the normalised negative gradient, later steps use the
two-loop recursion with ``s.y / y.y`` initial scaling, and every acceptance
test compares quantities that scale together.
"""
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "LBFGSState",
    "AdamState",
    "OptimizerSpec",
    "parse_optimizer",
    "lbfgs_step",
    "adam_step",
    "two_loop_direction",
]

ARMIJO_C1 = 1e-4
CURVATURE_TOL = 1e-10
ROUNDING_FLOOR = 64 * np.finfo(np.float64).eps


@dataclass
class LBFGSState:
    m: int = 10
    step_init: float = 1.0
    max_evals: int = 20
    history: deque = field(default_factory=deque)
    evaluations: int = 0
    status: str = "init"
    last_step: float = None

    def reset(self):
        self.history.clear()


@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "lbfgs"
    lr: float = 0.1
    history: int = 10
    max_evals: int = 20

    def __str__(self):
        return "lbfgs" if self.kind == "lbfgs" else f"adam:lr={self.lr:g}"

    def new_state(self):
        if self.kind == "lbfgs":
            return LBFGSState(m=self.history, max_evals=self.max_evals)
        return AdamState(lr=self.lr)


def parse_optimizer(text):
    """``lbfgs``, ``lbfgs:m=10,max_evals=20`` or ``adam:lr=0.1``."""
    if isinstance(text, OptimizerSpec):
        return text
    kind, _, rest = str(text).strip().partition(":")
    opts = {}
    for part in filter(None, rest.split(",")):
        key, eq, val = part.partition("=")
        if not eq:
            raise ValueError(f"bad optimizer option {part!r}")
        opts[key.strip()] = val.strip()
    if kind == "lbfgs":
        spec = OptimizerSpec("lbfgs", history=int(opts.pop("m", 10)), max_evals=int(opts.pop("max_evals", 20)))
    elif kind == "adam":
        spec = OptimizerSpec("adam", lr=float(opts.pop("lr", 0.1)))
    else:
        raise ValueError(f"unknown optimizer {kind!r}; expected 'lbfgs' or 'adam:lr=<v>'")
    if opts:
        raise ValueError(f"unknown optimizer options {sorted(opts)}")
    return spec


def two_loop_direction(history, g):
    """Approximate ``-H g`` from stored (s, y) pairs, oldest first."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    s, y, _ = history[-1]
    r = (np.dot(s, y) / np.dot(y, y)) * q
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * np.dot(y, r)
        r += (a - b) * s
    return -r


def _acceptable(f, g, f_new, g_new, decrease):
    """Armijo test, falling back to an approximate test near the rounding floor.

    Once the predicted decrease is below the resolution of ``f`` the value
    comparison is noise; a point is then accepted if ``f`` rises by at most
    that resolution and the gradient norm shrinks. Both tests are invariant
    to rescaling.
    """
    if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
        return False
    if f_new <= f + ARMIJO_C1 * decrease:
        return True
    floor = ROUNDING_FLOOR * abs(f)
    if -decrease <= floor:
        return f_new <= f + floor and np.dot(g_new, g_new) < np.dot(g, g)
    return False


def lbfgs_step(state, objective, x):
    """One L-BFGS iteration; returns ``(state, x_new, value)``.

    ``objective(x) -> (value, gradient)`` must be deterministic for the
    duration of the call. If no Armijo point is found within ``max_evals``
    evaluations, or the objective is non-finite at ``x``, the step is rejected:
    ``x`` is returned unchanged and the history is cleared so the next call
    starts with steepest descent. ``state`` is updated in place.
    """
    x = np.asarray(x, dtype=np.float64)
    f, g = objective(x)
    state.evaluations += 1
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        log.warning("lbfgs: non-finite objective at current point; step rejected")
        state.reset()
        state.status = "nonfinite"
        return state, x, f
    if not np.any(g):
        state.status = "stationary"
        return state, x, f

    t = state.step_init
    d = two_loop_direction(state.history, g) if state.history else None
    if d is None or not np.dot(g, d) < 0:
        # steepest descent over the last accepted distance (x-space, so scale-free)
        state.reset()
        d = -g / np.sqrt(np.dot(g, g))
        if state.last_step:
            t = state.last_step
    slope = np.dot(g, d)

    for _ in range(state.max_evals):
        x_new = x + t * d
        f_new, g_new = objective(x_new)
        state.evaluations += 1
        if _acceptable(f, g, f_new, g_new, t * slope):
            s = x_new - x
            y = g_new - g
            sy = np.dot(s, y)
            if sy > CURVATURE_TOL * np.sqrt(np.dot(s, s)) * np.sqrt(np.dot(y, y)):
                state.history.append((s, y, 1.0 / sy))
                while len(state.history) > state.m:
                    state.history.popleft()
            state.last_step = float(np.sqrt(np.dot(s, s)))
            state.status = "accepted"
            return state, x_new, f_new
        t *= 0.5

    log.debug("lbfgs: line search exhausted %d evaluations; step rejected", state.max_evals)
    state.reset()
    state.status = "rejected"
    return state, x, f


def adam_step(state, gradient, x):
    """Bias-corrected Adam update; returns ``(state, x_new)``."""
    g = np.asarray(gradient, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError(f"gradient shape {g.shape} != variable shape {x.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("adam: non-finite gradient")
    if state.m is None:
        state.m = np.zeros_like(x)
        state.v = np.zeros_like(x)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return state, x - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
