"""The three optimizers under study and their line searches.

Each optimizer exposes a per-batch step: SGD consumes one gradient per
step, Fletcher-Reeves runs a short conjugate-gradient loop with a
backtracking search, and L-BFGS takes a quasi-Newton step guarded by a
strong-Wolfe search. State objects are single-owner and mutated in place
by their training session.

Sign convention for FR: the steepest-descent vector fed into the beta and
direction updates is the negative gradient, so the conjugate direction is
a descent direction and the update x <- x + alpha*s decreases the loss.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .objective import DivergenceError

ARMIJO_C1 = 1e-4
WOLFE_C2 = 0.9
# relative slope target for post-acceptance polish in the Wolfe search
WOLFE_REFINE_TOL = 1e-8

# Exact hyperparameter names used in config files and CSV output.
OPTIMIZER_HYPERPARAMETERS = {
    "sgd": ("learning_rate", "momentum"),
    "fr": ("learning_rate", "contraction", "max_line_searches", "steps_per_batch", "beta_variant"),
    "lbfgs": ("learning_rate", "memory", "max_line_searches"),
}

BETA_VARIANTS = ("norm", "squared")


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------


@dataclass
class SgdState:
    """Learning rate, momentum, and the momentum buffer once it exists.

    Dampening tau is fixed at 0 and kept only to make the recurrence
    b <- mu*b + (1-tau)*g explicit.
    """

    gamma: float
    mu: float = 0.0
    tau: float = 0.0
    momentum_buffer: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.gamma < 0.0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.tau != 0.0:
            raise ValueError("dampening is fixed at 0")


def sgd_step(state: SgdState, params: np.ndarray, gradient: np.ndarray, is_first_step: bool) -> np.ndarray:
    """One momentum-SGD update: b <- mu*b + (1-tau)*g (b <- g on the first
    step), then theta <- theta - gamma*b; plain theta - gamma*g when mu=0."""
    g = gradient
    if state.mu != 0.0:
        if is_first_step or state.momentum_buffer is None:
            b = gradient.astype(np.float64, copy=True)
        else:
            b = state.mu * state.momentum_buffer + (1.0 - state.tau) * gradient
        state.momentum_buffer = b
        g = b
    return params - state.gamma * g


# ---------------------------------------------------------------------------
# line searches
# ---------------------------------------------------------------------------


@dataclass
class LineSearchResult:
    """Chosen step length, oracle-call count, and whether the conditions
    were actually satisfied. ``value``/``gradient`` carry the evaluation at
    the accepted point when the search produced one."""

    alpha: float
    evaluations: int
    succeeded: bool
    value: float | None = None
    gradient: np.ndarray | None = None


def backtracking_line_search(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    direction: np.ndarray,
    alpha0: float,
    contraction: float,
    max_searches: int,
    *,
    slope: float,
    f0: float | None = None,
) -> LineSearchResult:
    """Largest alpha in {alpha0 * contraction^j} passing the Armijo test.

    ``slope`` is the directional derivative g.d at x; ``f0`` is f(x)
    (computed here if omitted, without counting against the budget).
    Candidates with non-finite values are rejected like any other failed
    trial. If no candidate passes within ``max_searches`` trials the last,
    smallest candidate is returned with ``succeeded=False``; the caller
    still applies it, matching the FR procedure. Alpha above 1 is allowed.
    """
    if alpha0 <= 0.0:
        raise ValueError("alpha0 must be > 0")
    if not 0.0 < contraction < 1.0:
        raise ValueError("contraction must lie in (0, 1)")
    if max_searches < 1:
        raise ValueError("max_searches must be >= 1")

    smallest = alpha0 * contraction ** (max_searches - 1)
    if slope >= 0.0 or not np.isfinite(slope):
        # no descent along this direction: sufficient decrease is impossible
        return LineSearchResult(alpha=smallest, evaluations=0, succeeded=False)
    if f0 is None:
        f0 = f(x)

    evaluations = 0
    alpha = alpha0
    for _ in range(max_searches):
        trial = f(x + alpha * direction)
        evaluations += 1
        if np.isfinite(trial) and trial <= f0 + ARMIJO_C1 * alpha * slope:
            return LineSearchResult(alpha=alpha, evaluations=evaluations, succeeded=True, value=trial)
        alpha *= contraction
    return LineSearchResult(alpha=smallest, evaluations=evaluations, succeeded=False)


def wolfe_line_search(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    direction: np.ndarray,
    alpha_cap: float,
    max_searches: int,
    *,
    f0: float | None = None,
    g0: np.ndarray | None = None,
) -> LineSearchResult:
    """Bracket-and-zoom search for a step satisfying the strong Wolfe
    conditions, restricted to alpha in (0, alpha_cap].

    ``objective`` returns (value, gradient). Once a conforming step is in
    hand, a few secant refinements chase the one-dimensional slope toward
    zero while the budget lasts; every candidate returned still satisfies
    the strong Wolfe conditions, but on smooth objectives (quadratics in
    particular) the refined step is essentially the exact minimizer along
    the direction, which is what gives quasi-Newton its fast convergence.

    Returns ``succeeded=False`` without stepping when the direction is not
    a descent direction, when the evaluation budget runs out, or when no
    acceptable step exists below the cap; the caller is expected to take
    no step in that case.
    """
    if alpha_cap <= 0.0:
        raise ValueError("alpha_cap must be > 0")
    if max_searches < 1:
        raise ValueError("max_searches must be >= 1")
    if f0 is None or g0 is None:
        f0, g0 = objective(x)
    slope0 = float(g0 @ direction)
    if slope0 >= 0.0 or not np.isfinite(slope0) or not np.isfinite(f0):
        return LineSearchResult(alpha=0.0, evaluations=0, succeeded=False)

    evaluations = 0

    def phi(alpha: float) -> tuple[float, float, np.ndarray]:
        nonlocal evaluations
        value, grad = objective(x + alpha * direction)
        evaluations += 1
        return value, float(grad @ direction), grad

    def wolfe_ok(value: float, dphi: float, alpha: float) -> bool:
        return value <= f0 + ARMIJO_C1 * alpha * slope0 and abs(dphi) <= -WOLFE_C2 * slope0

    def refine(alpha: float, value: float, dphi: float, grad: np.ndarray) -> LineSearchResult:
        # (alpha, value, grad) already satisfies strong Wolfe; polish the
        # slope toward zero and return the conforming point with the
        # flattest slope seen
        best = (alpha, value, dphi, grad)
        a_prev, d_prev = 0.0, slope0
        while evaluations < max_searches and abs(dphi) > WOLFE_REFINE_TOL * abs(slope0):
            denom = dphi - d_prev
            if denom == 0.0:
                break
            a_next = alpha - dphi * (alpha - a_prev) / denom
            if not np.isfinite(a_next) or not 0.0 < a_next <= alpha_cap:
                break
            if not 0.1 * alpha <= a_next <= 10.0 * alpha:
                break
            v2, d2, g2 = phi(a_next)
            if not (np.isfinite(v2) and wolfe_ok(v2, d2, a_next)):
                break
            a_prev, d_prev = alpha, dphi
            alpha, value, dphi, grad = a_next, v2, d2, g2
            if abs(dphi) < abs(best[2]):
                best = (alpha, value, dphi, grad)
            else:
                break
        return LineSearchResult(best[0], evaluations, True, value=best[1], gradient=best[3])

    def zoom(lo: float, f_lo: float, hi: float) -> LineSearchResult:
        # invariant: lo satisfies Armijo, the interval brackets a Wolfe point
        while evaluations < max_searches:
            if abs(hi - lo) <= 1e-14 * max(1.0, abs(lo)):
                break
            alpha = 0.5 * (lo + hi)
            value, dphi, grad = phi(alpha)
            if not np.isfinite(value) or value > f0 + ARMIJO_C1 * alpha * slope0 or value >= f_lo:
                hi = alpha
            else:
                if abs(dphi) <= -WOLFE_C2 * slope0:
                    return refine(alpha, value, dphi, grad)
                if dphi * (hi - lo) >= 0.0:
                    hi = lo
                lo, f_lo = alpha, value
        return LineSearchResult(alpha=0.0, evaluations=evaluations, succeeded=False)

    alpha_prev, f_prev = 0.0, f0
    alpha = min(1.0, alpha_cap)
    while evaluations < max_searches:
        value, dphi, grad = phi(alpha)
        if not np.isfinite(value) or value > f0 + ARMIJO_C1 * alpha * slope0 or (alpha_prev > 0.0 and value >= f_prev):
            return zoom(alpha_prev, f_prev, alpha)
        if abs(dphi) <= -WOLFE_C2 * slope0:
            return refine(alpha, value, dphi, grad)
        if dphi >= 0.0:
            return zoom(alpha, value, alpha_prev)
        if alpha >= alpha_cap:
            # still descending at the cap and curvature unmet: the cap starves the search
            return LineSearchResult(alpha=0.0, evaluations=evaluations, succeeded=False)
        alpha_prev, f_prev = alpha, value
        alpha = min(2.0 * alpha, alpha_cap)
    return LineSearchResult(alpha=0.0, evaluations=evaluations, succeeded=False)


# ---------------------------------------------------------------------------
# Fletcher-Reeves nonlinear conjugate gradient
# ---------------------------------------------------------------------------


@dataclass
class FrState:
    """FR hyperparameters plus the previous steepest-descent vector and
    conjugate direction. Both are cleared at every batch boundary: no
    notion of conjugacy is carried between batches."""

    alpha0: float
    contraction: float = 0.5
    max_searches: int = 10
    steps_per_batch: int = 1
    beta_variant: str = "norm"
    prev_gradient: np.ndarray | None = None
    prev_direction: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.alpha0 <= 0.0:
            raise ValueError("initial step guess must be > 0")
        if not 0.0 < self.contraction < 1.0:
            raise ValueError("contraction must lie in (0, 1)")
        if self.max_searches < 1:
            raise ValueError("max_searches must be >= 1")
        if self.steps_per_batch < 1:
            raise ValueError("steps_per_batch must be >= 1")
        if self.beta_variant not in BETA_VARIANTS:
            raise ValueError(f"beta_variant must be one of {BETA_VARIANTS}")


def fr_beta(grad_now: np.ndarray, grad_prev: np.ndarray, variant: str = "norm") -> float:
    """FR scale factor ||g_now|| / ||g_prev|| with the automatic reset
    beta <- max(0, beta). The "squared" variant uses the textbook squared
    norms. A zero previous norm is treated as a restart (beta = 0)."""
    prev = float(np.linalg.norm(grad_prev))
    if prev == 0.0:
        return 0.0
    beta = float(np.linalg.norm(grad_now)) / prev
    if variant == "squared":
        beta = beta * beta
    elif variant != "norm":
        raise ValueError(f"beta_variant must be one of {BETA_VARIANTS}")
    return max(0.0, beta)


def fr_direction(grad: np.ndarray, beta: float, prev_direction: np.ndarray | None) -> np.ndarray:
    """Conjugate-direction update s = grad + beta * s_prev; plain grad on
    the first iteration or whenever beta is 0."""
    if prev_direction is None or beta == 0.0:
        return grad.copy()
    if prev_direction.shape != grad.shape:
        raise ValueError("direction dimensions do not match")
    return grad + beta * prev_direction


FrLineSearch = Callable[..., LineSearchResult]


def fr_batch_step(state: FrState, objective, params: np.ndarray, line_search: FrLineSearch | None = None) -> np.ndarray:
    """Run the FR loop ``steps_per_batch`` times against one fixed batch.

    Conjugacy state is cleared on entry. Each iteration evaluates the
    gradient, forms the conjugate direction from the negative gradient,
    backtracks along it, and applies the resulting step; a failed search
    still applies its smallest candidate. ``line_search`` may substitute
    the backtracking search (used by the linear-CG equivalence tests).
    Non-finite evaluations at an iterate abort with DivergenceError.
    """
    state.prev_gradient = None
    state.prev_direction = None
    x = params
    for _ in range(state.steps_per_batch):
        value, grad = objective.value_and_grad(x)
        if not np.isfinite(value) or not np.isfinite(grad).all():
            raise DivergenceError("non-finite evaluation in FR batch step")
        descent = -grad
        if state.prev_gradient is None:
            s = descent
        else:
            beta = fr_beta(descent, state.prev_gradient, variant=state.beta_variant)
            s = fr_direction(descent, beta, state.prev_direction)
        slope = float(grad @ s)
        if line_search is None:
            result = backtracking_line_search(
                objective.value, x, s, state.alpha0, state.contraction, state.max_searches,
                slope=slope, f0=value,
            )
        else:
            result = line_search(objective, x, s, slope=slope, f0=value)
        x = x + result.alpha * s
        state.prev_gradient = descent
        state.prev_direction = s
    return x


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------


@dataclass
class LbfgsState:
    """Curvature-pair ring buffer plus the step cap and search budget.

    The learning rate plays the role of a maximum step length. At most
    ``memory`` pairs are retained, oldest evicted first, and only pairs
    with positive curvature y.s > 0 are ever stored.
    """

    alpha_cap: float
    memory: int = 10
    max_searches: int = 20
    history: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.alpha_cap <= 0.0:
            raise ValueError("step cap must be > 0")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_searches < 1:
            raise ValueError("max_searches must be >= 1")


def lbfgs_direction(history: Iterable[tuple[np.ndarray, np.ndarray]], grad: np.ndarray) -> np.ndarray:
    """Quasi-Newton direction p solving B p = -grad via the two-loop
    recursion on the inverse approximation, with identity initial matrix.

    With an empty history this is steepest descent. The result is
    algebraically identical to materializing B from the direct update
    formula (B0 = I) and solving, provided every stored pair has positive
    curvature.
    """
    pairs = list(history)
    q = grad.astype(np.float64, copy=True)
    if not pairs:
        return -q
    rhos = []
    for s, y in pairs:
        ys = float(y @ s)
        if ys <= 0.0:
            raise ValueError("curvature pair with y.s <= 0 in history")
        rhos.append(1.0 / ys)
    alphas = np.empty(len(pairs))
    for i in range(len(pairs) - 1, -1, -1):
        s, y = pairs[i]
        alphas[i] = rhos[i] * float(s @ q)
        q -= alphas[i] * y
    r = q  # H0 = I
    for i, (s, y) in enumerate(pairs):
        b = rhos[i] * float(y @ r)
        r += (alphas[i] - b) * s
    return -r


def lbfgs_update_history(state: LbfgsState, s: np.ndarray, y: np.ndarray) -> bool:
    """Store a curvature pair, unless y.s <= 0 (which would break positive
    definiteness); evict the oldest pair beyond the memory bound. Returns
    whether the pair was stored."""
    if float(y @ s) <= 0.0:
        return False
    state.history.append((s, y))
    while len(state.history) > state.memory:
        state.history.popleft()
    return True


def lbfgs_batch_step(state: LbfgsState, objective, params: np.ndarray) -> np.ndarray:
    """One L-BFGS step against a fixed batch.

    Computes the two-loop direction, runs the Wolfe search capped at the
    state's step limit, and on success applies the step and pushes the new
    (s, y) pair when it has positive curvature. On line-search failure no
    step is taken and the history is left untouched.
    """
    f0, g0 = objective.value_and_grad(params)
    if not np.isfinite(f0) or not np.isfinite(g0).all():
        raise DivergenceError("non-finite evaluation in L-BFGS batch step")
    p = lbfgs_direction(state.history, g0)
    result = wolfe_line_search(
        objective.value_and_grad, params, p, state.alpha_cap, state.max_searches, f0=f0, g0=g0
    )
    if not result.succeeded:
        return params
    x_new = params + result.alpha * p
    g_new = result.gradient
    if g_new is None:
        _, g_new = objective.value_and_grad(x_new)
    lbfgs_update_history(state, x_new - params, g_new - g0)
    return x_new


# ---------------------------------------------------------------------------
# construction from hyperparameter assignments
# ---------------------------------------------------------------------------


class CallableObjective:
    """Adapter giving plain (value, gradient) callables the oracle shape
    the batch steps expect."""

    def __init__(self, value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]]):
        self._vg = value_and_grad

    def value(self, x: np.ndarray) -> float:
        return self._vg(x)[0]

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self._vg(x)


def validate_hyperparameters(optimizer: str, assignment: dict) -> list[str]:
    """Diagnostics for unknown names or out-of-range values; empty if clean."""
    problems = []
    if optimizer not in OPTIMIZER_HYPERPARAMETERS:
        return [f"unknown optimizer {optimizer!r}"]
    legal = OPTIMIZER_HYPERPARAMETERS[optimizer]
    for name in assignment:
        if name not in legal:
            problems.append(f"unknown hyperparameter {name!r} for optimizer {optimizer!r}")
    if assignment.get("beta_variant") not in (None, *BETA_VARIANTS):
        problems.append(f"beta_variant must be one of {BETA_VARIANTS}")
    return problems


def make_state(optimizer: str, assignment: dict) -> SgdState | FrState | LbfgsState:
    """Build the optimizer state for one hyperparameter assignment."""
    problems = validate_hyperparameters(optimizer, assignment)
    if problems:
        raise ValueError("; ".join(problems))
    lr = float(assignment.get("learning_rate", 0.1))
    if optimizer == "sgd":
        return SgdState(gamma=lr, mu=float(assignment.get("momentum", 0.0)))
    if optimizer == "fr":
        return FrState(
            alpha0=lr,
            contraction=float(assignment.get("contraction", 0.5)),
            max_searches=int(assignment.get("max_line_searches", 10)),
            steps_per_batch=int(assignment.get("steps_per_batch", 1)),
            beta_variant=str(assignment.get("beta_variant", "norm")),
        )
    return LbfgsState(
        alpha_cap=lr,
        memory=int(assignment.get("memory", 10)),
        max_searches=int(assignment.get("max_line_searches", 20)),
    )
