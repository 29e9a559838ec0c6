"""Iterative hard-thresholding solvers for the non-negative k-sparse fit.

Three variants are provided:

* ``solve_vanilla_iht``  -- fixed-step projected gradient descent.
* ``solve_aiht``         -- automated variant with exact line search on the
  support-restricted gradient, active subspace expansion, and momentum whose
  coefficient is itself line-searched.
* ``solve_aiht_debias``  -- same, plus a de-bias step per iteration: a second
  line-searched gradient step confined to the current sparse support.

``solve_aiht_batched`` swaps the exact gradient for an unbiased two-mask
stochastic estimator so large problems can run on data batches.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .problem import (
    SparseRegressionProblem,
    WeightVector,
    _as_weights,
    objective,
    project_topk_excluding,
    project_topk_nonneg,
    restrict,
)

DEFAULT_MAX_ITERS = 300
DEFAULT_MAX_ITERS_BATCHED = 500

MOMENTUM_FORMULAS = ("exact_argmin", "halved_argmin")


class Termination(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    STALLED = "stalled"


class DivergenceError(RuntimeError):
    """Objective became non-finite; carries the offending iteration."""

    def __init__(self, iteration: int):
        super().__init__(f"objective became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class SolverConfig:
    """Shared solver knobs.

    ``max_iters=None`` selects the per-solver default (300, or 500 for the
    batched solver). ``rng_seed`` only matters for the batched solver, which
    re-draws its gradient masks every iteration.
    """

    k: int
    max_iters: Optional[int] = None
    rel_tol: float = 1e-5
    momentum_formula: str = "exact_argmin"
    batch_fraction: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.rel_tol > 0:
            raise ValueError(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.momentum_formula not in MOMENTUM_FORMULAS:
            raise ValueError(f"momentum_formula must be one of {MOMENTUM_FORMULAS}")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError(f"batch_fraction must be in (0, 1], got {self.batch_fraction}")

    def effective_max_iters(self, batched: bool = False) -> int:
        if self.max_iters is not None:
            return self.max_iters
        return DEFAULT_MAX_ITERS_BATCHED if batched else DEFAULT_MAX_ITERS


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    f: float
    mu: float
    tau: float
    support: tuple
    ns: int

    def to_dict(self) -> dict:
        return {
            "iter": self.iter,
            "f": self.f,
            "mu": self.mu,
            "tau": self.tau,
            "support": list(self.support),
            "ns": self.ns,
        }


@dataclass
class SolverTrace:
    """Per-iteration history of a solve plus the termination reason.

    ``ns`` is wall-clock nanoseconds per iteration and is the only
    nondeterministic field; everything else is a pure function of
    (problem, config, seed).
    """

    records: list
    termination: Termination

    def __len__(self) -> int:
        return len(self.records)

    def objectives(self) -> np.ndarray:
        return np.array([r.f for r in self.records])

    def with_zeroed_time(self) -> "SolverTrace":
        records = [
            TraceRecord(r.iter, r.f, r.mu, r.tau, r.support, 0) for r in self.records
        ]
        return SolverTrace(records, self.termination)

    def to_json(self) -> str:
        payload = {
            "termination": self.termination.value,
            "records": [r.to_dict() for r in self.records],
        }
        return json.dumps(payload)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,f,mu,tau,support,ns\n")
        for r in self.records:
            support = ";".join(str(i) for i in r.support)
            buf.write(f"{r.iter},{r.f!r},{r.mu!r},{r.tau!r},{support},{r.ns}\n")
        return buf.getvalue()


def line_search_step(problem: SparseRegressionProblem, direction) -> float:
    """Exact minimizer of f(z - mu * d) over mu: ||d||^2 / (2 ||phi d||^2).

    Returns 0 when ``phi @ d`` vanishes (the degenerate contract).
    """
    d = np.asarray(direction, dtype=np.float64)
    pd = problem.phi @ d
    denom = float(pd @ pd)
    if denom == 0.0:
        return 0.0
    return float(d @ d) / (2.0 * denom)


def momentum_coefficient(problem: SparseRegressionProblem, w_next, w_prev,
                         formula: str = "exact_argmin") -> float:
    """Momentum coefficient for the extrapolation direction w_next - w_prev.

    ``exact_argmin`` minimizes f(w_next + tau * d) exactly:
    <y - phi w_next, phi d> / ||phi d||^2. ``halved_argmin`` is the same
    expression with an extra factor 2 in the denominator. Returns 0 when
    ``phi @ d`` vanishes.
    """
    if formula not in MOMENTUM_FORMULAS:
        raise ValueError(f"formula must be one of {MOMENTUM_FORMULAS}")
    wn = _as_weights(w_next)
    wp = _as_weights(w_prev)
    if wn.shape != wp.shape:
        raise ValueError("weight vectors differ in length")
    d = wn - wp
    pd = problem.phi @ d
    denom = float(pd @ pd)
    if denom == 0.0:
        return 0.0
    num = float((problem.y - problem.phi @ wn) @ pd)
    if formula == "halved_argmin":
        return num / (2.0 * denom)
    return num / denom


def stochastic_gradient(problem: SparseRegressionProblem, weights,
                        batch_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Unbiased two-mask estimator of the gradient.

    Two independent uniform index subsets of size B = round(batch_fraction*n)
    are drawn; each mask zeroes the unselected coordinates and scales the
    selected ones by n/B, one applied to ``w`` inside the residual and one to
    the output coordinates. Expectation over the draws equals the gradient.
    """
    if not 0 < batch_fraction <= 1:
        raise ValueError(f"batch_fraction must be in (0, 1], got {batch_fraction}")
    w = _as_weights(weights)
    n = problem.n
    if w.shape != (n,):
        raise ValueError(f"weights have shape {w.shape}, expected ({n},)")
    b = int(round(batch_fraction * n))
    if b == 0:
        raise ValueError(f"batch size rounds to zero (batch_fraction={batch_fraction}, n={n})")
    scale = n / b
    sel_inner = rng.choice(n, size=b, replace=False)
    sel_outer = rng.choice(n, size=b, replace=False)
    masked_w = np.zeros(n)
    masked_w[sel_inner] = w[sel_inner] * scale
    resid = problem.phi @ masked_w - problem.y
    full = 2.0 * (problem.phi.T @ resid)
    out = np.zeros(n)
    out[sel_outer] = full[sel_outer] * scale
    return out


def _support_tuple(w: np.ndarray) -> tuple:
    return tuple(int(i) for i in np.flatnonzero(w))


def _converged(w_new: np.ndarray, w_old: np.ndarray, rel_tol: float) -> bool:
    # ||w_new|| = 0 counts as converged only when ||w_old|| = 0 too;
    # the plain inequality already encodes that.
    step = float(np.linalg.norm(w_new - w_old))
    return step <= rel_tol * float(np.linalg.norm(w_new))


def solve_vanilla_iht(problem: SparseRegressionProblem, cfg: SolverConfig,
                      step: float):
    """Fixed-step projected gradient descent onto the k-sparse cone.

    Raises ``DivergenceError`` when the objective turns non-finite, which a
    bad fixed step can cause.
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    if cfg.k > problem.n:
        raise ValueError(f"k={cfg.k} exceeds problem size n={problem.n}")
    max_iters = cfg.effective_max_iters()
    w = np.zeros(problem.n)
    records = []
    termination = Termination.MAX_ITERS
    # Overflow is an expected outcome of a bad fixed step; the isfinite
    # check below turns it into DivergenceError without warning noise.
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(max_iters):
            t0 = time.perf_counter_ns()
            grad = gradient_dense(problem, w)
            w_next = project_topk_nonneg(w - step * grad, cfg.k).w
            f = objective(problem, w_next)
            if not np.isfinite(f):
                raise DivergenceError(t)
            ns = time.perf_counter_ns() - t0
            records.append(TraceRecord(t, f, step, 0.0, _support_tuple(w_next), ns))
            done = _converged(w_next, w, cfg.rel_tol)
            w = w_next
            if done:
                termination = Termination.CONVERGED
                break
    return WeightVector(w), SolverTrace(records, termination)


def gradient_dense(problem: SparseRegressionProblem, w: np.ndarray) -> np.ndarray:
    """Gradient on a raw array; solver iterates may have negative entries."""
    return -2.0 * (problem.phi.T @ (problem.y - problem.phi @ w))


def _accelerated_iht(problem: SparseRegressionProblem, cfg: SolverConfig, *,
                     debias: bool,
                     gradient_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                     batched: bool = False,
                     capture: Optional[list] = None):
    if cfg.k > problem.n:
        raise ValueError(f"k={cfg.k} exceeds problem size n={problem.n}")
    max_iters = cfg.effective_max_iters(batched=batched)
    grad_at = gradient_fn if gradient_fn is not None else lambda v: gradient_dense(problem, v)

    n = problem.n
    w = np.zeros(n)
    z = np.zeros(n)
    records = []
    termination = Termination.MAX_ITERS
    stall_run = 0

    for t in range(max_iters):
        t0 = time.perf_counter_ns()
        grad = grad_at(z)
        z_support = np.flatnonzero(z)
        expand = project_topk_excluding(grad, cfg.k, z_support)
        support = np.union1d(expand, z_support)  # |support| <= 3k
        grad_restricted = restrict(grad, support)
        mu = line_search_step(problem, grad_restricted)
        stalled_now = mu == 0.0

        # Projected step uses the full gradient; only mu comes from the
        # restricted one.
        x = project_topk_nonneg(z - mu * grad, cfg.k).w
        x_projected = x

        mu_debias = None
        debias_grad = None
        if debias:
            x_support = np.flatnonzero(x)
            debias_grad = restrict(grad_at(x), x_support)
            if float(debias_grad @ debias_grad) > 0.0:
                mu_debias = line_search_step(problem, debias_grad)
                # Support cannot grow: the restricted gradient vanishes off
                # supp(x), so only the non-negativity projection is needed.
                x = np.maximum(x - mu_debias * debias_grad, 0.0)

        w_next = x
        tau = momentum_coefficient(problem, w_next, w, cfg.momentum_formula)
        z_next = w_next + tau * (w_next - w)
        f = objective(problem, w_next)
        if not np.isfinite(f):
            raise DivergenceError(t)
        ns = time.perf_counter_ns() - t0
        records.append(TraceRecord(t, f, mu, tau, _support_tuple(w_next), ns))
        if capture is not None:
            capture.append({
                "z": z.copy(),
                "grad": grad.copy(),
                "support_expanded": support.copy(),
                "grad_restricted": grad_restricted.copy(),
                "mu": mu,
                "x": x_projected.copy(),
                "debias_grad": debias_grad,
                "mu_debias": mu_debias,
                "w_prev": w.copy(),
                "w_next": w_next.copy(),
                "tau": tau,
            })

        done = _converged(w_next, w, cfg.rel_tol)
        w = w_next
        z = z_next
        if done:
            termination = Termination.CONVERGED
            break
        if stalled_now:
            stall_run += 1
            if stall_run >= 2:
                termination = Termination.STALLED
                break
        else:
            stall_run = 0

    return WeightVector(w), SolverTrace(records, termination)


def solve_aiht(problem: SparseRegressionProblem, cfg: SolverConfig,
               capture: Optional[list] = None):
    """Accelerated IHT: subspace expansion, exact line search, momentum.

    Per iteration: expand the support of the momentum iterate z by the k
    largest-magnitude gradient entries outside it (at most 3k indices), pick
    the step by exact line search on the gradient restricted to that support,
    take a full-gradient projected step, then extrapolate with a momentum
    coefficient that itself minimizes the objective along the iterate
    difference.

    A vanished restricted gradient image (||phi d|| = 0) sets the step to 0
    and counts the iteration as stalled; two consecutive stalls terminate.
    ``capture``, when given a list, receives per-iteration internals (used by
    the theory checker and the line-search certificates).
    """
    return _accelerated_iht(problem, cfg, debias=False, capture=capture)


def solve_aiht_debias(problem: SparseRegressionProblem, cfg: SolverConfig,
                      capture: Optional[list] = None):
    """Accelerated IHT with a de-bias step.

    After the projected full-gradient step produces a k-sparse candidate x,
    a second line-searched gradient step restricted to supp(x) refines the
    weights without changing the selected set (only the non-negativity
    projection is applied). A zero restricted gradient skips the refinement
    for that iteration.
    """
    return _accelerated_iht(problem, cfg, debias=True, capture=capture)


def solve_aiht_batched(problem: SparseRegressionProblem, cfg: SolverConfig,
                       capture: Optional[list] = None):
    """Accelerated IHT with the stochastic gradient estimator.

    Gradient calls are replaced by ``stochastic_gradient`` with fresh masks
    every call, seeded by ``cfg.rng_seed``. The default iteration cap rises
    to 500. With ``batch_fraction=1`` the masks are the identity and the
    trace matches ``solve_aiht`` exactly.
    """
    rng = np.random.default_rng(cfg.rng_seed)

    def grad_at(v: np.ndarray) -> np.ndarray:
        return stochastic_gradient(problem, v, cfg.batch_fraction, rng)

    return _accelerated_iht(problem, cfg, debias=False, gradient_fn=grad_at,
                            batched=True, capture=capture)
