"""Coreset quality metrics and empirical verification of the convergence theory.

Provides closed-form Gaussian KL divergence, coreset-vs-full posterior
comparisons, MAP distance, exhaustive restricted-isometry constant
estimation, a brute-force global optimum for small instances, and the
per-iteration error-bound check that the accelerated solver is proven to
satisfy when the isometry constants are known.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
import numpy as np
from scipy.linalg import solve_triangular

from .models import BayesianModel, GaussianDist, posterior_approximation
from .problem import SparseRegressionProblem, WeightVector, _as_weights
from .solvers import SolverConfig, solve_aiht

KL_DIRECTIONS = ("forward", "reverse", "symmetrized")


class EnumerationBudgetError(RuntimeError):
    """Support enumeration would exceed the configured budget."""


def gaussian_kl(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p || q) between Gaussians, via Cholesky factors.

    0.5 * (tr(Sq^-1 Sp) + (mq-mp)^T Sq^-1 (mq-mp) - d + logdet Sq - logdet Sp).
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    m = solve_triangular(q.chol, p.chol, lower=True)
    trace = float(np.sum(m * m))
    u = solve_triangular(q.chol, q.mean - p.mean, lower=True)
    maha = float(u @ u)
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(q.chol))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(p.chol))))
    kl = 0.5 * (trace + maha - p.dim + logdet_q - logdet_p)
    if kl < 0:
        if kl < -1e-9:
            raise AssertionError(f"KL computed strongly negative: {kl}")
        kl = 0.0
    return kl


def coreset_kl(model: BayesianModel, weights, direction: str = "reverse",
               tol: float = 1e-8) -> float:
    """Divergence between the full-data posterior and the coreset posterior.

    Posteriors are exact for conjugate kinds and Laplace fits otherwise.
    ``forward`` is KL(full || coreset), ``reverse`` is KL(coreset || full),
    ``symmetrized`` their sum.
    """
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"direction must be one of {KL_DIRECTIONS}")
    full = posterior_approximation(model, np.ones(model.dataset.n), tol=tol)
    coreset = posterior_approximation(model, weights, tol=tol)
    if direction == "forward":
        return gaussian_kl(full, coreset)
    if direction == "reverse":
        return gaussian_kl(coreset, full)
    return gaussian_kl(full, coreset) + gaussian_kl(coreset, full)


def map_l2_distance(model: BayesianModel, weights, tol: float = 1e-8) -> float:
    """l2 distance between the full-data MAP and the coreset MAP."""
    full = posterior_approximation(model, np.ones(model.dataset.n), tol=tol)
    coreset = posterior_approximation(model, weights, tol=tol)
    return float(np.linalg.norm(full.mean - coreset.mean))


# -- restricted isometry constants -----------------------------------------

@dataclass(frozen=True)
class RipConstants:
    """Per-sparsity-level squared restricted singular-value bounds of phi.

    ``alpha[s]`` is the smallest and ``beta[s]`` the largest eigenvalue of
    any s-column Gram submatrix; alpha is non-increasing and beta
    non-decreasing in s.
    """

    levels: tuple
    alpha: tuple
    beta: tuple

    def __post_init__(self):
        if not (len(self.levels) == len(self.alpha) == len(self.beta)):
            raise ValueError("levels/alpha/beta length mismatch")
        order = np.argsort(self.levels)
        lv = [self.levels[i] for i in order]
        al = [self.alpha[i] for i in order]
        be = [self.beta[i] for i in order]
        for a, b in zip(al, be):
            if not (0 <= a <= b):
                raise ValueError("need 0 <= alpha_s <= beta_s at every level")
        if any(al[i] < al[i + 1] - 1e-12 for i in range(len(al) - 1)):
            raise ValueError("alpha must be non-increasing in s")
        if any(be[i] > be[i + 1] + 1e-12 for i in range(len(be) - 1)):
            raise ValueError("beta must be non-decreasing in s")
        object.__setattr__(self, "levels", tuple(lv))
        object.__setattr__(self, "alpha", tuple(al))
        object.__setattr__(self, "beta", tuple(be))

    def alpha_at(self, s: int) -> float:
        return self.alpha[self.levels.index(s)]

    def beta_at(self, s: int) -> float:
        return self.beta[self.levels.index(s)]

    def to_json(self) -> str:
        return json.dumps({"levels": list(self.levels),
                           "alpha": list(self.alpha),
                           "beta": list(self.beta)})


def estimate_rip(problem: SparseRegressionProblem, levels,
                 budget: int = 10 ** 6) -> RipConstants:
    """Exhaustive restricted-isometry constants per sparsity level.

    For each s, enumerates every support of size s and takes the extreme
    eigenvalues of the corresponding Gram submatrix. Refuses (no sampling
    fallback) when any level would enumerate more than ``budget`` supports.
    """
    n = problem.n
    levels = sorted(set(int(s) for s in levels))
    for s in levels:
        if not 1 <= s <= n:
            raise ValueError(f"level {s} out of range [1, {n}]")
        count = math.comb(n, s)
        if count > budget:
            raise EnumerationBudgetError(
                f"level {s} needs {count} supports, budget is {budget}")
    gram = problem.phi.T @ problem.phi
    alpha, beta = [], []
    for s in levels:
        lo, hi = np.inf, -np.inf
        for support in itertools.combinations(range(n), s):
            idx = np.asarray(support)
            evs = np.linalg.eigvalsh(gram[np.ix_(idx, idx)])
            lo = min(lo, evs[0])
            hi = max(hi, evs[-1])
        alpha.append(max(float(lo), 0.0))
        beta.append(float(hi))
    return RipConstants(tuple(levels), tuple(alpha), tuple(beta))


# -- brute-force optimum ----------------------------------------------------

def nnls_on_support(phi_cols: np.ndarray, y: np.ndarray, tol: float = 1e-12,
                    max_iters: int = 200000) -> np.ndarray:
    """Projected-gradient non-negative least squares on a fixed column set."""
    gram = phi_cols.T @ phi_cols
    rhs = phi_cols.T @ y
    lam_max = float(np.linalg.eigvalsh(gram)[-1]) if gram.size else 0.0
    u = np.zeros(phi_cols.shape[1])
    if lam_max <= 0:
        return u
    step = 1.0 / (2.0 * lam_max)
    for _ in range(max_iters):
        u_next = np.maximum(u - step * 2.0 * (gram @ u - rhs), 0.0)
        if np.linalg.norm(u_next - u) <= tol * max(1.0, np.linalg.norm(u_next)):
            u = u_next
            break
        u = u_next
    return u


def brute_force_optimum(problem: SparseRegressionProblem, k: int,
                        budget: int = 10 ** 6):
    """Global optimum of the k-sparse non-negative fit by support enumeration.

    Solves the non-negative least-squares subproblem on every size-k support
    and keeps the best; exact ties keep the lexicographically first support.
    Returns (weights, objective value).
    """
    n = problem.n
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    count = math.comb(n, k)
    if count > budget:
        raise EnumerationBudgetError(f"{count} supports exceed budget {budget}")
    best_f = np.inf
    best_support = None
    best_u = None
    for support in itertools.combinations(range(n), k):
        idx = np.asarray(support)
        u = nnls_on_support(problem.phi[:, idx], problem.y)
        r = problem.y - problem.phi[:, idx] @ u
        f = float(r @ r)
        if f < best_f:
            best_f, best_support, best_u = f, idx, u
    w = np.zeros(n)
    w[best_support] = best_u
    return WeightVector(w), best_f


# -- solver error-bound verification ----------------------------------------

def contraction_factor(rip: RipConstants, k: int, n: int) -> float:
    """Per-iteration contraction constant from the isometry bounds.

    2 max(beta_2k/alpha_3k - 1, 1 - alpha_2k/beta_3k)
      + (beta_4k - alpha_4k)/alpha_3k,
    with each level clamped at n (an s-sparse set with s >= n is all of R^n).
    """
    l2, l3, l4 = (min(m * k, n) for m in (2, 3, 4))
    a2, a3, a4 = rip.alpha_at(l2), rip.alpha_at(l3), rip.alpha_at(l4)
    b2, b3, b4 = rip.beta_at(l2), rip.beta_at(l3), rip.beta_at(l4)
    if a3 <= 0 or b3 <= 0:
        raise ValueError("contraction factor needs alpha_3k > 0 and beta_3k > 0")
    return 2.0 * max(b2 / a3 - 1.0, 1.0 - a2 / b3) + (b4 - a4) / a3


def decay_rate(contraction: float, momentum_max: float) -> float:
    """Geometric rate for the two-step error recurrence."""
    r, t = contraction, momentum_max
    return (r * (1.0 + t) + math.sqrt((r * (1.0 + t)) ** 2 + 4.0 * r * t)) / 2.0


@dataclass(frozen=True)
class InvariantEntry:
    iteration: int
    error: float      # ||w_{t+1} - w*||
    bound: float      # contraction/momentum bound plus the residual term
    satisfied: bool

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "error": self.error,
                "bound": self.bound, "satisfied": self.satisfied}


@dataclass(frozen=True)
class InvariantReport:
    """Per-iteration error-bound check of an accelerated solve.

    ``linear_rate`` flags the regime where the two-step recurrence contracts
    (contraction < 1 / (1 + 2 momentum_max)); in that regime (and with zero
    optimal residual) ``decay_rate`` upper-bounds the geometric objective
    decay per iteration.
    """

    entries: tuple
    contraction: float
    rate: float
    momentum_max: float
    residual_norm: float
    objectives: tuple

    @property
    def all_satisfied(self) -> bool:
        return all(e.satisfied for e in self.entries)

    @property
    def linear_rate(self) -> bool:
        return self.contraction < 1.0 / (1.0 + 2.0 * self.momentum_max)

    def to_json(self) -> str:
        return json.dumps({
            "contraction": self.contraction,
            "rate": self.rate,
            "momentum_max": self.momentum_max,
            "residual_norm": self.residual_norm,
            "linear_rate": self.linear_rate,
            "all_satisfied": self.all_satisfied,
            "objectives": list(self.objectives),
            "entries": [e.to_dict() for e in self.entries],
        })


def check_iterative_invariant(problem: SparseRegressionProblem, cfg: SolverConfig,
                              w_star: WeightVector, rip: RipConstants) -> InvariantReport:
    """Run the accelerated solver and verify its per-iteration error bound.

    With e_t = ||w_t - w*||, each iteration must satisfy

        e_{t+1} <= rho |1 + tau_t| e_t + rho |tau_t| e_{t-1}
                   + 2 beta_3k sqrt(beta_2k) ||y - phi w*||,

    where tau_t is the momentum coefficient that produced the iteration's
    momentum iterate and rho the contraction factor from the isometry
    constants. ``w_star`` must be the global optimum (use the brute-force
    search) and ``rip`` must cover levels {k, 2k, 3k, 4k} clamped at n.
    """
    n = problem.n
    k = cfg.k
    needed = sorted({min(m * k, n) for m in (1, 2, 3, 4)})
    for level in needed:
        if level not in rip.levels:
            raise ValueError(f"rip constants missing level {level}")
    rho = contraction_factor(rip, k, n)
    b2 = rip.beta_at(min(2 * k, n))
    b3 = rip.beta_at(min(3 * k, n))
    ws = _as_weights(w_star)
    resid = problem.y - problem.phi @ ws
    eps_norm = float(np.linalg.norm(resid))
    noise_term = 2.0 * b3 * math.sqrt(b2) * eps_norm

    capture = []
    _, trace = solve_aiht(problem, cfg, capture=capture)

    iterates = [np.zeros(n)] + [c["w_next"] for c in capture]
    taus = [0.0] + [c["tau"] for c in capture]
    errors = [float(np.linalg.norm(it - ws)) for it in iterates]
    entries = []
    for t in range(len(capture)):
        tau_t = taus[t]  # momentum that formed this iteration's z_t
        err_prev2 = errors[t - 1] if t >= 1 else errors[0]
        bound = rho * abs(1.0 + tau_t) * errors[t] + rho * abs(tau_t) * err_prev2 + noise_term
        err = errors[t + 1]
        satisfied = err <= bound * (1.0 + 1e-9) + 1e-12
        entries.append(InvariantEntry(t, err, bound, satisfied))
    momentum_max = max(abs(t) for t in taus) if taus else 0.0
    return InvariantReport(
        entries=tuple(entries),
        contraction=rho,
        rate=decay_rate(rho, momentum_max),
        momentum_max=momentum_max,
        residual_norm=eps_norm,
        objectives=tuple(r.f for r in trace.records),
    )


# -- synthetic instances for the theory machinery ----------------------------

def make_planted_problem(n: int, s_dim: int, k: int, seed,
                         near_orthonormal: bool = False,
                         perturbation: float = 0.003):
    """Random instance with a planted non-negative k-sparse solution.

    Gaussian phi by default; with ``near_orthonormal`` the columns are an
    orthonormal frame plus a small Gaussian perturbation, which keeps the
    isometry constants tight enough for the linear-rate regime. Returns
    (problem, planted weights); the target is phi @ w so the optimal residual
    is zero.
    """
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    if near_orthonormal:
        if s_dim < n:
            raise ValueError("near-orthonormal instances need s_dim >= n")
        q, _ = np.linalg.qr(rng.standard_normal((s_dim, n)))
        phi = q + perturbation * rng.standard_normal((s_dim, n))
    else:
        phi = rng.standard_normal((s_dim, n))
    support = rng.choice(n, size=k, replace=False)
    w = np.zeros(n)
    w[support] = rng.uniform(1.0, 5.0, size=k)
    weights = WeightVector(w)
    return SparseRegressionProblem(phi, phi @ w), weights
