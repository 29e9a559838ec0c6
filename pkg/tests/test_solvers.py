import json

import numpy as np
import pytest
from scipy.optimize import nnls as scipy_nnls

from coreset_iht import (
    DivergenceError,
    SolverConfig,
    SparseRegressionProblem,
    Termination,
    estimate_rip,
    brute_force_optimum,
    gradient,
    line_search_step,
    momentum_coefficient,
    nnls_on_support,
    objective,
    project_topk_nonneg,
    solve_aiht,
    solve_aiht_batched,
    solve_aiht_debias,
    solve_vanilla_iht,
    stochastic_gradient,
)
from coreset_iht.solvers import _accelerated_iht
from conftest import random_problem, recovery_problem


def zero_target_problem(n=4):
    return SparseRegressionProblem(np.eye(n), np.zeros(n))


def small_recovery_instance():
    """12x10 Gaussian phi with planted weights 3 and 5 at indices 1 and 4."""
    rng = np.random.default_rng(7)
    phi = rng.standard_normal((12, 10))
    w = np.zeros(10)
    w[1], w[4] = 3.0, 5.0
    return SparseRegressionProblem(phi, phi @ w), w


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(k=0)
        with pytest.raises(ValueError):
            SolverConfig(k=1, max_iters=0)
        with pytest.raises(ValueError):
            SolverConfig(k=1, rel_tol=0.0)
        with pytest.raises(ValueError):
            SolverConfig(k=1, momentum_formula="nesterov")
        with pytest.raises(ValueError):
            SolverConfig(k=1, batch_fraction=0.0)

    def test_default_iteration_caps(self):
        cfg = SolverConfig(k=1)
        assert cfg.effective_max_iters() == 300
        assert cfg.effective_max_iters(batched=True) == 500
        assert SolverConfig(k=1, max_iters=7).effective_max_iters(batched=True) == 7


class TestLineSearch:
    def test_identity_matrix_gives_half(self):
        p = SparseRegressionProblem(np.eye(5), np.ones(5))
        rng = np.random.default_rng(0)
        for _ in range(5):
            d = rng.standard_normal(5)
            assert line_search_step(p, d) == 0.5

    def test_zero_direction(self):
        p = SparseRegressionProblem(np.eye(3), np.ones(3))
        assert line_search_step(p, np.zeros(3)) == 0.0

    def test_beats_grid(self):
        # the closed form is the argmin only along a gradient restriction
        # taken at the same point
        from coreset_iht import restrict

        rng = np.random.default_rng(1)
        for _ in range(10):
            p = random_problem(rng, 8, 6)
            z = rng.standard_normal(6)
            support = rng.choice(6, size=rng.integers(1, 7), replace=False)
            d = restrict(gradient(p, z), support)
            mu = line_search_step(p, d)
            f_star = objective(p, z - mu * d)
            for c in np.linspace(0.0, 4.0 * mu, 100):
                assert f_star <= objective(p, z - c * d) * (1 + 1e-10) + 1e-12


class TestMomentum:
    def test_zero_direction(self):
        p = SparseRegressionProblem(np.eye(3), np.ones(3))
        w = np.array([1.0, 0.0, 0.0])
        assert momentum_coefficient(p, w, w) == 0.0

    def test_argmin_beats_grid(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            p = random_problem(rng, 8, 6)
            w_prev = np.abs(rng.standard_normal(6))
            w_next = np.abs(rng.standard_normal(6))
            tau = momentum_coefficient(p, w_next, w_prev, "exact_argmin")
            d = w_next - w_prev
            f_star = objective(p, w_next + tau * d)
            for c in np.linspace(-2.0, 2.0, 100):
                assert f_star <= objective(p, w_next + c * d) * (1 + 1e-10) + 1e-12

    def test_halved_is_half_of_exact(self):
        rng = np.random.default_rng(3)
        p = random_problem(rng, 6, 5)
        a = np.abs(rng.standard_normal(5))
        b = np.abs(rng.standard_normal(5))
        exact = momentum_coefficient(p, a, b, "exact_argmin")
        halved = momentum_coefficient(p, a, b, "halved_argmin")
        assert halved == exact / 2.0

    def test_unknown_formula(self):
        p = SparseRegressionProblem(np.eye(2), np.ones(2))
        with pytest.raises(ValueError):
            momentum_coefficient(p, np.ones(2), np.zeros(2), "bogus")


class TestVanillaIht:
    def test_zero_target_converges_immediately(self):
        w, trace = solve_vanilla_iht(zero_target_problem(), SolverConfig(k=2), step=0.1)
        assert not w.w.any()
        assert len(trace) == 1
        assert trace.termination is Termination.CONVERGED

    def test_exact_recovery_with_rip_step(self):
        problem, w_star = small_recovery_instance()
        rip = estimate_rip(problem, [6])
        step = 1.0 / (2.0 * rip.beta_at(6))
        cfg = SolverConfig(k=2, rel_tol=1e-14, max_iters=20000)
        w, trace = solve_vanilla_iht(problem, cfg, step)
        assert trace.records[-1].f < 1e-10
        assert w.support.tolist() == [1, 4]
        # brute force over all supports certifies the planted optimum is global
        w_opt, f_opt = brute_force_optimum(problem, 2)
        assert w_opt.support.tolist() == [1, 4]
        assert f_opt <= 1e-20
        np.testing.assert_allclose(w.w, w_star, atol=1e-8)

    def test_divergence_raises_and_names_iteration(self):
        problem, _ = small_recovery_instance()
        with pytest.raises(DivergenceError) as err:
            solve_vanilla_iht(problem, SolverConfig(k=2, max_iters=10000), step=1.0)
        assert err.value.iteration > 0
        # oracle: replay the iteration map; the objective must grow
        # monotonically until it overflows
        w = np.zeros(10)
        fs = []
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(err.value.iteration + 1):
                g = -2.0 * (problem.phi.T @ (problem.y - problem.phi @ w))
                w = project_topk_nonneg(w - 1.0 * g, 2).w
                r = problem.y - problem.phi @ w
                f = float(r @ r)
                if not np.isfinite(f):
                    break
                fs.append(f)
        assert len(fs) == err.value.iteration
        assert np.all(np.diff(fs) > 0)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            solve_vanilla_iht(zero_target_problem(), SolverConfig(k=1), step=0.0)


class TestAiht:
    def test_zero_target_one_iteration(self):
        w, trace = solve_aiht(zero_target_problem(), SolverConfig(k=2))
        assert not w.w.any()
        assert len(trace) == 1
        assert trace.termination is Termination.CONVERGED

    def test_recovers_global_optimum_faster_than_vanilla(self):
        problem, w_star = small_recovery_instance()
        cfg = SolverConfig(k=2, rel_tol=1e-14, max_iters=20000)
        w, trace = solve_aiht(problem, cfg)
        assert trace.records[-1].f < 1e-10
        w_opt, _ = brute_force_optimum(problem, 2)
        assert w.support.tolist() == w_opt.support.tolist()
        np.testing.assert_allclose(w.w, w_star, atol=1e-8)
        rip = estimate_rip(problem, [6])
        _, vanilla_trace = solve_vanilla_iht(problem, cfg, 1.0 / (2.0 * rip.beta_at(6)))
        assert len(trace) < len(vanilla_trace)

    def test_k_equals_n_solves_nnls(self):
        rng = np.random.default_rng(3)
        phi = rng.standard_normal((20, 8))
        y = 3.0 * rng.standard_normal(20)
        problem = SparseRegressionProblem(phi, y)
        w, _ = solve_aiht(problem, SolverConfig(k=8, rel_tol=1e-12, max_iters=5000))
        oracle = nnls_on_support(phi, y, tol=1e-12)
        np.testing.assert_allclose(w.w, oracle, atol=1e-6)
        reference, _ = scipy_nnls(phi, y)
        np.testing.assert_allclose(oracle, reference, atol=1e-9)

    def test_k_larger_than_n_rejected(self):
        with pytest.raises(ValueError):
            solve_aiht(zero_target_problem(3), SolverConfig(k=4))

    def test_feasibility_and_expanded_support_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            problem = random_problem(rng, 15, 12, y_scale=4.0)
            k = int(rng.integers(1, 5))
            capture = []
            w, trace = solve_aiht(problem, SolverConfig(k=k, max_iters=60), capture=capture)
            assert w.sparsity <= k and np.all(w.w >= 0)
            for rec, cap in zip(trace.records, capture):
                assert len(rec.support) <= k
                assert cap["support_expanded"].size <= 3 * k
                assert np.all(cap["w_next"] >= 0)
                assert np.count_nonzero(cap["w_next"]) <= k

    def test_step_size_bracket_under_rip(self):
        rng = np.random.default_rng(5)
        problem, _ = recovery_problem(rng, 30, 10, 2)
        k = 2
        rip = estimate_rip(problem, [min(3 * k, problem.n)])
        lo = 1.0 / (2.0 * rip.beta_at(6))
        hi = 1.0 / (2.0 * rip.alpha_at(6))
        assert rip.alpha_at(6) > 0
        capture = []
        solve_aiht(problem, SolverConfig(k=k, max_iters=100), capture=capture)
        for cap in capture:
            if cap["mu"] != 0.0:
                assert lo - 1e-12 <= cap["mu"] <= hi + 1e-12

    def test_best_so_far_objective_decreases(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            problem = random_problem(rng, 12, 10, y_scale=5.0)
            _, trace = solve_aiht(problem, SolverConfig(k=3))
            fs = trace.objectives()
            best = np.minimum.accumulate(fs)
            assert np.all(np.diff(best) <= 0)
            assert best[-1] < objective(problem, np.zeros(10))

    def test_deterministic_traces(self):
        rng = np.random.default_rng(7)
        problem = random_problem(rng, 10, 8, y_scale=3.0)
        cfg = SolverConfig(k=3, rng_seed=11)
        _, t1 = solve_aiht(problem, cfg)
        _, t2 = solve_aiht(problem, cfg)
        assert t1.with_zeroed_time().to_json() == t2.with_zeroed_time().to_json()


class TestAihtDebias:
    def test_zero_target(self):
        w, trace = solve_aiht_debias(zero_target_problem(), SolverConfig(k=2))
        assert not w.w.any()
        assert trace.termination is Termination.CONVERGED

    def test_recovery_not_slower_than_aiht(self):
        problem, w_star = small_recovery_instance()
        cfg = SolverConfig(k=2, rel_tol=1e-14, max_iters=20000)
        w, trace = solve_aiht_debias(problem, cfg)
        assert trace.records[-1].f < 1e-10
        np.testing.assert_allclose(w.w, w_star, atol=1e-8)
        _, plain = solve_aiht(problem, cfg)
        assert len(trace) <= len(plain)

    def test_debias_reaches_restricted_nnls_optimum(self):
        # Near-orthonormal phi: the very first projection finds the final
        # support, so convergence is down to the de-bias refinement.
        rng = np.random.default_rng(5)
        q, _ = np.linalg.qr(rng.standard_normal((30, 10)))
        w_true = np.zeros(10)
        w_true[[2, 7]] = [4.0, 2.5]
        y = q @ w_true + 0.01 * rng.standard_normal(30)
        problem = SparseRegressionProblem(q, y)
        capture = []
        w, trace = solve_aiht_debias(
            problem, SolverConfig(k=2, rel_tol=1e-12, max_iters=50), capture=capture)
        assert set(np.flatnonzero(capture[0]["w_next"]).tolist()) == {2, 7}
        assert len(trace) <= 50
        u = nnls_on_support(problem.phi[:, [2, 7]], problem.y, tol=1e-12)
        oracle = np.zeros(10)
        oracle[[2, 7]] = u
        np.testing.assert_allclose(w.w, oracle, atol=1e-8)

    def test_feasibility_every_iteration(self):
        rng = np.random.default_rng(8)
        problem = random_problem(rng, 15, 12, y_scale=4.0)
        capture = []
        w, trace = solve_aiht_debias(problem, SolverConfig(k=4, max_iters=60), capture=capture)
        assert w.sparsity <= 4 and np.all(w.w >= 0)
        for cap in capture:
            assert np.count_nonzero(cap["w_next"]) <= 4
            assert np.all(cap["w_next"] >= 0)
            assert cap["support_expanded"].size <= 12


class TestStochasticGradient:
    def test_full_batch_equals_gradient(self):
        rng = np.random.default_rng(9)
        problem = random_problem(rng, 5, 8)
        w = np.abs(rng.standard_normal(8))
        got = stochastic_gradient(problem, w, 1.0, np.random.default_rng(0))
        assert np.array_equal(got, gradient(problem, w))

    def test_unbiased_on_small_instance(self):
        rng = np.random.default_rng(10)
        problem = random_problem(rng, 5, 8)
        w = np.abs(rng.standard_normal(8))
        exact = gradient(problem, w)
        draws = np.empty((10_000, 8))
        gen = np.random.default_rng(123)
        for i in range(draws.shape[0]):
            draws[i] = stochastic_gradient(problem, w, 0.5, gen)
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(mean - exact) <= 3 * se)

    def test_zero_weights_mean(self):
        rng = np.random.default_rng(11)
        problem = random_problem(rng, 5, 8)
        exact = -2.0 * (problem.phi.T @ problem.y)
        gen = np.random.default_rng(7)
        draws = np.array([stochastic_gradient(problem, np.zeros(8), 0.5, gen)
                          for _ in range(10_000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - exact) <= 3 * se)

    def test_zero_batch_rejected(self):
        problem = zero_target_problem(4)
        with pytest.raises(ValueError):
            stochastic_gradient(problem, np.zeros(4), 0.1, np.random.default_rng(0))


class TestAihtBatched:
    def test_full_batch_trace_identical_to_exact(self):
        rng = np.random.default_rng(12)
        problem = random_problem(rng, 10, 8, y_scale=3.0)
        cfg = SolverConfig(k=3, batch_fraction=1.0, rng_seed=5, max_iters=300)
        _, batched = solve_aiht_batched(problem, cfg)
        _, exact = solve_aiht(problem, cfg)
        assert batched.with_zeroed_time().to_json() == exact.with_zeroed_time().to_json()

    def test_tiny_batch_runs_to_termination(self):
        rng = np.random.default_rng(13)
        problem = random_problem(rng, 6, 5, y_scale=2.0)
        cfg = SolverConfig(k=2, batch_fraction=0.2, rng_seed=3)
        w, trace = solve_aiht_batched(problem, cfg)
        assert w.sparsity <= 2 and np.all(w.w >= 0)
        assert trace.termination in (Termination.CONVERGED, Termination.MAX_ITERS,
                                     Termination.STALLED)
        assert len(trace) <= 500

    def test_batched_seed_reproducible(self):
        rng = np.random.default_rng(14)
        problem = random_problem(rng, 8, 6, y_scale=2.0)
        cfg = SolverConfig(k=2, batch_fraction=0.5, rng_seed=9, max_iters=50)
        _, t1 = solve_aiht_batched(problem, cfg)
        _, t2 = solve_aiht_batched(problem, cfg)
        assert t1.with_zeroed_time().to_json() == t2.with_zeroed_time().to_json()


class TestStallTermination:
    def test_two_consecutive_degenerate_steps_stop(self):
        # White-box: a gradient stub whose later values lie in null(phi)
        # makes ||phi g|S|| = 0 twice in a row without the iterates settling.
        phi = np.array([[1.0, -1.0, 2.0]])
        problem = SparseRegressionProblem(phi, [0.324543013039607])
        seq = [np.array(v, dtype=float) for v in
               ([1, -3, 0], [2, 0, -1], [2, 1, 1], [9, 3, -3], [6, 0, -3], [-2, 2, 2])]
        calls = {"i": 0}

        def stub(_z):
            i = min(calls["i"], len(seq) - 1)
            calls["i"] += 1
            return seq[i]

        w, trace = _accelerated_iht(problem, SolverConfig(k=1, max_iters=8),
                                    debias=False, gradient_fn=stub)
        assert trace.termination is Termination.STALLED
        assert np.all(w.w >= 0)


class TestTraceSerialization:
    def test_json_field_names(self):
        problem, _ = small_recovery_instance()
        _, trace = solve_aiht(problem, SolverConfig(k=2, max_iters=5))
        payload = json.loads(trace.to_json())
        assert payload["termination"] in ("converged", "max_iters", "stalled")
        assert list(payload["records"][0]) == ["iter", "f", "mu", "tau", "support", "ns"]

    def test_csv_column_order(self):
        problem, _ = small_recovery_instance()
        _, trace = solve_aiht(problem, SolverConfig(k=2, max_iters=5))
        lines = trace.to_csv().strip().splitlines()
        assert lines[0] == "iter,f,mu,tau,support,ns"
        assert len(lines) == len(trace) + 1

    def test_trace_invariants(self):
        problem, _ = small_recovery_instance()
        cfg = SolverConfig(k=2, max_iters=40)
        _, trace = solve_aiht(problem, cfg)
        assert len(trace) <= 40
        fs = trace.objectives()
        assert np.all(np.isfinite(fs)) and np.all(fs >= 0)
