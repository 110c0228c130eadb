import numpy as np
import pytest

from fedtri.core import Dims, FedtriError, TrilevelProblem, finite_diff_grad
from fedtri.cuts import Cut, generate_cut_I
from fedtri.inner import (
    InnerConfig,
    InnerSolverError,
    eval_h1,
    eval_h2,
    grad_h,
    h1_flat,
    h2_flat,
    solve_level2,
    solve_level3,
)
from fedtri.problems import build_quadratic_problem


def separable_problem(targets, d=(1, 1, None)):
    """f3j = 0.5 ||x3 - t_j||^2, f2j = 0.5 ||x2 - t_j[:d2]||^2, f1 = 0."""
    d3 = len(targets[0])
    dims = Dims(d1=1, d2=d3, d3=d3, N=len(targets))

    def ev(level, j, x1, x2, x3):
        if level == 3:
            dv = x3 - targets[j]
            return 0.5 * float(dv @ dv)
        if level == 2:
            dv = x2 - targets[j]
            return 0.5 * float(dv @ dv)
        return 0.0

    def gr(level, j, block, x1, x2, x3):
        if level == 3 and block == 3:
            return x3 - targets[j]
        if level == 2 and block == 2:
            return x2 - targets[j]
        return np.zeros(dims.block(block))

    def ch(level, j, out, inn, x1, x2, x3):
        if level in (2, 3) and out == inn == level:
            return np.eye(dims.block(out))
        return np.zeros((dims.block(out), dims.block(inn)))

    return TrilevelProblem(dims=dims, eval_fn=ev, grad_fn=gr, cross_hess_fn=ch)


@pytest.fixture(scope="module")
def quad():
    problem, oracle = build_quadratic_problem(seed=3, dims=(2, 2, 2), N=2, coupling=0.3)
    return problem, oracle


class TestInnerConfig:
    def test_k_zero_disallowed(self):
        with pytest.raises(ValueError):
            InnerConfig(K=0)

    def test_negative_penalty(self):
        with pytest.raises(ValueError):
            InnerConfig(kappa3=0.0)


class TestSolveLevel3:
    def test_consensus_argmin_separable(self):
        # Closed-form oracle: the consensus optimum of sum_j 0.5||v - t_j||^2
        # is the mean of the targets.
        rng = np.random.default_rng(0)
        targets = [rng.standard_normal(3) for _ in range(2)]
        problem = separable_problem(targets)
        cfg = InnerConfig(K=4000, eta_x=0.1, eta_z=0.1, eta_phi=0.1, kappa3=1.0)
        trace = solve_level3(problem, np.zeros(1), np.zeros(3), cfg=cfg)
        x_hat, z_hat = trace.estimate
        mean_t = np.mean(targets, axis=0)
        for v in list(x_hat) + [z_hat]:
            assert np.linalg.norm(v - mean_t) <= 1e-3

    def test_zero_step_returns_initialization(self):
        targets = [np.array([1.0, 2.0])]
        problem = separable_problem(targets)
        cfg = InnerConfig(K=1, eta_x=0.0, eta_z=0.0, eta_phi=0.0)
        init = ([np.array([0.3, -0.5])], np.array([0.1, 0.2]), [np.zeros(2)])
        trace = solve_level3(problem, np.zeros(1), np.zeros(2), init=init, cfg=cfg)
        x_hat, z_hat = trace.estimate
        assert np.array_equal(x_hat[0], init[0][0])
        assert np.array_equal(z_hat, init[1])

    def test_fixed_point_snapshots_identical(self):
        # Start exactly at the constrained optimum with zero duals: every
        # snapshot reproduces the initialization bit for bit.
        t = np.array([0.7, -0.2])
        problem = separable_problem([t, t])
        cfg = InnerConfig(K=5, eta_x=0.2, eta_z=0.2, eta_phi=0.2)
        init = ([t.copy(), t.copy()], t.copy(), [np.zeros(2), np.zeros(2)])
        trace = solve_level3(problem, np.zeros(1), np.zeros(2), init=init, cfg=cfg)
        for snap in trace.snapshots:
            assert np.array_equal(snap.z, t)
            for xj in snap.x:
                assert np.array_equal(xj, t)

    def test_snapshot_count(self, quad):
        problem, _ = quad
        cfg = InnerConfig(K=7)
        trace = solve_level3(problem, np.zeros(2), np.zeros(2), cfg=cfg)
        assert len(trace.snapshots) == 8

    def test_nonfinite_reports_round(self):
        dims = Dims(d1=1, d2=1, d3=1, N=1)
        problem = TrilevelProblem(
            dims=dims,
            eval_fn=lambda *a: 0.0,
            grad_fn=lambda level, j, block, x1, x2, x3: np.array([1e200]),
        )
        cfg = InnerConfig(K=3, eta_x=1e200, eta_z=1.0, eta_phi=1.0)
        with pytest.raises((InnerSolverError, FedtriError), match="round"):
            solve_level3(problem, np.zeros(1), np.zeros(1), cfg=cfg)


class TestEvalH1:
    def test_zero_at_own_estimate(self, quad):
        problem, _ = quad
        trace = solve_level3(problem, np.zeros(2), np.zeros(2), cfg=InnerConfig(K=3))
        x_hat, z_hat = trace.estimate
        assert eval_h1(trace, list(x_hat), z_hat) == 0.0

    def test_unit_perturbation_adds_one(self, quad):
        problem, _ = quad
        trace = solve_level3(problem, np.zeros(2), np.zeros(2), cfg=InnerConfig(K=3))
        x_hat, z_hat = trace.estimate
        z3 = z_hat.copy()
        z3[0] += 1.0
        assert eval_h1(trace, list(x_hat), z3) == pytest.approx(1.0, abs=1e-12)

    def test_matches_bruteforce_stack_norm(self, quad):
        problem, _ = quad
        rng = np.random.default_rng(5)
        trace = solve_level3(problem, rng.standard_normal(2), rng.standard_normal(2),
                             cfg=InnerConfig(K=4))
        x_hat, z_hat = trace.estimate
        offs = [rng.standard_normal(2) for _ in range(3)]
        val = eval_h1(trace, [x_hat[0] + offs[0], x_hat[1] + offs[1]], z_hat + offs[2])
        brute = sum(float(o @ o) for o in offs)
        assert val == pytest.approx(brute, rel=1e-12)

    def test_layer_check(self, quad):
        problem, _ = quad
        trace = solve_level3(problem, np.zeros(2), np.zeros(2), cfg=InnerConfig(K=2))
        with pytest.raises(FedtriError):
            eval_h2(trace, [np.zeros(2)] * 2, np.zeros(2))


def make_cut_for(problem, c_value, a2=None):
    d = problem.dims
    return Cut(
        layer="I",
        a1=np.zeros(d.d1),
        a2=np.ones(d.d2) if a2 is None else a2,
        a3=np.zeros(d.d3),
        b3=tuple(np.zeros(d.d3) for _ in range(d.N)),
        c=c_value,
        id=0,
        born_at=0,
    )


class TestSolveLevel2:
    def test_empty_polytope_reduces_to_consensus(self):
        rng = np.random.default_rng(1)
        targets = [rng.standard_normal(2) for _ in range(3)]
        problem = separable_problem(targets)
        cfg = InnerConfig(K=4000, eta_x=0.1, eta_z=0.1, eta_phi=0.1, kappa2=1.0)
        x3 = [np.zeros(2)] * 3
        trace = solve_level2(problem, np.zeros(1), np.zeros(2), x3, (), cfg=cfg)
        mean_t = np.mean(targets, axis=0)
        x_hat, z_hat = trace.estimate
        for v in list(x_hat) + [z_hat]:
            assert np.linalg.norm(v - mean_t) <= 1e-3

    def test_slack_cut_keeps_unconstrained_solution(self):
        rng = np.random.default_rng(2)
        targets = [rng.standard_normal(2) for _ in range(2)]
        problem = separable_problem(targets)
        cfg = InnerConfig(K=4000, eta_x=0.1, eta_z=0.1, eta_phi=0.1)
        x3 = [np.zeros(2)] * 2
        free = solve_level2(problem, np.zeros(1), np.zeros(2), x3, (), cfg=cfg)
        # Cut far above any value the iterates reach: slack the whole way.
        cut = make_cut_for(problem, c_value=1e3)
        constrained = solve_level2(problem, np.zeros(1), np.zeros(2), x3, (cut,), cfg=cfg)
        assert constrained.gamma_K[0] == 0.0
        assert np.linalg.norm(constrained.estimate[1] - free.estimate[1]) <= 1e-3

    def test_violated_cut_reduces_violation(self):
        rng = np.random.default_rng(3)
        targets = [rng.standard_normal(2) + 2.0 for _ in range(2)]
        problem = separable_problem(targets)
        cfg = InnerConfig(K=300, eta_x=0.1, eta_z=0.1, eta_phi=0.1)
        x3 = [np.zeros(2)] * 2
        free = solve_level2(problem, np.zeros(1), np.zeros(2), x3, (), cfg=cfg)
        # Constrain a2 . z2 <= c below the unconstrained optimum value and
        # start the unroll at that optimum, where the cut is violated.
        x_free, z_free = free.estimate
        opt_val = float(np.ones(2) @ z_free)
        cut = make_cut_for(problem, c_value=opt_val - 1.0)
        init = ([x.copy() for x in x_free], z_free.copy(),
                [np.zeros(2)] * 2, np.zeros(1), np.zeros(1))
        trace = solve_level2(problem, np.zeros(1), np.zeros(2), x3, (cut,),
                             init=init, cfg=cfg)
        viol0 = float(np.ones(2) @ trace.snapshots[0].z) - cut.c
        violK = float(np.ones(2) @ trace.snapshots[-1].z) - cut.c
        assert viol0 > 0.0
        assert violK < viol0
        assert trace.gamma_K[0] > 0.0

    def test_consensus_residual_nonincreasing_late(self):
        rng = np.random.default_rng(4)
        targets = [rng.standard_normal(2) for _ in range(2)]
        problem = separable_problem(targets)
        cfg = InnerConfig(K=200, eta_x=0.02, eta_z=0.02, eta_phi=0.02)
        trace = solve_level2(problem, np.zeros(1), np.zeros(2), [np.zeros(2)] * 2, (), cfg=cfg)
        resid = [
            sum(float((snap.x[j] - snap.z) @ (snap.x[j] - snap.z)) for j in range(2))
            for snap in trace.snapshots
        ]
        tail = resid[len(resid) // 2:]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))


class TestEvalH2:
    def test_zero_and_unit_perturbation(self, quad):
        problem, _ = quad
        trace = solve_level2(problem, np.zeros(2), np.zeros(2), [np.zeros(2)] * 2, (),
                             cfg=InnerConfig(K=3))
        x_hat, z_hat = trace.estimate
        assert eval_h2(trace, list(x_hat), z_hat) == 0.0
        x2 = [x_hat[0].copy(), x_hat[1].copy()]
        x2[1][0] += 1.0
        assert eval_h2(trace, x2, z_hat) == pytest.approx(1.0, abs=1e-12)

    def test_matches_independent_recompute(self, quad):
        problem, _ = quad
        rng = np.random.default_rng(6)
        trace = solve_level2(problem, rng.standard_normal(2), rng.standard_normal(2),
                             [rng.standard_normal(2) for _ in range(2)], (),
                             cfg=InnerConfig(K=4))
        x2 = [rng.standard_normal(2) for _ in range(2)]
        z2 = rng.standard_normal(2)
        x_hat, z_hat = trace.estimate
        brute = sum(float((a - b) @ (a - b)) for a, b in zip(x2, x_hat))
        brute += float((z2 - z_hat) @ (z2 - z_hat))
        assert eval_h2(trace, x2, z2) == pytest.approx(brute, rel=1e-12)


class TestGradH:
    def setup_traces(self, quad, with_cut=True):
        problem, _ = quad
        rng = np.random.default_rng(7)
        cfg = InnerConfig(K=3, eta_x=0.1, eta_z=0.1, eta_phi=0.1)
        z1, z2, z3 = (rng.standard_normal(2) for _ in range(3))
        x3 = [rng.standard_normal(2) for _ in range(2)]
        x2 = [rng.standard_normal(2) for _ in range(2)]
        t1 = solve_level3(problem, z1, z2, cfg=cfg)
        poly = ()
        if with_cut:
            p1 = (tuple(x3), z1, z2, z3)
            poly = (generate_cut_I(t1, p1, 0.0, 1e-2, problem.alphas,
                                   grad_mode="analytic"),)
        t2 = solve_level2(problem, z1, z3, x3, poly, cfg=cfg)
        return t1, t2, (x3, z1, z2, z3), (x2, x3, z1, z2, z3)

    def test_direct_blocks_are_twice_deviation(self, quad):
        t1, _, p1, _ = self.setup_traces(quad)
        x_hat, z_hat = t1.estimate
        g = grad_h(t1, "x3:0", p1, mode="finite-diff")
        assert np.allclose(g, 2.0 * (p1[0][0] - x_hat[0]), atol=1e-12)
        g = grad_h(t1, "z3", p1, mode="finite-diff")
        assert np.allclose(g, 2.0 * (p1[3] - z_hat), atol=1e-12)

    def test_zero_at_minimizer(self, quad):
        t1, _, _, _ = self.setup_traces(quad)
        x_hat, z_hat = t1.estimate
        point = (list(x_hat), t1.inputs["z1"], t1.inputs["z2p"], z_hat)
        for wrt in ("x3:0", "x3:1", "z3"):
            assert np.linalg.norm(grad_h(t1, wrt, point)) <= 1e-12
        # Deviation is zero, so the chain-rule terms vanish too.
        for wrt in ("z1", "z2"):
            assert np.linalg.norm(grad_h(t1, wrt, point, mode="analytic")) <= 1e-12

    def test_finite_diff_vs_analytic_cross_mode(self, quad):
        t1, t2, p1, p2 = self.setup_traces(quad)
        for trace, point, blocks in (
            (t1, p1, ("z1", "z2")),
            (t2, p2, ("z1", "z3", "x3:0", "x3:1")),
        ):
            for wrt in blocks:
                g_fd = grad_h(trace, wrt, point, mode="finite-diff")
                g_an = grad_h(trace, wrt, point, mode="analytic")
                denom = max(np.linalg.norm(g_an), 1e-9)
                assert np.linalg.norm(g_fd - g_an) / denom <= 1e-4

    def test_analytic_requires_second_derivatives(self):
        problem = separable_problem([np.zeros(2)])
        problem.cross_hess_fn = None
        trace = solve_level3(problem, np.zeros(1), np.zeros(2), cfg=InnerConfig(K=2))
        point = ([np.zeros(2)], np.zeros(1), np.zeros(2), np.zeros(2))
        with pytest.raises(FedtriError):
            grad_h(trace, "z1", point, mode="analytic")


class TestFlatAdapters:
    def test_h1_flat_consistency(self, quad):
        problem, _ = quad
        rng = np.random.default_rng(8)
        trace = solve_level3(problem, rng.standard_normal(2), rng.standard_normal(2),
                             cfg=InnerConfig(K=3))
        flat = h1_flat(trace, grad_mode="analytic")
        x3 = [rng.standard_normal(2) for _ in range(2)]
        z1, z2, z3 = (rng.standard_normal(2) for _ in range(3))
        v = flat.pack(x3, z1, z2, z3)
        assert flat.dim == v.size
        # The flat function re-runs the unroll at the packed (z1, z2').
        sub = solve_level3(problem, z1, z2, cfg=trace.cfg)
        assert flat.fn(v) == pytest.approx(eval_h1(sub, x3, z3), rel=1e-12)
        g_num = finite_diff_grad(flat.fn, v)
        g = flat.grad(v)
        assert np.linalg.norm(g_num - g) / np.linalg.norm(g) <= 1e-6

    def test_h2_flat_grad(self, quad):
        problem, _ = quad
        rng = np.random.default_rng(9)
        trace = solve_level2(problem, rng.standard_normal(2), rng.standard_normal(2),
                             [rng.standard_normal(2) for _ in range(2)], (),
                             cfg=InnerConfig(K=3))
        flat = h2_flat(trace, grad_mode="analytic")
        v = rng.standard_normal(flat.dim)
        g_num = finite_diff_grad(flat.fn, v)
        g = flat.grad(v)
        assert np.linalg.norm(g_num - g) / np.linalg.norm(g) <= 1e-6
