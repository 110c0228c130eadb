"""Outer Lagrangian, primal/dual update rules, dual projections and the gap.

The master's consensus blocks and duals follow the printed update order:
z1, z2, z3 with the previous duals, then the cut duals (projected onto
[0, sqrt(alpha4)]) using the fresh primals, then the consensus duals
(projected onto the infinity-norm box).  Dual updates differentiate the
regularized Lagrangian; the stationarity gap uses the unregularized one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    Array,
    DualState,
    FedtriError,
    PrimalState,
    TrilevelProblem,
    project_ball_sq,
    project_box_inf,
)
from .cuts import Polytope, cut_violation


class StepSizeError(FedtriError):
    pass


@dataclass(frozen=True)
class OuterConfig:
    """Step sizes, dual bounds, regularization schedule and stopping rule."""

    eta_x1: float = 0.05
    eta_x2: float = 0.05
    eta_x3: float = 0.05
    eta_z1: float = 0.05
    eta_z2: float = 0.05
    eta_z3: float = 0.05
    eta_lambda: float = 0.05
    eta_theta: float = 0.05
    alpha4: float = 1e4
    alpha5: float = 1e4
    c1_floor: float = 1e-3
    c2_floor: float = 1e-3
    tol: float = 1e-4  # target on the squared gap norm
    T_pre: int = 25
    T1: int = 10**9
    max_iters: int = 1000
    # Damp the cut-coupled primal steps by the current polytope steepness
    # (the gradient Lipschitz constant of L_p grows with the cut coefficients,
    # and the step-size prescription shrinks accordingly).  Off by default:
    # the printed updates use constant steps.
    adaptive_steps: bool = False

    def __post_init__(self):
        for name in ("eta_x1", "eta_x2", "eta_x3", "eta_z1", "eta_z2", "eta_z3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("eta_lambda", "eta_theta", "alpha4", "alpha5", "c1_floor",
                     "c2_floor", "tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.T_pre < 1 or self.T1 < 0 or self.max_iters < 1:
            raise ValueError("T_pre >= 1, T1 >= 0 and max_iters >= 1 required")

    def eta_x(self, i: int) -> float:
        return (self.eta_x1, self.eta_x2, self.eta_x3)[i - 1]

    def eta_z(self, i: int) -> float:
        return (self.eta_z1, self.eta_z2, self.eta_z3)[i - 1]

    def reg_coeffs(self, t: int) -> tuple[float, float]:
        """Non-increasing regularization pair (c1^t, c2^t) with configured floors."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        decay = (t + 1.0) ** 0.25
        c1 = max(self.c1_floor, 1.0 / (self.eta_lambda * decay))
        c2 = max(self.c2_floor, 1.0 / (self.eta_theta * decay))
        return c1, c2

    def check_floors(self, N: int, M: int = 1) -> None:
        """Floor range check against the configured tolerance.

        The admissible range ties the floors to the dual bounds through
        ``(4 M alpha4 / eta_lambda^2 + 4 N alpha5 / eta_theta^2) / tol``; the
        number of layer-II cuts M is read as 1 at configuration time.
        """
        bound = np.sqrt(
            (4.0 * M * self.alpha4 / self.eta_lambda ** 2
             + 4.0 * N * self.alpha5 / self.eta_theta ** 2) / self.tol
        )
        if not self.c1_floor < bound / self.eta_lambda:
            raise ValueError("c1_floor outside the admissible range for the configured tol")
        if not self.c2_floor < bound / self.eta_theta:
            raise ValueError("c2_floor outside the admissible range for the configured tol")


@dataclass(frozen=True)
class WorkerView:
    """Value snapshot a worker computes against; taken at iteration ``t``."""

    t: int
    state: PrimalState
    duals: DualState
    poly2: Polytope
    c1: float
    c2: float


def lagrangian(state: PrimalState, duals: DualState, poly2: Polytope,
               problem: TrilevelProblem) -> float:
    """Outer Lagrangian: objective sum, consensus duals, layer-II cut duals."""
    N = problem.dims.N
    total = 0.0
    for j in range(N):
        total += problem.eval(1, j, state.x[0][j], state.x[1][j], state.x[2][j])
        total += float(duals.theta[j] @ (state.x[0][j] - state.z[0]))
    for lam, cut in zip(duals.lam, poly2.cuts):
        total += float(lam) * cut_violation(
            cut, state.x[2], state.z[0], state.z[1], state.z[2], x2=state.x[1]
        )
    if not np.isfinite(total):
        raise FedtriError("non-finite Lagrangian value")
    return total


def regularized_lagrangian(state: PrimalState, duals: DualState, poly2: Polytope,
                           problem: TrilevelProblem, t: int, cfg: OuterConfig) -> float:
    c1, c2 = cfg.reg_coeffs(t)
    val = lagrangian(state, duals, poly2, problem)
    val -= 0.5 * c1 * float(duals.lam @ duals.lam)
    val -= 0.5 * c2 * sum(float(th @ th) for th in duals.theta)
    return val


def _cut_dual_pull(duals: DualState, poly2: Polytope, j: int, which: str) -> Array:
    """sum_l lambda_l * b_{i,j,l} for worker j's x2 or x3 block."""
    acc = None
    for lam, cut in zip(duals.lam, poly2.cuts):
        b = cut.b2[j] if which == "x2" else cut.b3[j]
        acc = lam * b if acc is None else acc + lam * b
    return acc


def grad_x_blocks(problem: TrilevelProblem, j: int, state: PrimalState,
                  duals: DualState, poly2: Polytope) -> tuple[Array, Array, Array]:
    """Gradients of L_p w.r.t. worker j's three local blocks.

    The dual regularizer does not touch primal blocks, so these also serve
    the regularized Lagrangian.
    """
    x1, x2, x3 = state.x[0][j], state.x[1][j], state.x[2][j]
    g1 = problem.grad(1, j, 1, x1, x2, x3) + duals.theta[j]
    g2 = problem.grad(1, j, 2, x1, x2, x3)
    g3 = problem.grad(1, j, 3, x1, x2, x3)
    if poly2.size:
        g2 = g2 + _cut_dual_pull(duals, poly2, j, "x2")
        g3 = g3 + _cut_dual_pull(duals, poly2, j, "x3")
    return g1, g2, g3


def grad_z_blocks(state: PrimalState, duals: DualState, poly2: Polytope,
                  N: int) -> tuple[Array, Array, Array]:
    g1 = -sum(duals.theta[j] for j in range(N))
    g2 = np.zeros_like(state.z[1])
    g3 = np.zeros_like(state.z[2])
    for lam, cut in zip(duals.lam, poly2.cuts):
        g1 = g1 + lam * cut.a1
        g2 = g2 + lam * cut.a2
        g3 = g3 + lam * cut.a3
    return g1, g2, g3


def _steepness_z(poly2: Polytope) -> tuple[float, float, float]:
    s1 = sum(float(c.a1 @ c.a1) for c in poly2.cuts)
    s2 = sum(float(c.a2 @ c.a2) for c in poly2.cuts)
    s3 = sum(float(c.a3 @ c.a3) for c in poly2.cuts)
    return s1, s2, s3


def _steepness_x(poly2: Polytope, j: int) -> tuple[float, float]:
    sb2 = sum(float(c.b2[j] @ c.b2[j]) for c in poly2.cuts)
    sb3 = sum(float(c.b3[j] @ c.b3[j]) for c in poly2.cuts)
    return sb2, sb3


def worker_step(problem: TrilevelProblem, j: int, view: WorkerView,
                cfg: OuterConfig) -> tuple[Array, Array, Array]:
    """One local gradient step on the stale regularized Lagrangian view."""
    g1, g2, g3 = grad_x_blocks(problem, j, view.state, view.duals, view.poly2)
    eta2, eta3 = cfg.eta_x2, cfg.eta_x3
    if cfg.adaptive_steps and view.poly2.size:
        sb2, sb3 = _steepness_x(view.poly2, j)
        eta2 = eta2 / (1.0 + sb2)
        eta3 = eta3 / (1.0 + sb3)
    a1, a2, a3 = problem.alphas
    x1 = project_ball_sq(view.state.x[0][j] - cfg.eta_x1 * g1, a1)
    x2 = project_ball_sq(view.state.x[1][j] - eta2 * g2, a2)
    x3 = project_ball_sq(view.state.x[2][j] - eta3 * g3, a3)
    for g in (x1, x2, x3):
        if not np.all(np.isfinite(g)):
            raise FedtriError(f"non-finite worker update for worker {j}")
    return x1, x2, x3


def master_step(state: PrimalState, duals: DualState, poly2: Polytope,
                problem: TrilevelProblem, cfg: OuterConfig, t: int) -> tuple[PrimalState, DualState]:
    """Consensus and dual updates in the printed order.

    ``state.x`` must already hold the freshly applied worker blocks.  Returns
    updated copies; inner duals carry over untouched.
    """
    N = problem.dims.N
    c1, c2 = cfg.reg_coeffs(t)
    new_state = state.copy()
    new_duals = duals.copy()
    ez1, ez2, ez3 = cfg.eta_z1, cfg.eta_z2, cfg.eta_z3
    if cfg.adaptive_steps and poly2.size:
        # The cut-dual game is stable when the z-side curvature budget
        # sum_i eta_zi ||a_i||^2 stays below the regularization coefficient;
        # throttle the consensus steps to a fraction of that budget.
        s1, s2, s3 = _steepness_z(poly2)
        k_budget = ez1 * s1 + ez2 * s2 + ez3 * s3
        cap = 0.25 * c1
        if k_budget > cap:
            scale = cap / k_budget
            ez1, ez2, ez3 = ez1 * scale, ez2 * scale, ez3 * scale

    gz1, _, _ = grad_z_blocks(state, duals, poly2, N)
    new_state.z[0] = project_ball_sq(state.z[0] - ez1 * gz1, problem.alphas[0])
    _, gz2, _ = grad_z_blocks(new_state, duals, poly2, N)
    new_state.z[1] = project_ball_sq(state.z[1] - ez2 * gz2, problem.alphas[1])
    _, _, gz3 = grad_z_blocks(new_state, duals, poly2, N)
    new_state.z[2] = project_ball_sq(state.z[2] - ez3 * gz3, problem.alphas[2])

    lam_cap = np.sqrt(cfg.alpha4)
    lam = np.array(duals.lam, float)
    for l, cut in enumerate(poly2.cuts):
        resid = cut_violation(cut, new_state.x[2], new_state.z[0], new_state.z[1],
                              new_state.z[2], x2=new_state.x[1])
        lam[l] = np.clip(lam[l] + cfg.eta_lambda * (resid - c1 * lam[l]), 0.0, lam_cap)
    new_duals.lam = lam

    theta_box = np.sqrt(cfg.alpha5) / problem.dims.d1
    new_duals.theta = [
        project_box_inf(
            duals.theta[j]
            + cfg.eta_theta * (new_state.x[0][j] - new_state.z[0] - c2 * duals.theta[j]),
            theta_box,
        )
        for j in range(N)
    ]
    if not new_state.is_finite():
        raise FedtriError("non-finite master update")
    return new_state, new_duals


@dataclass
class GapVector:
    """Blocks of the stationarity gap; squared norm drives the stopping rule."""

    gx: list[list[Array]]
    gz: list[Array]
    glam: Array
    gtheta: list[Array]

    @property
    def sq_norm(self) -> float:
        total = 0.0
        for row in self.gx:
            for g in row:
                total += float(g @ g)
        for g in self.gz:
            total += float(g @ g)
        total += float(self.glam @ self.glam)
        for g in self.gtheta:
            total += float(g @ g)
        return total


def stationarity_gap(state: PrimalState, duals: DualState, poly2: Polytope,
                     problem: TrilevelProblem, cfg: OuterConfig) -> GapVector:
    """Primal gradients plus projected dual residuals of the unregularized L_p."""
    N = problem.dims.N
    gx: list[list[Array]] = [[], [], []]
    for j in range(N):
        g1, g2, g3 = grad_x_blocks(problem, j, state, duals, poly2)
        gx[0].append(g1)
        gx[1].append(g2)
        gx[2].append(g3)
    gz = list(grad_z_blocks(state, duals, poly2, N))

    lam_cap = np.sqrt(cfg.alpha4)
    glam = np.zeros(poly2.size)
    for l, cut in enumerate(poly2.cuts):
        resid = cut_violation(cut, state.x[2], state.z[0], state.z[1], state.z[2],
                              x2=state.x[1])
        proj = np.clip(duals.lam[l] + cfg.eta_lambda * resid, 0.0, lam_cap)
        glam[l] = (duals.lam[l] - proj) / cfg.eta_lambda

    theta_box = np.sqrt(cfg.alpha5) / problem.dims.d1
    gtheta = []
    for j in range(N):
        step = duals.theta[j] + cfg.eta_theta * (state.x[0][j] - state.z[0])
        gtheta.append((duals.theta[j] - project_box_inf(step, theta_box)) / cfg.eta_theta)
    return GapVector(gx=gx, gz=gz, glam=glam, gtheta=gtheta)


@dataclass(frozen=True)
class StepSizeCheck:
    name: str
    value: float
    bound: float
    ok: bool


@dataclass(frozen=True)
class StepSizePlan:
    eta_x: float  # shared by all x and z blocks
    checks: tuple[StepSizeCheck, ...]
    binding: str  # name of the tightest check

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)


def theorem1_step_sizes(
    L_est: float,
    eta_lambda: float,
    eta_theta: float,
    c1_floor: float,
    c2_floor: float,
    M: int = 1,
    N: int = 1,
    gamma_const: float = 1.0,
    k1: Optional[float] = None,
    tau: Optional[int] = None,
    strict: bool = False,
) -> StepSizePlan:
    """Primal step size prescription plus the dual step-size cap checks.

    The shared primal step is ``2 / (L + eta_lambda M L^2 + eta_theta N L^2 +
    8 (M gamma L^2 / (eta_lambda c1_floor^2) + N gamma L^2 / (eta_theta
    c2_floor^2)))``.  The cap checks on eta_theta and eta_lambda use the
    t = 0 regularizers; they are reported (and the tightest named), and only
    raised as errors under ``strict`` since the printed caps are mutually
    unsatisfiable for any positive step whenever the schedule start exceeds
    the floor.
    """
    if L_est <= 0:
        raise StepSizeError("Lipschitz estimate must be positive")
    L2 = L_est * L_est
    denom = (
        L_est
        + eta_lambda * M * L2
        + eta_theta * N * L2
        + 8.0 * (M * gamma_const * L2 / (eta_lambda * c1_floor ** 2)
                 + N * gamma_const * L2 / (eta_theta * c2_floor ** 2))
    )
    if denom <= 0 or not np.isfinite(denom):
        raise StepSizeError("no positive feasible step: denominator is not positive")
    eta = 2.0 / denom

    c1_0 = max(c1_floor, 1.0 / eta_lambda)
    c2_0 = max(c2_floor, 1.0 / eta_theta)
    checks = [
        StepSizeCheck(
            name="eta_theta <= 2/(L+2c2_0)",
            value=eta_theta,
            bound=2.0 / (L_est + 2.0 * c2_0),
            ok=eta_theta <= 2.0 / (L_est + 2.0 * c2_0),
        ),
        StepSizeCheck(
            name="eta_lambda < 2/(L+2c1_0)",
            value=eta_lambda,
            bound=2.0 / (L_est + 2.0 * c1_0),
            ok=eta_lambda < 2.0 / (L_est + 2.0 * c1_0),
        ),
    ]
    if tau is not None and k1 is not None:
        cap = 1.0 / (30.0 * tau * k1 * N * L2)
        checks.append(
            StepSizeCheck(
                name="eta_lambda < 1/(30 tau k1 N L^2)",
                value=eta_lambda,
                bound=cap,
                ok=eta_lambda < cap,
            )
        )
    binding = min(checks, key=lambda c: c.bound - c.value).name
    if strict:
        for c in checks:
            if not c.ok:
                raise StepSizeError(f"violated: {c.name} (value {c.value}, bound {c.bound})")
    return StepSizePlan(eta_x=eta, checks=tuple(checks), binding=binding)


def probe_lipschitz(problem: TrilevelProblem, n_pairs: int = 100, seed: int = 0,
                    scale: float = 1.0) -> float:
    """Max gradient-difference ratio of the objective sum over random pairs."""
    rng = np.random.default_rng(seed)
    d = problem.dims

    def full_grad(x1, x2, x3):
        parts = []
        for block in (1, 2, 3):
            g = None
            for j in range(d.N):
                gj = problem.grad(1, j, block, x1, x2, x3)
                g = gj if g is None else g + gj
            parts.append(g)
        return np.concatenate(parts)

    best = 0.0
    for _ in range(n_pairs):
        a = [scale * rng.standard_normal(d.block(i)) for i in (1, 2, 3)]
        b = [scale * rng.standard_normal(d.block(i)) for i in (1, 2, 3)]
        diff = np.concatenate([u - v for u, v in zip(a, b)])
        nd = float(np.linalg.norm(diff))
        if nd == 0.0:
            continue
        gd = float(np.linalg.norm(full_grad(*a) - full_grad(*b)))
        best = max(best, gd / nd)
    if best == 0.0:
        best = 1.0
    return best
