"""Leader-level null control: dual solves, the dual functional, and HUM.

The leader drives the Nash-closed loop: the reachability operator maps
terminal adjoint data through the coupled dual system to a control
g = psi_1 chi_omega (one level behind the step it feeds, matching the
solver's native pairing) and back through the coupled optimality system
to the terminal state.  Because the dual system is solved through the
transposed factorization of the primal one, this Gramian is symmetric
positive semidefinite to round-off and the discrete duality identity

    sum_k dt <g^k, psi_1^{k-1}>_omega + <y^0, psi^0>
        - sum_i alpha_i sum_k dt <y_d^i, gamma^i>_Od  =  <y(T), psi^T>

holds for arbitrary data.  Approximate null control comes from the
penalized normal equations (G + eps I) psihat = -b, where b is the free
(g = 0) terminal state; the controlled terminal state then equals
-eps * psihat up to solver residual, which is the decay the epsilon
ladder measures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceError
from .grid import SpaceTimeGrid
from .nash import (ControlProfile, NashSolution, check_nash_stationarity,
                   follower_cost, leader_cost, solve_nash_optimality)
from .pde import CoupledSolution, TwoComponentState

__all__ = [
    "TerminalAdjointData", "DualTrajectories", "HUMResult",
    "solve_dual", "evaluate_F_tilde", "gramian_apply", "free_terminal_state",
    "minimize_F_tilde", "verify_duality_identity", "run_hierarchic_control",
    "ControlReport",
]


@dataclass
class TerminalAdjointData:
    """Stacked terminal data (psi_1^T, psi_2^T) for the dual system."""

    psi_T: np.ndarray

    @classmethod
    def from_pair(cls, c1, c2) -> "TerminalAdjointData":
        v = np.concatenate([np.asarray(c1, dtype=float),
                            np.asarray(c2, dtype=float)])
        if not np.all(np.isfinite(v)):
            raise ValueError("terminal adjoint data must be finite")
        return cls(v)


@dataclass
class DualTrajectories:
    """Solution bundle of the coupled dual system."""

    psi: TwoComponentState
    gamma1: TwoComponentState
    gamma2: TwoComponentState
    theta: TwoComponentState
    residual: float
    backend: str


def _as_terminal_vector(disc, psi_T) -> np.ndarray:
    if isinstance(psi_T, TerminalAdjointData):
        return psi_T.psi_T
    v = np.asarray(psi_T, dtype=float).ravel()
    if v.shape != (2 * disc.grid.n_nodes,):
        raise ValueError("terminal data must stack two spatial arrays")
    return v


def x_inner(disc, u, v) -> float:
    """Spatial L2 product of stacked component vectors."""
    return disc.grid.node_weight * float(np.dot(np.ravel(u), np.ravel(v)))


def x_norm(disc, u) -> float:
    return float(np.sqrt(max(x_inner(disc, u, u), 0.0)))


def solve_dual(disc, psi_T, backend: Optional[str] = None) -> DualTrajectories:
    """Coupled dual solve; theta is the alpha-weighted sum of the gammas."""
    from .pde import solve_coupled_forward_backward
    backend = backend or disc.solver.coupled_backend
    v = _as_terminal_vector(disc, psi_T)
    sol = solve_coupled_forward_backward(
        disc.system(), "dual", backend=backend,
        tol=disc.solver.sweep_tol, max_iters=disc.solver.sweep_maxiter,
        psi_T=v)
    theta = TwoComponentState(
        disc.alphas[0] * sol.gamma1.data + disc.alphas[1] * sol.gamma2.data,
        disc.grid, "forward")
    return DualTrajectories(psi=sol.psi, gamma1=sol.gamma1, gamma2=sol.gamma2,
                            theta=theta, residual=sol.residual,
                            backend=sol.backend)


def extract_leader_control(disc, psi: TwoComponentState) -> ControlProfile:
    """g^k = psi_1^{k-1} chi_omega; the level-0 slot is unused and left 0."""
    grid, n = disc.grid, disc.grid.n_nodes
    g = np.zeros((grid.n_t + 1, n))
    g[1:] = psi.data[: grid.n_t, :n] * disc.omega.indicator
    return ControlProfile(g, disc.omega, grid)


def _observation_quadratic(disc, psi_a: TwoComponentState,
                           psi_b: TwoComponentState) -> float:
    """sum_k dt <psi_1^{k-1}(a), psi_1^{k-1}(b)>_omega; the Gramian form."""
    grid, n = disc.grid, disc.grid.n_nodes
    w = disc.omega.indicator * grid.node_weight
    block_a = psi_a.data[: grid.n_t, :n]
    block_b = psi_b.data[: grid.n_t, :n]
    return grid.dt * float(np.sum((block_a * block_b) @ w))


def gramian_apply(disc, psi_T) -> np.ndarray:
    """Terminal state reached by the control extracted from the dual solve.

    Dual solve, g = psi_1 chi_omega, then the optimality system with zero
    initial data and zero targets; returns y(T).  Symmetric positive
    semidefinite in the spatial product by construction.
    """
    v = _as_terminal_vector(disc, psi_T)
    dual = solve_dual(disc, v, backend="assembled")
    g = extract_leader_control(disc, dual.psi)
    sys = disc.system()
    sol = sys.solve_primal(g_levels=g.values, y0=None, yd=None)
    return sol.y.data[disc.grid.n_t].copy()


def free_terminal_state(disc) -> np.ndarray:
    """Terminal state of the g = 0 optimality run with the actual data."""
    sol = disc.system().solve_primal(g_levels=None, y0=disc.y0_vec, yd=disc.yd)
    return sol.y.data[disc.grid.n_t].copy()


def evaluate_F_tilde(disc, psi_T, dual: Optional[DualTrajectories] = None) -> float:
    """The dual functional: observation energy plus the data pairings."""
    v = _as_terminal_vector(disc, psi_T)
    if dual is None:
        dual = solve_dual(disc, v, backend="assembled")
    grid, n = disc.grid, disc.grid.n_nodes
    quad = 0.5 * _observation_quadratic(disc, dual.psi, dual.psi)
    lin = x_inner(disc, disc.y0_vec, dual.psi.data[0])
    wt = grid.time_weights()
    od_w = disc.od.indicator * grid.node_weight
    for i, gam in enumerate((dual.gamma1, dual.gamma2)):
        if disc.yd[i] is None:
            continue
        pair = (disc.yd[i][0] * gam.data[:, :n] +
                disc.yd[i][1] * gam.data[:, n:])
        lin -= disc.alphas[i] * float(wt @ (pair @ od_w))
    return quad + lin


def verify_duality_identity(disc, g_levels, primal: CoupledSolution,
                            dual: DualTrajectories) -> float:
    """Normalized gap of the discrete duality identity.

    Both sides are evaluated with the solver's native pairings; the
    terminal term <y(T), psi^T> is kept, so the identity holds for
    arbitrary data and any control, not only at the null-control limit.
    """
    grid, n = disc.grid, disc.grid.n_nodes
    om_w = disc.omega.indicator * grid.node_weight
    od_w = disc.od.indicator * grid.node_weight
    wt = grid.time_weights()

    terms = []
    if g_levels is None:
        terms.append(0.0)
    else:
        pair = np.asarray(g_levels)[1:] * dual.psi.data[: grid.n_t, :n]
        terms.append(grid.dt * float(np.sum(pair @ om_w)))
    terms.append(x_inner(disc, disc.y0_vec, dual.psi.data[0]))
    for i, gam in enumerate((dual.gamma1, dual.gamma2)):
        if disc.yd[i] is None:
            terms.append(0.0)
            continue
        pair = (disc.yd[i][0] * gam.data[:, :n] +
                disc.yd[i][1] * gam.data[:, n:])
        terms.append(-disc.alphas[i] * float(wt @ (pair @ od_w)))
    psi_T = dual.psi.data[grid.n_t]
    rhs = x_inner(disc, primal.y.data[grid.n_t], psi_T)
    gap = abs(sum(terms) - rhs)
    scale = sum(abs(t) for t in terms) + abs(rhs)
    return gap / scale if scale > 0 else gap


@dataclass
class HUMResult:
    """One penalized minimization of the dual functional."""

    psi_T_hat: np.ndarray
    g_bar: ControlProfile
    epsilon: float
    terminal_norm: float
    leader_cost: float
    follower_costs: tuple
    cg_iterations: int
    cg_relative_residual: float
    duality_residual: float
    variational_residual: float
    y_terminal: np.ndarray
    nash: NashSolution
    state: Optional[TwoComponentState] = None
    f_history: list = field(default_factory=list, repr=False)


def _cg_history(apply_A, rhs, tol, maxiter, functional):
    """Plain CG on an SPD operator, recording the quadratic objective."""
    x = np.zeros_like(rhs)
    Ax = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = float(np.dot(r, r))
    rhs_norm = np.sqrt(rs)
    history = []
    if rhs_norm == 0.0:
        return x, 0, 0.0, history
    it = 0
    while it < maxiter and np.sqrt(rs) > tol * rhs_norm:
        Ap = apply_A(p)
        denom = float(np.dot(p, Ap))
        if denom <= 0.0:
            raise ConvergenceError(
                "gramian lost positive definiteness in CG "
                f"(curvature {denom:.3e})", residual=np.sqrt(rs) / rhs_norm,
                iterations=it)
        alpha = rs / denom
        x += alpha * p
        Ax += alpha * Ap
        history.append(functional(x, Ax))
        r -= alpha * Ap
        rs_new = float(np.dot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    rel = np.sqrt(rs) / rhs_norm
    if rel > tol:
        raise ConvergenceError(
            f"penalized normal equations stalled at residual {rel:.3e} "
            f"after {it} iterations", residual=rel, iterations=it)
    return x, it, float(rel), history


def minimize_F_tilde(disc, epsilon: float, tol: Optional[float] = None,
                     maxiter: Optional[int] = None,
                     n_check_directions: int = 20) -> HUMResult:
    """Penalized HUM: solve (G + eps I) psihat = -b and close the loop.

    b is the free terminal state, so the first-order condition of the
    penalized dual functional is exactly the solved linear system; the
    reported variational residual samples it against random directions.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    opts = disc.solver
    tol = opts.cg_tol if tol is None else tol
    maxiter = opts.cg_maxiter if maxiter is None else maxiter
    b = free_terminal_state(disc)
    wx = disc.grid.node_weight

    def apply_A(v):
        return gramian_apply(disc, v) + epsilon * v

    def functional(x, Ax):
        return wx * (0.5 * float(np.dot(Ax, x)) + float(np.dot(b, x)))

    psi_hat, iters, rel, history = _cg_history(apply_A, -b, tol, maxiter,
                                               functional)
    dual = solve_dual(disc, psi_hat, backend="assembled")
    g_bar = extract_leader_control(disc, dual.psi)
    nash, sol = solve_nash_optimality(disc, g_bar, backend="assembled")
    y_T = sol.y.data[disc.grid.n_t].copy()
    terminal_norm = x_norm(disc, y_T)

    # first-order condition sampled against random directions
    residual_vec = gramian_apply(disc, psi_hat) + epsilon * psi_hat + b
    rng = disc.rng(303)
    b_norm = x_norm(disc, b)
    worst = 0.0
    for _ in range(n_check_directions):
        d = rng.standard_normal(residual_vec.shape)
        val = abs(x_inner(disc, residual_vec, d)) / (x_norm(disc, d) + 1e-300)
        worst = max(worst, val)
    variational = worst / b_norm if b_norm > 0 else worst

    duality_res = verify_duality_identity(disc, g_bar.values, sol, dual)
    fcosts = tuple(follower_cost(disc, i, sol.y, nash.h_bar[i]) for i in (0, 1))
    return HUMResult(psi_T_hat=psi_hat, g_bar=g_bar, epsilon=float(epsilon),
                     terminal_norm=terminal_norm,
                     leader_cost=leader_cost(disc, g_bar.values),
                     follower_costs=fcosts,
                     cg_iterations=iters, cg_relative_residual=rel,
                     duality_residual=duality_res,
                     variational_residual=variational,
                     y_terminal=y_T, nash=nash, state=sol.y,
                     f_history=history)


@dataclass
class ControlReport:
    """End-to-end hierarchic control run over an epsilon ladder."""

    entries: list
    y_free_norm: float
    stationarity: list
    hypothesis: dict


def run_hierarchic_control(disc, epsilons: Sequence[float],
                           stationarity_directions: int = 20) -> ControlReport:
    """Full pipeline: HUM per epsilon, then the Nash loop diagnostics.

    Hypothesis violations (empty Od & omega overlap, unsigned coupling,
    small mu) warn and proceed; the report records their status.
    """
    disc.warn_hypotheses()
    y_free = free_terminal_state(disc)
    y_free_norm = x_norm(disc, y_free)
    entries, stationarity = [], []
    for eps in epsilons:
        res = minimize_F_tilde(disc, eps)
        entries.append(res)
        stationarity.append(check_nash_stationarity(
            disc, res.g_bar, res.nash.h_bar,
            n_directions=stationarity_directions))
    return ControlReport(entries=entries, y_free_norm=y_free_norm,
                         stationarity=stationarity,
                         hypothesis=disc.hypothesis_report())
