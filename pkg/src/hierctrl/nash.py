"""Follower game: control-to-state operators and the Nash equilibrium.

The two followers act through L2 spaces over their patches; the discrete
control space keeps the interior time levels only (levels 1..n_t-1),
since the weighted penalty rho*^2 blows up at t in {0, T} and the
equilibrium formula damps the controls to zero there anyway.

Two independent routes to the equilibrium pair are provided:

* operator route: the coercive equation K h = v solved matrix-free with
  GMRES, Jacobi-preconditioned by the diagonal weight mu_i rho*^2(t);
* optimality route: the assembled coupled state/adjoint solve, with the
  controls read off the adjoint first components.

Both routes express the same finite-dimensional stationarity conditions,
so they agree to solver tolerance.  The control-to-state maps and their
adjoints are exact discrete transposes (same LU factors, transposed
solves), which the whole construction leans on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, HypothesisWarning
from .grid import RegionMask, SpaceTimeGrid
from .pde import TwoComponentState

__all__ = [
    "ControlProfile", "FollowerFunctionalSpec", "NashSolution",
    "CoercivityReport", "apply_Lambda", "apply_Lambda_star", "apply_K",
    "coercivity_tau", "solve_nash_operator", "solve_nash_optimality",
    "check_nash_stationarity", "follower_cost", "leader_cost",
]


@dataclass
class ControlProfile:
    """Scalar control supported on (mask x time window)."""

    values: np.ndarray
    mask: RegionMask
    grid: SpaceTimeGrid
    window: Optional[tuple] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expect = (self.grid.n_t + 1, self.grid.n_nodes)
        if vals.shape != expect:
            raise ValueError(f"control shape {vals.shape} != {expect}")
        vals = vals * self.mask.indicator
        if self.window is not None:
            ka, kb = self.grid.window_levels(self.window)
            keep = np.zeros(self.grid.n_t + 1)
            keep[ka: kb + 1] = 1.0
            vals = vals * keep[:, None]
        self.values = vals

    @classmethod
    def zero(cls, grid: SpaceTimeGrid, mask: RegionMask) -> "ControlProfile":
        return cls(np.zeros((grid.n_t + 1, grid.n_nodes)), mask, grid)

    def norm(self) -> float:
        """L2(mask x (0,T)) norm under the package quadrature."""
        w = self.grid.time_weights()
        sq = (self.values * self.values) @ (self.mask.indicator *
                                            self.grid.node_weight)
        return float(np.sqrt(w @ sq))


@dataclass
class FollowerFunctionalSpec:
    """Data of one follower cost: tracking weight, penalty, target."""

    alpha: float
    mu: float
    target: Optional[tuple]      # (c1, c2) level arrays on Od, or None
    rho_star_inv2: np.ndarray

    def __post_init__(self):
        if self.alpha <= 0 or self.mu <= 0:
            raise ValueError("alpha and mu must be positive")


def follower_spec(disc, i: int) -> FollowerFunctionalSpec:
    return FollowerFunctionalSpec(alpha=disc.alphas[i], mu=disc.mus[i],
                                  target=disc.yd[i],
                                  rho_star_inv2=disc.weights.rho_star_inv2)


@dataclass
class NashSolution:
    """Equilibrium pair with solver provenance."""

    h_bar: tuple                 # pair of ControlProfile
    route: str
    residuals: dict
    iterations: int


@dataclass
class CoercivityReport:
    """Operator-norm bounds and the induced coercivity data."""

    norm_bounds: tuple           # certified upper bounds of |Lambda_i chi_Od|^2
    norm_estimates: tuple        # converged Rayleigh values (lower bounds)
    thresholds: tuple
    tau: float
    rho0: float
    iterations: tuple
    alpha_other: tuple = (1.0, 1.0)

    def with_mus(self, mus, rho0) -> "CoercivityReport":
        tau = min(mus[i] * rho0 ** 2 - 0.25 * self.alpha_other[i] * self.norm_bounds[i]
                  for i in (0, 1))
        return CoercivityReport(self.norm_bounds, self.norm_estimates,
                                self.thresholds, float(tau), rho0,
                                self.iterations, self.alpha_other)


# ---------------------------------------------------------------------------
# control-to-state operators
# ---------------------------------------------------------------------------

def _forward_chain(disc, sources_levels: np.ndarray) -> np.ndarray:
    """Zero-initial forward sweep; sources_levels is (n_t+1, 2n)."""
    grid = disc.grid
    data = np.zeros((grid.n_t + 1, 2 * grid.n_nodes))
    for k in range(1, grid.n_t + 1):
        data[k] = disc.ops.solve(k, data[k - 1] + grid.dt * sources_levels[k])
    return data


def _backward_chain(disc, sources_levels: np.ndarray) -> np.ndarray:
    """Zero-terminal transposed sweep; source level k lands on level k-1."""
    grid = disc.grid
    data = np.zeros((grid.n_t + 1, 2 * grid.n_nodes))
    for k in range(grid.n_t, 0, -1):
        data[k - 1] = disc.ops.solve_transpose(
            k, data[k] + grid.dt * sources_levels[k])
    return data


def apply_Lambda(disc, i: int, h_values: np.ndarray) -> TwoComponentState:
    """State response to follower i: first-component source h chi_i, zero data."""
    grid, n = disc.grid, disc.grid.n_nodes
    src = np.zeros((grid.n_t + 1, 2 * n))
    src[:, :n] = np.asarray(h_values, dtype=float) * disc.omega_i[i].indicator
    return TwoComponentState(_forward_chain(disc, src), grid, "forward")


def _lambda_pair(disc, h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    """Combined response Lambda_1 h_1 + Lambda_2 h_2 in one sweep."""
    grid, n = disc.grid, disc.grid.n_nodes
    src = np.zeros((grid.n_t + 1, 2 * n))
    src[:, :n] = (h1 * disc.omega_i[0].indicator
                  + h2 * disc.omega_i[1].indicator)
    return _forward_chain(disc, src)


def apply_Lambda_star(disc, i: int, w_data: np.ndarray) -> np.ndarray:
    """Adjoint of apply_Lambda: restriction of the first adjoint component.

    w_data is a (n_t+1, 2n) trajectory.  The output lives on the control
    space: levels 1..n_t-1, supported on the follower patch, with the
    one-level stagger that makes <Lambda h, w>_Q = <h, Lambda* w> exact.
    """
    grid, n = disc.grid, disc.grid.n_nodes
    phi = _backward_chain(disc, np.asarray(w_data, dtype=float))
    out = np.zeros((grid.n_t + 1, n))
    out[1: grid.n_t] = phi[0: grid.n_t - 1, :n] * disc.omega_i[i].indicator
    return out


def _restrict_interior(disc, values: np.ndarray, i: int) -> np.ndarray:
    """Zero everything outside the control degrees of freedom."""
    out = values * disc.omega_i[i].indicator
    out[0] = 0.0
    out[disc.grid.n_t] = 0.0
    return out


def _rho2_interior(disc) -> np.ndarray:
    """mu-free weight rho*^2 per level, zero at the unused endpoints."""
    grid = disc.grid
    rho2 = np.zeros(grid.n_t + 1)
    rho2[1: grid.n_t] = disc.weights.rho_star[1: grid.n_t] ** 2
    if not np.all(np.isfinite(rho2)):
        raise ValueError("rho*^2 overflows on this grid; decrease s "
                         "(or use s='auto')")
    return rho2


def apply_K(disc, h_pair) -> tuple:
    """The Nash operator: penalty weight plus adjointed tracking response."""
    h1 = _restrict_interior(disc, np.asarray(h_pair[0], dtype=float), 0)
    h2 = _restrict_interior(disc, np.asarray(h_pair[1], dtype=float), 1)
    n = disc.grid.n_nodes
    y = _lambda_pair(disc, h1, h2)
    od = np.concatenate([disc.od.indicator, disc.od.indicator])
    w = y * od
    rho2 = _rho2_interior(disc)
    out = []
    for i, h in enumerate((h1, h2)):
        term = disc.mus[i] * rho2[:, None] * h
        if disc.alphas[i] != 0.0:
            term = term + disc.alphas[i] * apply_Lambda_star(disc, i, w)
        out.append(_restrict_interior(disc, term, i))
    return tuple(out)


# ---------------------------------------------------------------------------
# control-space vector packing (for the Krylov route)
# ---------------------------------------------------------------------------

class _DofMap:
    def __init__(self, disc):
        self.grid = disc.grid
        self.nodes = [np.flatnonzero(m.indicator) for m in disc.omega_i]
        self.kt = self.grid.n_t - 1           # interior levels 1..n_t-1
        self.sizes = [self.kt * len(nd) for nd in self.nodes]
        self.total = sum(self.sizes)
        # H-space weight of every dof (uniform: dt * node weight)
        self.weight = self.grid.dt * self.grid.node_weight

    def pack(self, pair) -> np.ndarray:
        out = np.empty(self.total)
        off = 0
        for i in (0, 1):
            block = np.asarray(pair[i])[1: self.grid.n_t][:, self.nodes[i]]
            out[off: off + self.sizes[i]] = block.ravel()
            off += self.sizes[i]
        return out

    def unpack(self, vec: np.ndarray) -> tuple:
        out = []
        off = 0
        for i in (0, 1):
            full = np.zeros((self.grid.n_t + 1, self.grid.n_nodes))
            block = vec[off: off + self.sizes[i]].reshape(self.kt, len(self.nodes[i]))
            full[1: self.grid.n_t][:, self.nodes[i]] = block
            out.append(full)
            off += self.sizes[i]
        return tuple(out)

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return self.weight * float(np.dot(u, v))

    def norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(self.inner(u, u)))


def h_inner(disc, a_pair, b_pair) -> float:
    """Product of two control pairs in H = H_1 x H_2."""
    dm = _DofMap(disc)
    return dm.inner(dm.pack(a_pair), dm.pack(b_pair))


# ---------------------------------------------------------------------------
# coercivity thresholds
# ---------------------------------------------------------------------------

def coercivity_tau(disc, mus: Optional[Sequence[float]] = None) -> CoercivityReport:
    """Operator norms of the masked response maps and the induced bounds.

    Power iteration on Lambda_i* chi_Od Lambda_i gives a Rayleigh value
    converging to |Lambda_i chi_Od|^2 from below; the symmetric residual
    bound turns it into a certified upper bound, so the reported
    thresholds are safe (slightly conservative) and tau is a genuine
    coercivity constant.
    """
    dm = _DofMap(disc)
    opts = disc.solver
    od = np.concatenate([disc.od.indicator, disc.od.indicator])
    norms_up, norms_est, iters = [], [], []
    rng = disc.rng(101)
    for i in (0, 1):
        nodes = dm.nodes[i]

        def op(vec, i=i, nodes=nodes):
            h = np.zeros((disc.grid.n_t + 1, disc.grid.n_nodes))
            h[1: disc.grid.n_t][:, nodes] = vec.reshape(dm.kt, len(nodes))
            y = apply_Lambda(disc, i, h).data * od
            return apply_Lambda_star(disc, i, y)[1: disc.grid.n_t][:, nodes].ravel()

        # Rayleigh quotients in the H-product equal the plain l2 ones
        # because the quadrature weight is one uniform scalar.
        v = rng.standard_normal(dm.sizes[i])
        v /= np.linalg.norm(v)
        lam_old, lam_val, res = 0.0, 0.0, 0.0
        it = 0
        for it in range(1, opts.power_maxiter + 1):
            Tv = op(v)
            lam_val = float(np.dot(Tv, v))
            res = float(np.linalg.norm(Tv - lam_val * v))
            nrm = float(np.linalg.norm(Tv))
            if nrm == 0.0:
                lam_val, res = 0.0, 0.0
                break
            v = Tv / nrm
            if it > 1 and abs(lam_val - lam_old) <= opts.power_tol * max(lam_val, 1e-300):
                break
            lam_old = lam_val
        else:
            raise ConvergenceError(
                f"operator-norm power iteration exhausted {opts.power_maxiter} "
                f"iterations (last change {abs(lam_val - lam_old):.3e})",
                residual=abs(lam_val - lam_old), iterations=opts.power_maxiter)
        norms_est.append(lam_val)
        norms_up.append(lam_val + res)
        iters.append(it)

    rho0 = disc.weights.rho0
    alpha_other = (disc.alphas[1], disc.alphas[0])
    thresholds = tuple(alpha_other[i] * norms_up[i] / (4.0 * rho0 ** 2)
                       for i in (0, 1))
    if mus is None:
        mus = disc.mus
    tau = min(mus[i] * rho0 ** 2 - 0.25 * alpha_other[i] * norms_up[i]
              for i in (0, 1))
    return CoercivityReport(norm_bounds=tuple(norms_up),
                            norm_estimates=tuple(norms_est),
                            thresholds=thresholds, tau=float(tau),
                            rho0=rho0, iterations=tuple(iters),
                            alpha_other=alpha_other)


# ---------------------------------------------------------------------------
# the two equilibrium routes
# ---------------------------------------------------------------------------

def _nash_rhs(disc, g_levels: Optional[np.ndarray]):
    """v_i = alpha_i Lambda_i* [ (y_d^i - u(g)) chi_Od ] and the free state u."""
    grid, n = disc.grid, disc.grid.n_nodes
    src = np.zeros((grid.n_t + 1, 2 * n))
    if g_levels is not None:
        src[:, :n] = g_levels * disc.omega.indicator
    u = _forward_chain_with_initial(disc, src, disc.y0_vec)
    od = np.concatenate([disc.od.indicator, disc.od.indicator])
    v = []
    for i in (0, 1):
        resid = -u
        if disc.yd[i] is not None:
            resid = resid + np.concatenate(
                [disc.yd[i][0], disc.yd[i][1]], axis=1)
        v.append(_restrict_interior(
            disc, disc.alphas[i] * apply_Lambda_star(disc, i, resid * od), i))
    return tuple(v), u


def _forward_chain_with_initial(disc, sources_levels, y0) -> np.ndarray:
    grid = disc.grid
    data = np.zeros((grid.n_t + 1, 2 * grid.n_nodes))
    data[0] = y0
    for k in range(1, grid.n_t + 1):
        data[k] = disc.ops.solve(k, data[k - 1] + grid.dt * sources_levels[k])
    return data


def _warn_if_below_thresholds(disc):
    if not all(m > t for m, t in zip(disc.mus, disc.mu_thresholds)):
        warnings.warn("mu below the coercivity thresholds; the Nash solve "
                      "may be ill-posed", HypothesisWarning, stacklevel=3)


def solve_nash_operator(disc, g: Optional[ControlProfile] = None,
                        tol: Optional[float] = None,
                        maxiter: Optional[int] = None,
                        x0_pair=None) -> NashSolution:
    """Equilibrium through the coercive operator equation, matrix-free GMRES."""
    _warn_if_below_thresholds(disc)
    opts = disc.solver
    tol = opts.nash_tol if tol is None else tol
    maxiter = opts.nash_maxiter if maxiter is None else maxiter
    dm = _DofMap(disc)
    g_levels = g.values if g is not None else None
    v_pair, _ = _nash_rhs(disc, g_levels)
    rhs = dm.pack(v_pair)
    rho2 = _rho2_interior(disc)

    def K_vec(vec):
        return dm.pack(apply_K(disc, dm.unpack(vec)))

    # Jacobi preconditioning by the penalty diagonal mu_i rho*^2(t_k)
    diag = np.concatenate([
        np.repeat(disc.mus[i] * rho2[1: disc.grid.n_t], len(dm.nodes[i]))
        for i in (0, 1)])
    A = spla.LinearOperator((dm.total, dm.total), matvec=K_vec)
    M = spla.LinearOperator((dm.total, dm.total), matvec=lambda x: x / diag)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        h_pair = dm.unpack(np.zeros(dm.total))
        sol = NashSolution(
            h_bar=tuple(ControlProfile(h_pair[i], disc.omega_i[i], disc.grid)
                        for i in (0, 1)),
            route="operator",
            residuals={"linear_relative": 0.0}, iterations=0)
        return sol

    x0 = dm.pack(x0_pair) if x0_pair is not None else None
    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    x, info = spla.gmres(A, rhs, x0=x0, M=M, rtol=tol * 1e-2, atol=0.0,
                         maxiter=maxiter, callback=count,
                         callback_type="pr_norm")
    rel = np.linalg.norm(K_vec(x) - rhs) / rhs_norm
    if info != 0 or rel > tol:
        raise ConvergenceError(
            f"Nash operator solve stalled: relative residual {rel:.3e} "
            f"after {iters} iterations (target {tol:.1e})",
            residual=rel, iterations=iters)
    h_pair = dm.unpack(x)
    return NashSolution(
        h_bar=tuple(ControlProfile(h_pair[i], disc.omega_i[i], disc.grid)
                    for i in (0, 1)),
        route="operator",
        residuals={"linear_relative": float(rel)}, iterations=iters)


def solve_nash_optimality(disc, g: Optional[ControlProfile] = None,
                          backend: Optional[str] = None):
    """Equilibrium through the coupled optimality system.

    Returns (NashSolution, CoupledSolution); the controls are read off
    the follower adjoints as -1/mu_i rho*^-2 phi_1^i chi_i, one level
    behind the state step they feed, matching the assembled coupling.
    """
    _warn_if_below_thresholds(disc)
    from .pde import solve_coupled_forward_backward
    backend = backend or disc.solver.coupled_backend
    system = disc.system()
    g_levels = g.values if g is not None else None
    sol = solve_coupled_forward_backward(
        system, "optimality", backend=backend,
        tol=disc.solver.sweep_tol, max_iters=disc.solver.sweep_maxiter,
        g_levels=g_levels, y0=disc.y0_vec, yd=disc.yd)
    grid, n = disc.grid, disc.grid.n_nodes
    profiles = []
    for i, phi in enumerate((sol.phi1, sol.phi2)):
        h = np.zeros((grid.n_t + 1, n))
        nu = system.nu[i]
        h[1:] = -nu[1:, None] * phi.data[:grid.n_t, :n] * disc.omega_i[i].indicator
        profiles.append(ControlProfile(h, disc.omega_i[i], grid))
    nash = NashSolution(h_bar=tuple(profiles), route="optimality",
                        residuals={"coupled_relative": sol.residual},
                        iterations=sol.iterations)
    return nash, sol


# ---------------------------------------------------------------------------
# stationarity and costs
# ---------------------------------------------------------------------------

def state_with_controls(disc, g: Optional[ControlProfile],
                        h_pair: Optional[Sequence[ControlProfile]]) -> TwoComponentState:
    """Forward state under leader and follower controls (the plain system)."""
    grid, n = disc.grid, disc.grid.n_nodes
    src = np.zeros((grid.n_t + 1, 2 * n))
    if g is not None:
        src[:, :n] += g.values * disc.omega.indicator
    if h_pair is not None:
        for i, h in enumerate(h_pair):
            if h is not None:
                src[:, :n] += h.values * disc.omega_i[i].indicator
    data = _forward_chain_with_initial(disc, src, disc.y0_vec)
    return TwoComponentState(data, grid, "forward")


def check_nash_stationarity(disc, g: Optional[ControlProfile], h_bar,
                            n_directions: int = 20,
                            rng: Optional[np.random.Generator] = None) -> tuple:
    """Largest normalized first-variation of each follower cost at h_bar.

    For unit random directions d the scalar form
        mu_i sum_k dt rho*^2 <hbar_i, d>_i + alpha_i sum_k dt <(y - y_d), Lambda_i d>_Od
    vanishes at the exact equilibrium; the returned pair is the max |.|
    over the sampled directions.
    """
    rng = rng if rng is not None else disc.rng(202)
    grid, n = disc.grid, disc.grid.n_nodes
    dm = _DofMap(disc)
    y = state_with_controls(disc, g, h_bar).data
    od_w = disc.od.indicator * grid.node_weight
    rho2 = _rho2_interior(disc)
    wt = grid.time_weights()
    out = []
    for i in (0, 1):
        resid = y.copy()
        if disc.yd[i] is not None:
            resid[:, :n] -= disc.yd[i][0]
            resid[:, n:] -= disc.yd[i][1]
        worst = 0.0
        for _ in range(n_directions):
            d = np.zeros((grid.n_t + 1, n))
            d[1: grid.n_t][:, dm.nodes[i]] = rng.standard_normal(
                (dm.kt, len(dm.nodes[i])))
            d_norm = np.sqrt(dm.weight) * np.linalg.norm(
                d[1: grid.n_t][:, dm.nodes[i]])
            d /= d_norm
            yhat = apply_Lambda(disc, i, d).data
            penalty = disc.mus[i] * float(
                (wt * rho2) @ ((h_bar[i].values * d) @
                               (disc.omega_i[i].indicator * grid.node_weight)))
            track = disc.alphas[i] * float(
                wt @ (((resid[:, :n] * yhat[:, :n]) +
                       (resid[:, n:] * yhat[:, n:])) @ od_w))
            worst = max(worst, abs(penalty + track))
        out.append(worst)
    return tuple(out)


def follower_cost(disc, i: int, y_state: TwoComponentState,
                  h: ControlProfile) -> float:
    """J_i: tracking misfit on the observation region plus weighted penalty."""
    grid, n = disc.grid, disc.grid.n_nodes
    wt = grid.time_weights()
    resid = y_state.data.copy()
    if disc.yd[i] is not None:
        resid[:, :n] -= disc.yd[i][0]
        resid[:, n:] -= disc.yd[i][1]
    od_w = disc.od.indicator * grid.node_weight
    track = float(wt @ ((resid[:, :n] ** 2 + resid[:, n:] ** 2) @ od_w))
    rho2 = _rho2_interior(disc)
    pen = float((wt * rho2) @ ((h.values ** 2) @
                               (disc.omega_i[i].indicator * grid.node_weight)))
    return 0.5 * disc.alphas[i] * track + 0.5 * disc.mus[i] * pen


def leader_cost(disc, g_levels: np.ndarray) -> float:
    """J(g): half the squared L2(omega x (0,T)) norm of the leader control."""
    grid = disc.grid
    wt = grid.time_weights()
    om_w = disc.omega.indicator * grid.node_weight
    return 0.5 * float(wt @ ((np.asarray(g_levels) ** 2) @ om_w))
