"""Empirical interrogation of the weighted energy and observability bounds.

Nothing here is proven; the module samples the two sides of each
inequality on random terminal data and reports the observed ratios.
The weighted space-time functional I combines six damped square terms
(field, gradient, Laplacian, Hessian, gradient of Laplacian, and the
evolution pair), with every weight evaluated in log space so the
singular factors neither overflow nor produce NaNs; the endpoint time
levels contribute exactly zero.

Quadrature conventions match the rest of the package (right-endpoint in
time, uniform node weights in space).  The observation-side quadratic
form of the observability ratio is computed with the same staggered sum
the leader module uses for its reachability operator, so the two modules
agree bit-for-bit on shared quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import SpaceTimeGrid, bilaplacian, dirichlet_laplacian
from .weights import CarlemanWeights

__all__ = [
    "CarlemanReport", "ObservabilityReport", "carleman_I", "carleman_I_bar",
    "carleman_ratio_check", "observability_ratio", "energy_constant_check",
    "single_equation_samples",
]

OBS_REGULARIZATION = 1e-14


# ---------------------------------------------------------------------------
# discrete derivatives (zero extension across the boundary)
# ---------------------------------------------------------------------------

def _shift_diff(F: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered first difference with implied zero ghost values.

    Valid for simply-supported fields, whose boundary values (and those
    of their Laplacians) vanish.
    """
    G = np.zeros_like(F)
    src_fwd = [slice(None)] * F.ndim
    dst_fwd = [slice(None)] * F.ndim
    src_fwd[axis] = slice(1, None)
    dst_fwd[axis] = slice(None, -1)
    G[tuple(dst_fwd)] += F[tuple(src_fwd)]
    G[tuple(src_fwd)] -= F[tuple(dst_fwd)]
    return G / (2.0 * h)


def _spatial_derivatives(values: np.ndarray, grid: SpaceTimeGrid,
                         A: sp.csr_matrix, B: sp.csr_matrix) -> dict:
    """All spatial derivative samples needed by the weighted functional."""
    nt1, n = values.shape
    h = grid.h_x
    lap = values @ A.T
    bilap = values @ B.T
    if grid.dim == 1:
        gx = _shift_diff(values, 1, h)
        grad_sq = gx * gx
        hess_sq = lap * lap
        glap_sq = _shift_diff(lap, 1, h) ** 2
    else:
        nx = grid.n_x
        V = values.reshape(nt1, nx, nx)
        gx = _shift_diff(V, 1, h)
        gy = _shift_diff(V, 2, h)
        grad_sq = (gx * gx + gy * gy).reshape(nt1, n)
        vxx = _shift_diff(gx, 1, h)
        vyy = _shift_diff(gy, 2, h)
        vxy = _shift_diff(gx, 2, h)
        hess_sq = (vxx ** 2 + vyy ** 2 + 2.0 * vxy ** 2).reshape(nt1, n)
        L = lap.reshape(nt1, nx, nx)
        glap_sq = (_shift_diff(L, 1, h) ** 2 +
                   _shift_diff(L, 2, h) ** 2).reshape(nt1, n)
    dt_vals = np.empty_like(values)
    dt_vals[:-1] = (values[1:] - values[:-1]) / grid.dt
    dt_vals[-1] = (values[-1] - values[-2]) / grid.dt
    return {"lap": lap, "bilap": bilap, "grad_sq": grad_sq,
            "hess_sq": hess_sq, "glap_sq": glap_sq, "time": dt_vals}


def _qsum(grid: SpaceTimeGrid, integrand: np.ndarray,
          node_weights: Optional[np.ndarray] = None) -> float:
    wt = grid.time_weights()
    wx = np.full(grid.n_nodes, grid.node_weight) if node_weights is None \
        else node_weights
    return float(wt @ (integrand @ wx))


def carleman_I(values, weights: CarlemanWeights, grid: SpaceTimeGrid,
               A: Optional[sp.csr_matrix] = None,
               B: Optional[sp.csr_matrix] = None):
    """The six-term weighted energy of one scalar field.

    Returns (total, per-term dict).  values may be a Field or an
    (n_t+1, n_nodes) array.
    """
    vals = values.values if hasattr(values, "values") else np.asarray(values)
    A = A if A is not None else dirichlet_laplacian(grid).matrix
    B = B if B is not None else bilaplacian(grid).matrix
    lam, s = weights.lam, weights.s
    d = _spatial_derivatives(vals, grid, A, B)
    terms = {
        "field": lam ** 8 * _qsum(grid, weights.damped(6) * vals * vals),
        "gradient": lam ** 6 * _qsum(grid, weights.damped(4) * d["grad_sq"]),
        "laplacian": lam ** 4 * _qsum(grid, weights.damped(3) * d["lap"] ** 2),
        "hessian": lam ** 4 * _qsum(grid, weights.damped(2) * d["hess_sq"]),
        "gradient_laplacian": lam ** 2 * _qsum(
            grid, weights.damped(1) * d["glap_sq"]),
        "evolution": (1.0 / s) * _qsum(
            grid, weights.damped(-1) * (d["time"] ** 2 + d["bilap"] ** 2)),
    }
    return sum(terms.values()), terms


def carleman_I_bar(values, weights: CarlemanWeights, grid: SpaceTimeGrid,
                   window=None, A: Optional[sp.csr_matrix] = None) -> float:
    """Two-term variant with the left-bounded weights over a time window."""
    vals = values.values if hasattr(values, "values") else np.asarray(values)
    A = A if A is not None else dirichlet_laplacian(grid).matrix
    lap = vals @ A.T
    s = weights.s
    integrand = (weights.damped(6, modified=True) * vals * vals +
                 weights.damped(3, modified=True) * lap * lap)
    wt = grid.time_weights(window)
    wx = np.full(grid.n_nodes, grid.node_weight)
    return float(wt @ (integrand @ wx))


# ---------------------------------------------------------------------------
# sampled inequality reports
# ---------------------------------------------------------------------------

@dataclass
class CarlemanReport:
    """Sampled two-sided comparison of the coupled weighted estimate."""

    lam: float
    s: float
    samples: list
    max_ratio: float
    n_unbounded: int
    breakdown_at_max: dict
    quantiles: dict
    mus: tuple


@dataclass
class ObservabilityReport:
    """Sampled and iterated estimates of the observability constant."""

    sample_ratios: list
    sample_max: float
    power_estimate: float
    power_iterations: int
    maximizer: np.ndarray = field(repr=False)
    regularization: float = OBS_REGULARIZATION


def _dual_fields(disc, psi_T: np.ndarray):
    from .leader import solve_dual
    d = solve_dual(disc, psi_T, backend="assembled")
    return d


def _observation_energy(disc, psi_state) -> float:
    """Staggered omega sum matching the leader module's quadratic form."""
    grid, n = disc.grid, disc.grid.n_nodes
    w = disc.omega.indicator * grid.node_weight
    block = psi_state.data[: grid.n_t, :n]
    return grid.dt * float(np.sum((block * block) @ w))


def carleman_ratio_check(disc, n_samples: int = 50,
                         rng: Optional[np.random.Generator] = None) -> CarlemanReport:
    """Sample the coupled weighted estimate on random terminal data.

    lhs: the weighted energies of the two adjoint components and the two
    aggregated response components; rhs: the lam^24 (s tau)^34 observation
    term.  A sample with positive lhs but zero rhs is recorded as
    unbounded (ratio inf), not raised.
    """
    rng = rng if rng is not None else disc.rng(404)
    grid, n = disc.grid, disc.grid.n_nodes
    A = dirichlet_laplacian(grid).matrix
    B = bilaplacian(grid).matrix
    w = disc.weights
    lam, s = w.lam, w.s
    obs_weight = w.damped(34)
    om_w = disc.omega.indicator * grid.node_weight
    samples = []
    max_ratio, n_unbounded = 0.0, 0
    breakdown_at_max: dict = {}
    for _ in range(n_samples):
        psi_T = rng.standard_normal(2 * n)
        dual = _dual_fields(disc, psi_T)
        lhs, breakdown = 0.0, {}
        for name, state_vals in (("psi1", dual.psi.data[:, :n]),
                                 ("psi2", dual.psi.data[:, n:]),
                                 ("theta1", dual.theta.data[:, :n]),
                                 ("theta2", dual.theta.data[:, n:])):
            tot, terms = carleman_I(state_vals, w, grid, A=A, B=B)
            lhs += tot
            breakdown[name] = terms
        psi1 = dual.psi.data[:, :n]
        rhs = lam ** 24 * float(grid.time_weights() @
                                ((obs_weight * psi1 * psi1) @ om_w))
        if rhs == 0.0 and lhs == 0.0:
            continue
        ratio = lhs / rhs if rhs > 0.0 else np.inf
        samples.append({"lhs": lhs, "rhs": rhs, "ratio": ratio})
        if not np.isfinite(ratio):
            n_unbounded += 1
        elif ratio > max_ratio:
            max_ratio = ratio
            breakdown_at_max = breakdown
    finite = [s_["ratio"] for s_ in samples if np.isfinite(s_["ratio"])]
    qs = {}
    if finite:
        for q in (0.5, 0.9, 1.0):
            qs[f"q{int(q * 100)}"] = float(np.quantile(finite, q))
    return CarlemanReport(lam=lam, s=s, samples=samples, max_ratio=max_ratio,
                          n_unbounded=n_unbounded,
                          breakdown_at_max=breakdown_at_max, quantiles=qs,
                          mus=disc.mus)


def _obs_forms(disc):
    """Matrix-free numerator/denominator operators of the observability ratio.

    Both quadratic forms are diagonal on the assembled dual solution
    vector, so each operator application is one transposed solve, one
    diagonal scaling, and one plain solve through the shared LU.
    """
    grid, n = disc.grid, disc.grid.n_nodes
    nt, n2 = grid.n_t, 2 * n
    system = disc.system()
    lu = system._lu
    wx = grid.node_weight

    w_num = np.zeros(3 * nt * n2)
    w_num[:n2] = wx                                   # psi(0) block
    for i in (1, 2):
        w_num[i * nt * n2: (i + 1) * nt * n2] = grid.dt * wx
    w_den = np.zeros(3 * nt * n2)
    om = disc.omega.indicator
    for m in range(nt):
        blk = slice(m * n2, m * n2 + n)
        w_den[blk] = grid.dt * wx * om

    def inject(v):
        b = np.zeros(3 * nt * n2)
        b[(nt - 1) * n2: nt * n2] = v
        return b

    def solve_dual_vec(v):
        return lu.solve(inject(v), trans="T")

    def extract(u):
        return u[(nt - 1) * n2: nt * n2].copy()

    def L_apply(v):
        V = solve_dual_vec(v)
        return extract(lu.solve(w_num * V))

    def R_apply(v):
        V = solve_dual_vec(v)
        return extract(lu.solve(w_den * V))

    def forms(v):
        V = solve_dual_vec(v)
        return float(V @ (w_num * V)), float(V @ (w_den * V))

    return L_apply, R_apply, forms


def _cg_best_effort(apply_A, b, tol, maxiter):
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    b_norm = np.sqrt(rs)
    if b_norm == 0.0:
        return x
    for _ in range(maxiter):
        if np.sqrt(rs) <= tol * b_norm:
            break
        Ap = apply_A(p)
        denom = float(p @ Ap)
        if denom <= 0.0:
            break
        alpha = rs / denom
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def observability_ratio(disc, n_samples: int = 50, power_iters: int = 40,
                        rng: Optional[np.random.Generator] = None,
                        seed_vector: Optional[np.ndarray] = None) -> ObservabilityReport:
    """Two estimators of the observability constant.

    (a) the max of lhs/rhs over random terminal data; (b) a generalized
    Rayleigh power iteration on the form pair, with the denominator
    regularized by a small identity shift.  The iteration starts from the
    best sample (and the optional seed vector), and the reported estimate
    is the best Rayleigh value seen, so it dominates the sample max by
    construction.
    """
    rng = rng if rng is not None else disc.rng(505)
    n2 = 2 * disc.grid.n_nodes
    L_apply, R_apply, forms = _obs_forms(disc)
    reg = OBS_REGULARIZATION

    ratios, vectors = [], []
    for _ in range(n_samples):
        v = rng.standard_normal(n2)
        v /= np.linalg.norm(v)
        num, den = forms(v)
        ratios.append(num / den if den > 0 else np.inf)
        vectors.append(v)
    finite = [r for r in ratios if np.isfinite(r)]
    sample_max = max(finite) if finite else 0.0

    candidates = []
    if finite:
        candidates.append(vectors[int(np.argmax(
            [r if np.isfinite(r) else -np.inf for r in ratios]))])
    if seed_vector is not None:
        candidates.append(np.asarray(seed_vector, dtype=float) /
                          np.linalg.norm(seed_vector))
    if not candidates:
        candidates.append(rng.standard_normal(n2))

    best_val = sample_max
    best_vec = candidates[0].copy()
    iters_done = 0
    for v0 in candidates:
        v = v0.copy()
        for _ in range(power_iters):
            iters_done += 1
            z = _cg_best_effort(lambda u: R_apply(u) + reg * u, L_apply(v),
                                tol=1e-8, maxiter=200)
            nz = np.linalg.norm(z)
            if nz == 0.0:
                break
            v = z / nz
            num, den = forms(v)
            val = num / (den + reg)
            if val > best_val:
                best_val = val
                best_vec = v.copy()
    return ObservabilityReport(sample_ratios=ratios, sample_max=sample_max,
                               power_estimate=float(best_val),
                               power_iterations=iters_done,
                               maximizer=best_vec)


def energy_constant_check(disc, which: str, n_samples: int = 30,
                          rng: Optional[np.random.Generator] = None) -> dict:
    """Empirical constant of one of the unweighted energy bounds.

    which: 'theta_Q' (aggregated response over Q), 'theta_half' (with
    Laplacians, over the left half window), or 'gamma' (per-follower
    responses against the patch-restricted damped observation).
    """
    if which not in ("theta_Q", "theta_half", "gamma"):
        raise ValueError(f"unknown energy estimate {which!r}")
    rng = rng if rng is not None else disc.rng(606)
    grid, n = disc.grid, disc.grid.n_nodes
    A = dirichlet_laplacian(grid).matrix
    rho_inv2 = disc.weights.rho_star_inv2
    wt_full = grid.time_weights()
    wt_half = grid.time_weights((0.0, 0.5 * grid.T))
    wx = np.full(n, grid.node_weight)
    a1, a2 = disc.alphas
    m1, m2 = disc.mus
    ratios = []
    for _ in range(n_samples):
        psi_T = rng.standard_normal(2 * n)
        dual = _dual_fields(disc, psi_T)
        psi1 = dual.psi.data[:, :n]
        damped_obs = (rho_inv2[:, None] * psi1) ** 2
        if which == "theta_Q":
            th = dual.theta.data
            lhs = float(wt_full @ ((th[:, :n] ** 2 + th[:, n:] ** 2) @ wx))
            rhs = (a1 ** 2 / m1 ** 2 + a2 ** 2 / m2 ** 2) * float(
                wt_full @ (damped_obs @ wx))
        elif which == "theta_half":
            th = dual.theta.data
            lap1 = th[:, :n] @ A.T
            lap2 = th[:, n:] @ A.T
            lhs = float(wt_half @ ((th[:, :n] ** 2 + th[:, n:] ** 2 +
                                    lap1 ** 2 + lap2 ** 2) @ wx))
            rhs = (a1 ** 2 / m1 ** 2 + a2 ** 2 / m2 ** 2) * float(
                wt_half @ (damped_obs @ wx))
        else:
            lhs = 0.0
            rhs = 0.0
            for i, gam in enumerate((dual.gamma1, dual.gamma2)):
                lhs += float(wt_full @ ((gam.data[:, :n] ** 2 +
                                         gam.data[:, n:] ** 2) @ wx))
                rhs += (1.0 / disc.mus[i] ** 2) * float(
                    wt_full @ (damped_obs @ (wx * disc.omega_i[i].indicator)))
        if rhs > 0.0:
            ratios.append(lhs / rhs)
    return {"which": which, "max": max(ratios) if ratios else 0.0,
            "ratios": ratios, "n_excluded": n_samples - len(ratios)}


def single_equation_samples(disc, n_samples: int = 10,
                            rng: Optional[np.random.Generator] = None) -> dict:
    """Convenience sampling of the single-equation weighted estimate.

    Backward scalar evolution with the fourth-order operator alone
    (no coupling, no source); the comparison term carries the
    lam^8 (s tau)^7 observation weight of the scalar theory.
    """
    rng = rng if rng is not None else disc.rng(707)
    grid, n = disc.grid, disc.grid.n_nodes
    A = dirichlet_laplacian(grid).matrix
    B = bilaplacian(grid).matrix
    E = (sp.identity(n, format="csc") + grid.dt * B).tocsc()
    lu = spla.splu(E)
    w = disc.weights
    obs = w.damped(7)
    om_w = disc.omega.indicator * grid.node_weight
    ratios = []
    for _ in range(n_samples):
        phi = np.zeros((grid.n_t + 1, n))
        phi[grid.n_t] = rng.standard_normal(n)
        for k in range(grid.n_t, 0, -1):
            phi[k - 1] = lu.solve(phi[k])
        lhs, _ = carleman_I(phi, w, grid, A=A, B=B)
        rhs = w.lam ** 8 * float(grid.time_weights() @
                                 ((obs * phi * phi) @ om_w))
        if rhs > 0.0:
            ratios.append(lhs / rhs)
    return {"max": max(ratios) if ratios else 0.0, "ratios": ratios}
