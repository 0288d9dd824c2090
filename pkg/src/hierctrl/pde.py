"""Time steppers for the two-component fourth-order parabolic systems.

One family of step matrices drives everything.  With B the discrete
fourth-order operator and a(t) the 2x2 zero-order coupling, the matrix
stepping into time level k is

    E^k = I + dt * blockdiag(B, B) + dt * a(t_k),   k = 1..n_t.

The forward solver computes  c^k = (E^k)^-1 (c^{k-1} + dt f^k)  and the
backward solver computes  c^{k-1} = (E^k)^-T (c^k + dt q^k);  both reuse
the same LU factorization of E^k.  Transposing E^k swaps the off-diagonal
coupling, which is exactly the adjoint arrangement (the a21 entry
multiplies the second component inside the first equation).  Under the
package's right-endpoint time quadrature the two solvers are exact
adjoints of one another, with sources pairing one level behind the
backward trajectory:

    sum_k dt <f^k, psi^{k-1}> - sum_k dt <q^k, y^k> = <y^nt, psi^nt> - <y^0, psi^0>.

The coupled state / follower-adjoint system and its dual are handled by
``TwoPointSystem``, which assembles the full space-time block matrix once
and solves the dual through the transposed factorization, making the
discrete duality identities above hold to round-off.  A block
Gauss-Seidel sweep is available as the iterative backend.

Solver instances are single-threaded; distinct instances over shared
immutable grids and coefficients may run concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError
from .expressions import Expression
from .grid import Field, RegionMask, SpaceTimeGrid, bilaplacian

__all__ = [
    "Coefficient", "CoefficientField", "TwoComponentState", "SourceSpec",
    "StepOperators", "solve_forward", "solve_backward",
    "TwoPointSystem", "CoupledSolution", "solve_coupled_forward_backward",
    "state_to_csv", "state_to_binary", "read_binary_state",
]


class Coefficient:
    """One scalar coefficient, constant or varying over space-time.

    Accepts a float, an (n_nodes,) array, an Expression, or a callable
    (coords, t) -> (n_nodes,).  Time-varying data is sampled once per
    level and cached.
    """

    def __init__(self, spec, grid: SpaceTimeGrid):
        self.grid = grid
        n = grid.n_nodes
        if isinstance(spec, str):
            spec = Expression(spec)
        if isinstance(spec, (int, float)):
            self._static = np.full(n, float(spec))
            self._levels = None
        elif isinstance(spec, np.ndarray):
            if spec.shape == (n,):
                self._static = spec.astype(float)
                self._levels = None
            elif spec.shape == (grid.n_t + 1, n):
                self._static = None
                self._levels = spec.astype(float)
            else:
                raise ValueError(f"coefficient array shape {spec.shape}")
        elif isinstance(spec, Expression) and not spec.uses_t:
            self._static = spec(grid.node_coords(), 0.0)
            self._levels = None
        else:
            fn = spec if callable(spec) else None
            if fn is None:
                raise TypeError(f"cannot build coefficient from {spec!r}")
            self._static = None
            self._levels = np.stack([fn(grid.node_coords(), t)
                                     for t in grid.times])
        vals = self._static if self._levels is None else self._levels
        if not np.all(np.isfinite(vals)):
            raise ValueError("coefficient evaluates to non-finite values")

    @property
    def constant_in_time(self) -> bool:
        return self._levels is None

    def level(self, k: int) -> np.ndarray:
        return self._static if self._levels is None else self._levels[k]

    @property
    def sup_norm(self) -> float:
        vals = self._static if self._levels is None else self._levels
        return float(np.abs(vals).max())


@dataclass
class CoefficientField:
    """The four zero-order couplings of the two-component system."""

    a11: Coefficient
    a12: Coefficient
    a21: Coefficient
    a22: Coefficient

    @classmethod
    def build(cls, grid: SpaceTimeGrid, a11, a12, a21, a22) -> "CoefficientField":
        return cls(Coefficient(a11, grid), Coefficient(a12, grid),
                   Coefficient(a21, grid), Coefficient(a22, grid))

    @property
    def constant_in_time(self) -> bool:
        return all(c.constant_in_time for c in (self.a11, self.a12, self.a21, self.a22))

    @property
    def sup_norm_total(self) -> float:
        """Sum of the four sup-norms; the constant 'A' of the energy bounds."""
        return sum(c.sup_norm for c in (self.a11, self.a12, self.a21, self.a22))

    def sign_certificate(self, grid: SpaceTimeGrid, mask: RegionMask):
        """Check a21 >= a0 > 0 or -a21 >= a0 > 0 on mask x (0,T).

        Returns (holds, a0, sign); a0 is the certified margin.
        """
        idx = mask.indicator > 0
        if self.a21.constant_in_time:
            vals = self.a21.level(0)[idx]
        else:
            vals = np.concatenate([self.a21.level(k)[idx]
                                   for k in range(1, grid.n_t + 1)])
        lo, hi = float(vals.min()), float(vals.max())
        if lo > 0.0:
            return True, lo, 1
        if hi < 0.0:
            return True, -hi, -1
        return False, 0.0, 0


@dataclass
class TwoComponentState:
    """Pair of scalar fields on all time levels, stacked as (n_t+1, 2n)."""

    data: np.ndarray
    grid: SpaceTimeGrid
    orientation: str = "forward"

    def __post_init__(self):
        n = self.grid.n_nodes
        if self.data.shape != (self.grid.n_t + 1, 2 * n):
            raise ValueError(f"state shape {self.data.shape}")

    @property
    def c1(self) -> Field:
        return Field(self.data[:, : self.grid.n_nodes], self.grid)

    @property
    def c2(self) -> Field:
        return Field(self.data[:, self.grid.n_nodes:], self.grid)

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid, orientation: str = "forward"):
        return cls(np.zeros((grid.n_t + 1, 2 * grid.n_nodes)), grid, orientation)


@dataclass
class _SourceTerm:
    component: int
    values: np.ndarray          # (n,) or (n_t+1, n)
    mask: Optional[RegionMask]
    time_profile: Optional[np.ndarray]
    scale: float


class SourceSpec:
    """Per-component right-hand sides, each clipped by its region mask."""

    def __init__(self, grid: SpaceTimeGrid):
        self.grid = grid
        self._terms: list = []

    @classmethod
    def zero(cls, grid: SpaceTimeGrid) -> "SourceSpec":
        return cls(grid)

    def add(self, component: int, values, mask: Optional[RegionMask] = None,
            time_profile: Optional[np.ndarray] = None,
            scale: float = 1.0) -> "SourceSpec":
        if component not in (0, 1):
            raise ValueError("component must be 0 or 1")
        vals = np.asarray(values, dtype=float)
        n = self.grid.n_nodes
        if vals.shape not in ((n,), (self.grid.n_t + 1, n)):
            raise ValueError(f"source values shape {vals.shape}")
        if mask is not None:
            vals = vals * mask.indicator
        if time_profile is not None:
            time_profile = np.asarray(time_profile, dtype=float)
            if time_profile.shape != (self.grid.n_t + 1,):
                raise ValueError("time_profile must have one entry per level")
        self._terms.append(_SourceTerm(component, vals, mask, time_profile, scale))
        return self

    def at_level(self, k: int) -> np.ndarray:
        n = self.grid.n_nodes
        out = np.zeros(2 * n)
        for term in self._terms:
            v = term.values if term.values.ndim == 1 else term.values[k]
            c = term.scale
            if term.time_profile is not None:
                c = c * term.time_profile[k]
            if c != 0.0:
                lo = term.component * n
                out[lo: lo + n] += c * v
        return out


class StepOperators:
    """The per-level implicit step matrices E^k and their factorizations.

    When the coupling is constant in time a single factorization is
    shared by every level.
    """

    def __init__(self, grid: SpaceTimeGrid, coeffs: CoefficientField,
                 fourth_order: Optional[sp.csr_matrix] = None):
        self.grid = grid
        self.coeffs = coeffs
        n = grid.n_nodes
        B = fourth_order if fourth_order is not None else bilaplacian(grid).matrix
        self._base = sp.identity(2 * n, format="csr") + grid.dt * sp.block_diag(
            (B, B), format="csr")
        self.constant = coeffs.constant_in_time
        levels = [1] if self.constant else list(range(1, grid.n_t + 1))
        self._mats = {}
        self._lus = {}
        for k in levels:
            E = self._assemble(k)
            self._mats[k] = E
            try:
                self._lus[k] = spla.splu(E.tocsc())
            except RuntimeError as exc:
                raise RuntimeError(f"singular step matrix at level {k}: {exc}")

    def _assemble(self, k: int) -> sp.csr_matrix:
        dt = self.grid.dt
        c = self.coeffs
        blocks = [[sp.diags(dt * c.a11.level(k)), sp.diags(dt * c.a12.level(k))],
                  [sp.diags(dt * c.a21.level(k)), sp.diags(dt * c.a22.level(k))]]
        return (self._base + sp.bmat(blocks, format="csr")).tocsr()

    def _key(self, k: int) -> int:
        return 1 if self.constant else k

    def matrix(self, k: int) -> sp.csr_matrix:
        return self._mats[self._key(k)]

    def apply(self, k: int, vec: np.ndarray) -> np.ndarray:
        return self._mats[self._key(k)] @ vec

    def apply_transpose(self, k: int, vec: np.ndarray) -> np.ndarray:
        return self._mats[self._key(k)].T @ vec

    def solve(self, k: int, rhs: np.ndarray) -> np.ndarray:
        return self._lus[self._key(k)].solve(rhs)

    def solve_transpose(self, k: int, rhs: np.ndarray) -> np.ndarray:
        return self._lus[self._key(k)].solve(rhs, trans="T")


def _initial_vector(initial, grid: SpaceTimeGrid) -> np.ndarray:
    n = grid.n_nodes
    if initial is None:
        return np.zeros(2 * n)
    if isinstance(initial, (tuple, list)):
        v = np.concatenate([np.asarray(c, dtype=float) for c in initial])
    else:
        v = np.asarray(initial, dtype=float).ravel()
    if v.shape != (2 * n,):
        raise ValueError(f"initial data must give two arrays of {n} nodes")
    if not np.all(np.isfinite(v)):
        raise ValueError("initial data contains non-finite values")
    return v


def solve_forward(coeffs: CoefficientField, sources: SourceSpec, initial,
                  grid: SpaceTimeGrid,
                  ops: Optional[StepOperators] = None) -> TwoComponentState:
    """Implicit trajectory of d/dt c + B c + a(t) c = f, fully coupled.

    The step into level k solves (I + dt B + dt a(t_k)) c^k = c^{k-1} + dt f^k.
    """
    ops = ops if ops is not None else StepOperators(grid, coeffs)
    data = np.empty((grid.n_t + 1, 2 * grid.n_nodes))
    data[0] = _initial_vector(initial, grid)
    for k in range(1, grid.n_t + 1):
        data[k] = ops.solve(k, data[k - 1] + grid.dt * sources.at_level(k))
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("forward trajectory left the finite range")
    return TwoComponentState(data, grid, "forward")


def solve_backward(coeffs: CoefficientField, sources: SourceSpec, terminal,
                   grid: SpaceTimeGrid,
                   ops: Optional[StepOperators] = None) -> TwoComponentState:
    """Reversed-time trajectory through the transposed step matrices.

    The step producing level k-1 solves (E^k)^T p^{k-1} = p^k + dt q^k,
    so the coupling is transposed relative to the forward system and the
    source sample at level k drives the step that lands on level k-1.
    This makes the solver the exact discrete adjoint of
    :func:`solve_forward`.
    """
    ops = ops if ops is not None else StepOperators(grid, coeffs)
    data = np.empty((grid.n_t + 1, 2 * grid.n_nodes))
    data[grid.n_t] = _initial_vector(terminal, grid)
    for k in range(grid.n_t, 0, -1):
        data[k - 1] = ops.solve_transpose(k, data[k] + grid.dt * sources.at_level(k))
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("backward trajectory left the finite range")
    return TwoComponentState(data, grid, "backward")


# ---------------------------------------------------------------------------
# coupled two-point systems
# ---------------------------------------------------------------------------

@dataclass
class CoupledSolution:
    """Trajectories of one coupled solve plus solver diagnostics."""

    kind: str
    backend: str
    residual: float
    iterations: int
    y: Optional[TwoComponentState] = None
    phi1: Optional[TwoComponentState] = None
    phi2: Optional[TwoComponentState] = None
    psi: Optional[TwoComponentState] = None
    gamma1: Optional[TwoComponentState] = None
    gamma2: Optional[TwoComponentState] = None


class TwoPointSystem:
    """Assembled discretization of the coupled state / adjoint systems.

    The primal unknowns are the state levels y^1..y^nt and the follower
    adjoints phi^{i,0}..phi^{i,nt-1}; the state equation at step k caries
    the follower feedback -nu_i(t_k) chi_i phi_1^{i,k-1} one level behind
    the implicit one, which makes the transposed matrix the natural
    implicit discretization of the dual system (backward psi driven by
    the observation-region feedback, forward gamma^i driven by
    -nu_i psi_1 chi_i).  Dual solves therefore reuse the primal LU with
    trans='T', and the discrete duality identity

        sum_k dt <g^k, psi_1^{k-1}>_omega + <y^0, psi^0>
            - sum_i alpha_i sum_k dt <y_d^{i,k}, gamma^{i,k}>_Od
            = <y^nt, psi^T>

    holds to round-off for arbitrary data.
    """

    def __init__(self, grid: SpaceTimeGrid, ops: StepOperators,
                 omega: RegionMask, omega_i: Sequence[RegionMask],
                 od: RegionMask, alphas: Sequence[float],
                 mus: Sequence[float], rho_star_inv2: np.ndarray):
        self.grid = grid
        self.ops = ops
        self.omega = omega
        self.omega_i = tuple(omega_i)
        self.od = od
        self.alphas = tuple(float(a) for a in alphas)
        self.mus = tuple(float(m) for m in mus)
        if min(self.mus) <= 0:
            raise ValueError("follower weights mu must be positive")
        # feedback gain per level; endpoint levels are exactly 0
        self.nu = tuple((1.0 / m) * np.asarray(rho_star_inv2, dtype=float)
                        for m in self.mus)
        self._matrix = self._assemble()
        self._lu = spla.splu(self._matrix.tocsc())

    # -- assembly ----------------------------------------------------------

    def _assemble(self) -> sp.csc_matrix:
        grid, n = self.grid, self.grid.n_nodes
        nt, n2, dt = grid.n_t, 2 * grid.n_nodes, grid.dt
        eye = sp.identity(n2, format="coo")
        od_two = sp.diags(np.concatenate([self.od.indicator, self.od.indicator]))
        rows, cols, blocks = [], [], []

        def put(bi, bj, M):
            rows.append(bi)
            cols.append(bj)
            blocks.append(M)

        for k in range(1, nt + 1):
            yk = k - 1
            put(yk, yk, self.ops.matrix(k))
            if k >= 2:
                put(yk, yk - 1, -eye)
            for i in (0, 1):
                gain = dt * self.nu[i][k]
                if gain != 0.0:
                    chi = sp.diags(gain * self.omega_i[i].indicator)
                    feed = sp.bmat([[chi, None], [None, sp.coo_matrix((n, n))]])
                    put(yk, (1 + i) * nt + (k - 1), feed)
        for i in (0, 1):
            off = (1 + i) * nt
            for j in range(nt):
                put(off + j, off + j, self.ops.matrix(j + 1).T)
                if j <= nt - 2:
                    put(off + j, off + j + 1, -eye)
                put(off + j, j, -dt * self.alphas[i] * od_two)

        big_rows, big_cols, big_vals = [], [], []
        for bi, bj, M in zip(rows, cols, blocks):
            M = M.tocoo()
            big_rows.append(M.row + bi * n2)
            big_cols.append(M.col + bj * n2)
            big_vals.append(M.data)
        N = 3 * nt * n2
        A = sp.coo_matrix(
            (np.concatenate(big_vals),
             (np.concatenate(big_rows), np.concatenate(big_cols))),
            shape=(N, N))
        return A.tocsc()

    @property
    def matrix(self) -> sp.csc_matrix:
        return self._matrix

    def _primal_rhs(self, g_levels, y0, yd) -> np.ndarray:
        grid, n = self.grid, self.grid.n_nodes
        nt, n2, dt = grid.n_t, 2 * grid.n_nodes, grid.dt
        b = np.zeros(3 * nt * n2)
        for k in range(1, nt + 1):
            blk = b[(k - 1) * n2: k * n2]
            if g_levels is not None:
                blk[:n] += dt * self.omega.indicator * g_levels[k]
            if k == 1 and y0 is not None:
                blk += y0
        if yd is not None:
            for i in (0, 1):
                if yd[i] is None:
                    continue
                off = (1 + i) * nt
                for j in range(nt):
                    blk = b[(off + j) * n2: (off + j + 1) * n2]
                    blk -= dt * self.alphas[i] * np.concatenate(
                        [self.od.indicator * yd[i][0][j + 1],
                         self.od.indicator * yd[i][1][j + 1]])
        return b

    def _dual_rhs(self, psi_T: np.ndarray) -> np.ndarray:
        nt, n2 = self.grid.n_t, 2 * self.grid.n_nodes
        b = np.zeros(3 * nt * n2)
        b[(nt - 1) * n2: nt * n2] = psi_T
        return b

    # -- direct backend ----------------------------------------------------

    def _unpack_primal(self, U: np.ndarray, y0):
        grid = self.grid
        nt, n2 = grid.n_t, 2 * grid.n_nodes
        y = np.zeros((nt + 1, n2))
        y[0] = y0 if y0 is not None else 0.0
        y[1:] = U[: nt * n2].reshape(nt, n2)
        out = [TwoComponentState(y, grid, "forward")]
        for i in (0, 1):
            phi = np.zeros((nt + 1, n2))
            phi[:nt] = U[(1 + i) * nt * n2: (2 + i) * nt * n2].reshape(nt, n2)
            out.append(TwoComponentState(phi, grid, "backward"))
        return out

    def _unpack_dual(self, V: np.ndarray, psi_T: np.ndarray):
        grid = self.grid
        nt, n2 = grid.n_t, 2 * grid.n_nodes
        psi = np.zeros((nt + 1, n2))
        psi[:nt] = V[: nt * n2].reshape(nt, n2)
        psi[nt] = psi_T
        out = [TwoComponentState(psi, grid, "backward")]
        for i in (0, 1):
            gam = np.zeros((nt + 1, n2))
            gam[1:] = V[(1 + i) * nt * n2: (2 + i) * nt * n2].reshape(nt, n2)
            out.append(TwoComponentState(gam, grid, "forward"))
        return out

    def solve_primal(self, g_levels=None, y0=None, yd=None) -> CoupledSolution:
        """Direct solve of the optimality system for leader data g, y0, y_d.

        g_levels: (n_t+1, n) leader control samples (level 0 unused);
        y0: (2n,) initial state; yd: pair of (c1, c2) target level arrays
        per follower, each (n_t+1, n), or None for zero targets.
        """
        b = self._primal_rhs(g_levels, y0, yd)
        U = self._lu.solve(b)
        res = self._relative_residual(U, b, trans="N")
        y, phi1, phi2 = self._unpack_primal(U, y0)
        return CoupledSolution(kind="optimality", backend="assembled",
                               residual=res, iterations=1,
                               y=y, phi1=phi1, phi2=phi2)

    def solve_dual(self, psi_T: np.ndarray) -> CoupledSolution:
        """Direct solve of the dual system through the transposed LU."""
        psi_T = np.asarray(psi_T, dtype=float).ravel()
        if psi_T.shape != (2 * self.grid.n_nodes,):
            raise ValueError("terminal data must stack two spatial arrays")
        b = self._dual_rhs(psi_T)
        V = self._lu.solve(b, trans="T")
        res = self._relative_residual(V, b, trans="T")
        psi, gamma1, gamma2 = self._unpack_dual(V, psi_T)
        return CoupledSolution(kind="dual", backend="assembled",
                               residual=res, iterations=1,
                               psi=psi, gamma1=gamma1, gamma2=gamma2)

    def _relative_residual(self, X, b, trans="N") -> float:
        bn = np.linalg.norm(b)
        if bn == 0.0:
            return 0.0
        Ax = self._matrix @ X if trans == "N" else self._matrix.T @ X
        return float(np.linalg.norm(Ax - b) / bn)

    # -- sweep backend -----------------------------------------------------

    def _pack_primal(self, y, phi):
        nt, n2 = self.grid.n_t, 2 * self.grid.n_nodes
        return np.concatenate([y[1:].ravel(), phi[0][:nt].ravel(),
                               phi[1][:nt].ravel()])

    def solve_primal_sweep(self, g_levels=None, y0=None, yd=None,
                           tol: float = 1e-10, max_iters: int = 200,
                           relax: float = 1.0) -> CoupledSolution:
        """Alternating forward/backward sweeps with under-relaxation.

        Converges when the full-system relative residual drops below tol;
        raises ConvergenceError (with the final residual attached) if the
        iteration budget is exhausted.
        """
        grid, n = self.grid, self.grid.n_nodes
        nt, n2, dt = grid.n_t, 2 * grid.n_nodes, grid.dt
        b = self._primal_rhs(g_levels, y0, yd)
        bn = np.linalg.norm(b)
        y = np.zeros((nt + 1, n2))
        if y0 is not None:
            y[0] = y0
        phi = [np.zeros((nt + 1, n2)), np.zeros((nt + 1, n2))]
        residual = np.inf
        for it in range(1, max_iters + 1):
            for k in range(1, nt + 1):
                # the k=1 rhs block carries the initial term, already in y[0]
                rhs = y[k - 1] + b[(k - 1) * n2: k * n2]
                if k == 1 and y0 is not None:
                    rhs = rhs - y0
                feed = np.zeros(n2)
                for i in (0, 1):
                    gain = dt * self.nu[i][k]
                    if gain != 0.0:
                        feed[:n] += gain * self.omega_i[i].indicator * phi[i][k - 1, :n]
                y[k] = self.ops.solve(k, rhs - feed)
            for i in (0, 1):
                new = np.zeros((nt + 1, n2))
                for j in range(nt - 1, -1, -1):
                    src = self.alphas[i] * np.concatenate(
                        [self.od.indicator * y[j + 1, :n],
                         self.od.indicator * y[j + 1, n:]])
                    if yd is not None and yd[i] is not None:
                        src -= self.alphas[i] * np.concatenate(
                            [self.od.indicator * yd[i][0][j + 1],
                             self.od.indicator * yd[i][1][j + 1]])
                    new[j] = self.ops.solve_transpose(j + 1, new[j + 1] + dt * src)
                phi[i] = relax * new + (1.0 - relax) * phi[i]
            U = self._pack_primal(y, phi)
            residual = (np.linalg.norm(self._matrix @ U - b) / bn) if bn > 0 else 0.0
            if residual <= tol:
                ys, p1, p2 = self._unpack_primal(U, y0)
                return CoupledSolution(kind="optimality", backend="sweep",
                                       residual=residual, iterations=it,
                                       y=ys, phi1=p1, phi2=p2)
        raise ConvergenceError(
            f"coupled sweep stalled at residual {residual:.3e} after "
            f"{max_iters} iterations", residual=residual, iterations=max_iters)

    def solve_dual_sweep(self, psi_T: np.ndarray, tol: float = 1e-10,
                         max_iters: int = 200, relax: float = 1.0) -> CoupledSolution:
        """Dual counterpart of :meth:`solve_primal_sweep`."""
        grid, n = self.grid, self.grid.n_nodes
        nt, n2, dt = grid.n_t, 2 * grid.n_nodes, grid.dt
        psi_T = np.asarray(psi_T, dtype=float).ravel()
        b = self._dual_rhs(psi_T)
        bn = np.linalg.norm(b)
        psi = np.zeros((nt + 1, n2))
        psi[nt] = psi_T
        gam = [np.zeros((nt + 1, n2)), np.zeros((nt + 1, n2))]
        residual = np.inf
        for it in range(1, max_iters + 1):
            for k in range(nt, 0, -1):
                src = np.zeros(n2)
                for i in (0, 1):
                    src += self.alphas[i] * np.concatenate(
                        [self.od.indicator * gam[i][k, :n],
                         self.od.indicator * gam[i][k, n:]])
                psi[k - 1] = self.ops.solve_transpose(k, psi[k] + dt * src)
            for i in (0, 1):
                new = np.zeros((nt + 1, n2))
                for k in range(1, nt + 1):
                    src = np.zeros(n2)
                    gain = dt * self.nu[i][k]
                    if gain != 0.0:
                        src[:n] = -gain * self.omega_i[i].indicator * psi[k - 1, :n]
                    new[k] = self.ops.solve(k, new[k - 1] + src)
                gam[i] = relax * new + (1.0 - relax) * gam[i]
            V = np.concatenate([psi[:nt].ravel(), gam[0][1:].ravel(),
                                gam[1][1:].ravel()])
            residual = (np.linalg.norm(self._matrix.T @ V - b) / bn) if bn > 0 else 0.0
            if residual <= tol:
                ps, g1, g2 = self._unpack_dual(V, psi_T)
                return CoupledSolution(kind="dual", backend="sweep",
                                       residual=residual, iterations=it,
                                       psi=ps, gamma1=g1, gamma2=g2)
        raise ConvergenceError(
            f"dual sweep stalled at residual {residual:.3e} after "
            f"{max_iters} iterations", residual=residual, iterations=max_iters)


def solve_coupled_forward_backward(system: TwoPointSystem, kind: str,
                                   backend: str = "assembled",
                                   tol: float = 1e-10, max_iters: int = 200,
                                   **data) -> CoupledSolution:
    """Solve one of the coupled two-point systems.

    kind 'optimality' takes g_levels / y0 / yd; kind 'dual' takes psi_T.
    backend 'assembled' is the direct space-time solve (the oracle);
    'sweep' is the fixed-point alternation.
    """
    if kind == "optimality":
        args = (data.get("g_levels"), data.get("y0"), data.get("yd"))
        if backend == "assembled":
            return system.solve_primal(*args)
        if backend == "sweep":
            return system.solve_primal_sweep(*args, tol=tol, max_iters=max_iters)
    elif kind == "dual":
        psi_T = data["psi_T"]
        if backend == "assembled":
            return system.solve_dual(psi_T)
        if backend == "sweep":
            return system.solve_dual_sweep(psi_T, tol=tol, max_iters=max_iters)
    else:
        raise ValueError(f"unknown coupled system kind {kind!r}")
    raise ValueError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# trajectory export
# ---------------------------------------------------------------------------

_BINARY_MAGIC = b"HCTRAJ1\x00"


def state_to_csv(state: TwoComponentState, path) -> None:
    """Write t, x[, y], c1, c2 rows for every space-time node."""
    grid = state.grid
    coords = grid.node_coords()
    n = grid.n_nodes
    cols = ["t", "x"] + (["y"] if grid.dim == 2 else []) + ["c1", "c2"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k, t in enumerate(grid.times):
            for p in range(n):
                row = [t, coords[p, 0]]
                if grid.dim == 2:
                    row.append(coords[p, 1])
                row += [state.data[k, p], state.data[k, n + p]]
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def state_to_binary(state: TwoComponentState, path) -> None:
    """Compact dump: magic, int64 dim/n_x/n_t, float64 T/h/dt, then the
    (n_t+1, 2, n_nodes) trajectory as row-major doubles."""
    grid = state.grid
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<3q", grid.dim, grid.n_x, grid.n_t))
        fh.write(struct.pack("<3d", grid.T, grid.h_x, grid.dt))
        n = grid.n_nodes
        arr = state.data.reshape(grid.n_t + 1, 2, n)
        fh.write(arr.astype("<f8").tobytes(order="C"))


def read_binary_state(path):
    """Read a dump produced by :func:`state_to_binary`.

    Returns (header dict, array of shape (n_t+1, 2, n_nodes)).
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(_BINARY_MAGIC))
        if magic != _BINARY_MAGIC:
            raise ValueError(f"not a trajectory dump: {path}")
        dim, n_x, n_t = struct.unpack("<3q", fh.read(24))
        T, h_x, dt = struct.unpack("<3d", fh.read(24))
        n = n_x ** dim
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(n_t + 1, 2, n)
    header = {"dim": dim, "n_x": n_x, "n_t": n_t, "T": T, "h_x": h_x, "dt": dt}
    return header, data
