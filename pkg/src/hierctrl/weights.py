"""Auxiliary function eta and the singular weight families built from it.

The weight machinery has three layers:

1. ``build_eta``: a polynomial eta >= 0 vanishing on the domain boundary,
   with a single interior critical point at the centroid of a patch
   omega' and a positive gradient bound outside the patch.
2. ``eval_sigma_tau`` / ``eval_sigma_star_rho_star``: the space-time
   weights

       sigma(x,t) = (exp(4*lam*M) - exp(lam*(2M + eta(x)))) / sqrt(t(T-t))
       tau(x,t)   =  exp(lam*(2M + eta(x)))                 / sqrt(t(T-t))

   with M = max eta = 1 after normalization, plus the per-level envelope
   sigma*(t) = max_x sigma, rho*(t) = exp(s sigma*/2) and its minimum
   rho0 = rho*(T/2).
3. ``eval_modified_weights``: the variant whose time factor l(t) is
   frozen at T/2 on the left half so the weights stay bounded near t=0,
   and coincide with sigma, tau on [T/2, T].

Both sigma and tau blow up at t in {0, T}; those levels are stored as
inf, and every damped expression exp(-2 s sigma) (s tau)^k is defined to
be exactly 0 there (its continuous limit).  ``damped_weight`` evaluates
such expressions in log space so that no intermediate overflows.

Weight objects are immutable after construction; concurrent read-only
use is fine.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial import Polynomial

from .errors import ParameterWarning
from .grid import Field, Region, RegionMask, SpaceTimeGrid, region_mask

# exp(4*lam*M) must stay a normal double
_MAX_LAMBDA = 170.0

_TILT_MAX = 0.96


def _tilt(t: float) -> Polynomial:
    # x -> x + t*x*(1-x); an increasing bijection of [0,1] for |t| < 1
    return Polynomial([0.0, 1.0 + t, -t])


def _phi_for_center(c: float) -> Polynomial:
    """Increasing polynomial bijection of [0,1] mapping c to 1/2.

    Composed quadratic tilts; one tilt suffices for moderately offset
    centers, extreme centers take a few.  phi' > 0 on [0,1] throughout,
    so 4*phi*(1-phi) has its only interior critical point at c.
    """
    if not 0.0 < c < 1.0:
        raise ValueError(f"critical point {c} not inside (0,1)")
    if abs(c - 0.5) < 1e-14:
        return Polynomial([0.0, 1.0])
    if c > 0.5:
        inner = _phi_for_center(1.0 - c)
        return Polynomial([1.0]) - inner(Polynomial([1.0, -1.0]))
    phi = Polynomial([0.0, 1.0])
    ck = c
    for _ in range(64):
        t_need = (0.5 - ck) / (ck * (1.0 - ck))
        if t_need <= _TILT_MAX:
            return _tilt(t_need)(phi)
        phi = _tilt(_TILT_MAX)(phi)
        ck = ck + _TILT_MAX * ck * (1.0 - ck)
    raise RuntimeError(f"tilt composition failed to reach 1/2 from c={c}")


def _eta_axis_poly(c_unit: float) -> Polynomial:
    """Unit-interval factor 4*phi*(1-phi): max 1 at c, zero at 0 and 1."""
    phi = _phi_for_center(c_unit)
    return 4.0 * phi * (Polynomial([1.0]) - phi)


@dataclass(frozen=True)
class EtaFunction:
    """Samples of eta and its derivatives on the interior nodes.

    values: (n_nodes,) with analytic sup-norm 1 attained at x_c.
    grad: (n_nodes, dim) first partials.
    axis_derivs: [axis][order-1] -> (n_nodes,) pure partials up to order 4.
    c0: achieved min of |grad eta| over the nodes outside omega'.
    """

    values: np.ndarray
    grad: np.ndarray
    axis_derivs: tuple
    x_c: tuple
    c0: float
    omega_prime: RegionMask
    boundary_values: tuple
    polys: tuple = field(repr=False)

    @property
    def sup_norm(self) -> float:
        """Analytic sup of eta; the normalization fixes it to 1."""
        return 1.0


def build_eta(grid: SpaceTimeGrid, omega_prime: Region,
              c0_target: float = 0.0) -> EtaFunction:
    """Construct eta for a patch omega' strictly inside the domain.

    The single interior critical point sits at the centroid of omega'.
    Fails if omega' touches the boundary or if the achieved gradient
    bound outside omega' falls below ``c0_target``.
    """
    box = np.asarray(omega_prime, dtype=float)
    if box.ndim == 1:
        box = box[None, :]
    if box.shape != (grid.dim, 2):
        raise ValueError(f"omega_prime must give {grid.dim} axis intervals")
    for ax, (lo, hi) in enumerate(box):
        a, b = grid.domain[ax]
        if not (a < lo < hi < b):
            raise ValueError(
                f"omega_prime axis {ax} interval ({lo}, {hi}) must be "
                f"strictly inside ({a}, {b})")

    centers = []
    polys = []
    for ax, (lo, hi) in enumerate(box):
        a, b = grid.domain[ax]
        c_unit = ((lo + hi) / 2.0 - a) / (b - a)
        unit_poly = _eta_axis_poly(c_unit)
        # compose with the affine map onto [0,1]; derivatives then carry
        # the 1/(b-a) factors automatically
        to_unit = Polynomial([-a / (b - a), 1.0 / (b - a)])
        polys.append(unit_poly(to_unit))
        centers.append((lo + hi) / 2.0)

    coords = grid.node_coords()
    per_axis_vals = []   # [axis][order] -> samples, order 0..4
    for ax in range(grid.dim):
        xs = coords[:, ax]
        per_axis_vals.append([polys[ax].deriv(m)(xs) if m else polys[ax](xs)
                              for m in range(5)])

    if grid.dim == 1:
        values = per_axis_vals[0][0]
        grad = per_axis_vals[0][1][:, None]
        axis_derivs = (tuple(per_axis_vals[0][1:]),)
    else:
        fx, fy = per_axis_vals
        values = fx[0] * fy[0]
        grad = np.column_stack([fx[1] * fy[0], fx[0] * fy[1]])
        axis_derivs = (
            tuple(fx[m] * fy[0] for m in range(1, 5)),
            tuple(fx[0] * fy[m] for m in range(1, 5)),
        )

    bvals = []
    for ax in range(grid.dim):
        a, b = grid.domain[ax]
        bvals.extend([float(polys[ax](a)), float(polys[ax](b))])
    if max(abs(v) for v in bvals) > 1e-12:
        raise AssertionError(f"eta fails to vanish on the boundary: {bvals}")

    mask = region_mask(grid, omega_prime, label="omega_prime")
    outside = mask.indicator == 0.0
    gnorm = np.sqrt(np.sum(grad * grad, axis=1))
    c0 = float(gnorm[outside].min()) if outside.any() else float("inf")
    if c0 < c0_target:
        raise ValueError(
            f"achieved gradient bound {c0:.3e} below target {c0_target:.3e}")

    values = values.copy()
    values.setflags(write=False)
    grad.setflags(write=False)
    return EtaFunction(values=values, grad=grad, axis_derivs=axis_derivs,
                       x_c=tuple(centers), c0=c0, omega_prime=mask,
                       boundary_values=tuple(bvals), polys=tuple(polys))


@dataclass(frozen=True)
class CarlemanParams:
    """Scaling parameters of the weight family.

    lam must be at least 1.  The theory additionally wants s above an
    unknown threshold; here s only needs to be positive, and values below
    1 (often required to keep exp(-2 s sigma) representable) raise a
    ParameterWarning rather than an error.
    """

    lam: float
    s: float
    omega_prime: RegionMask

    def __post_init__(self):
        if self.lam < 1.0:
            raise ValueError(f"lambda must be >= 1, got {self.lam}")
        if self.lam > _MAX_LAMBDA:
            raise ValueError(f"lambda {self.lam} overflows the weight family")
        if not self.s > 0.0:
            raise ValueError(f"s must be positive, got {self.s}")
        if self.s < 1.0:
            warnings.warn(
                f"s = {self.s} below the nominal threshold 1; weights are "
                f"evaluated outside the proven parameter range",
                ParameterWarning, stacklevel=2)


def _interior_inverse_envelope(grid: SpaceTimeGrid) -> np.ndarray:
    """sqrt(t (T - t)) per level; zero at the endpoints."""
    t = grid.times
    return np.sqrt(np.maximum(t * (grid.T - t), 0.0))


def eval_sigma_tau(eta: EtaFunction, lam: float, grid: SpaceTimeGrid):
    """The two singular weights as Fields; inf at the endpoint levels."""
    M = eta.sup_norm
    num_tau = np.exp(lam * (2.0 * M + eta.values))
    num_sigma = np.exp(4.0 * lam * M) - num_tau
    den = _interior_inverse_envelope(grid)
    with np.errstate(divide="ignore"):
        inv_den = np.where(den > 0.0, 1.0 / den, np.inf)
    sigma = Field(np.outer(inv_den, num_sigma), grid)
    tau = Field(np.outer(inv_den, num_tau), grid)
    return sigma, tau


def eval_sigma_star_rho_star(sigma: Field, s: float):
    """Envelope sigma*(t) = max_x sigma, rho* = exp(s sigma*/2), rho0.

    rho* is inf at the endpoint levels (and wherever the exponential
    overflows); the companion array exp(-s sigma*) is kept separately so
    rho*^-2 is exact, including its zeros.
    """
    sigma_star = sigma.values.max(axis=1)
    with np.errstate(over="ignore"):
        rho_star = np.exp(0.5 * s * sigma_star)
    rho_star_inv2 = np.exp(-s * sigma_star)
    rho0 = float(rho_star[np.isfinite(rho_star)].min())
    return sigma_star, rho_star, rho_star_inv2, rho0


def eval_modified_weights(eta: EtaFunction, lam: float, grid: SpaceTimeGrid):
    """Left-bounded variant: l(t) = T/2 before the midpoint.

    On [T/2, T] the returned fields reuse the exact envelope values of
    sigma and tau, so equality there is bitwise.
    """
    den = _interior_inverse_envelope(grid)
    left = grid.times < 0.5 * grid.T - 0.25 * grid.dt
    l = den.copy()
    l[left] = 0.5 * grid.T
    M = eta.sup_norm
    num_tau = np.exp(lam * (2.0 * M + eta.values))
    num_sigma = np.exp(4.0 * lam * M) - num_tau
    with np.errstate(divide="ignore"):
        inv_l = np.where(l > 0.0, 1.0 / l, np.inf)
    sigma_bar = Field(np.outer(inv_l, num_sigma), grid)
    tau_bar = Field(np.outer(inv_l, num_tau), grid)
    return l, sigma_bar, tau_bar


def damped_weight(sigma_vals: np.ndarray, tau_vals: np.ndarray,
                  s: float, power: float) -> np.ndarray:
    """exp(-2 s sigma) * (s tau)^power, evaluated in log space.

    Entries where sigma is inf (endpoint levels) are exactly 0.
    """
    out = np.zeros_like(np.asarray(sigma_vals, dtype=float))
    finite = np.isfinite(sigma_vals)
    logw = -2.0 * s * np.asarray(sigma_vals)[finite]
    if power != 0:
        logw = logw + power * np.log(s * np.asarray(tau_vals)[finite])
    out[finite] = np.exp(np.clip(logw, -745.0, 700.0))
    return out


@dataclass(frozen=True)
class CarlemanWeights:
    """All weight samples for one (eta, lambda, s) triple."""

    params: CarlemanParams
    eta: EtaFunction
    sigma: Field
    tau: Field
    sigma_star: np.ndarray
    rho_star: np.ndarray
    rho_star_inv2: np.ndarray
    rho0: float
    l: np.ndarray
    sigma_bar: Field
    tau_bar: Field

    @property
    def lam(self) -> float:
        return self.params.lam

    @property
    def s(self) -> float:
        return self.params.s

    def damped(self, power: float, modified: bool = False) -> np.ndarray:
        """exp(-2 s sigma) (s tau)^power on all space-time nodes."""
        if modified:
            return damped_weight(self.sigma_bar.values, self.tau_bar.values,
                                 self.s, power)
        return damped_weight(self.sigma.values, self.tau.values,
                             self.s, power)


def build_carleman_weights(grid: SpaceTimeGrid, eta: EtaFunction,
                           lam: float, s: float) -> CarlemanWeights:
    params = CarlemanParams(lam=lam, s=s, omega_prime=eta.omega_prime)
    sigma, tau = eval_sigma_tau(eta, lam, grid)
    sigma_star, rho_star, rho_star_inv2, rho0 = eval_sigma_star_rho_star(sigma, s)
    l, sigma_bar, tau_bar = eval_modified_weights(eta, lam, grid)
    return CarlemanWeights(params=params, eta=eta, sigma=sigma, tau=tau,
                           sigma_star=sigma_star, rho_star=rho_star,
                           rho_star_inv2=rho_star_inv2, rho0=rho0,
                           l=l, sigma_bar=sigma_bar, tau_bar=tau_bar)


def auto_s(grid: SpaceTimeGrid, eta: EtaFunction, lam: float,
           budget: float = 600.0) -> float:
    """Largest s keeping 2 s sigma within the double-precision exponent.

    The bound is taken at the first interior level, where sigma is
    largest; 'budget' leaves headroom below log(DBL_MAX).
    """
    sigma, _ = eval_sigma_tau(eta, lam, grid)
    peak = sigma.values[1:-1].max()
    return float(budget / (2.0 * peak))


def weights_to_csv(w: CarlemanWeights, grid: SpaceTimeGrid, path) -> None:
    """Dump per-node weight samples: t, x[, y], sigma, tau, sigma_bar, tau_bar."""
    coords = grid.node_coords()
    cols = ["t", "x"] + (["y"] if grid.dim == 2 else []) + \
        ["sigma", "tau", "sigma_bar", "tau_bar"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k, t in enumerate(grid.times):
            for p in range(grid.n_nodes):
                row = [t, coords[p, 0]]
                if grid.dim == 2:
                    row.append(coords[p, 1])
                row += [w.sigma.values[k, p], w.tau.values[k, p],
                        w.sigma_bar.values[k, p], w.tau_bar.values[k, p]]
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
