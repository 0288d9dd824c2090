"""Problem aggregation: declarative description and its discrete form.

``HierarchicProblem`` holds everything a run needs in declarative form
(grid sizes, region intervals, coefficient expressions, functional
weights, targets, weight parameters, solver options, seed).
``prepare`` lowers it to a ``DiscreteProblem``: grid, masks, eta and the
Carleman weight family, sampled coefficients, factorized step operators,
and the assembled coupled system, with 'auto' follower weights resolved
through the coercivity thresholds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import HypothesisWarning, ValidationError
from .expressions import Expression
from .grid import RegionMask, SpaceTimeGrid, build_grid, region_mask
from .pde import CoefficientField, StepOperators, TwoPointSystem
from .weights import CarlemanWeights, EtaFunction, auto_s, build_carleman_weights, build_eta

MU_DEFAULT_SAFETY = 2.0


@dataclass
class SolverOptions:
    """Tolerances and iteration budgets, overridable from problem files."""

    nash_tol: float = 1e-10
    nash_maxiter: int = 500
    cg_tol: float = 1e-10
    cg_maxiter: int = 20000
    coupled_backend: str = "assembled"
    sweep_tol: float = 1e-10
    sweep_maxiter: int = 300
    power_tol: float = 1e-10
    power_maxiter: int = 2000
    relax: float = 1.0


def _interval_intersection(a, b):
    out = []
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    for (a0, a1), (b0, b1) in zip(a, b):
        lo, hi = max(a0, b0), min(a1, b1)
        if hi <= lo:
            return None
        out.append((lo, hi))
    return out


def default_omega_prime(omega, od):
    """Central half of the omega/observation intersection, per axis."""
    inter = _interval_intersection(omega, od)
    if inter is None:
        raise ValidationError(
            "omega and Od do not intersect; give omega_prime explicitly")
    patch = []
    for lo, hi in inter:
        c, r = 0.5 * (lo + hi), 0.25 * (hi - lo)
        patch.append((c - r, c + r))
    return patch


@dataclass
class HierarchicProblem:
    """Declarative description of one control problem."""

    dim: int = 1
    n_x: int = 31
    n_t: int = 40
    T: float = 1.0
    domain: Optional[Sequence] = None

    omega: Sequence = (0.3, 0.7)
    omega1: Sequence = (0.05, 0.2)
    omega2: Sequence = (0.8, 0.95)
    od: Sequence = (0.25, 0.75)
    omega_prime: Optional[Sequence] = None

    a11: Union[str, float] = 0.0
    a12: Union[str, float] = 0.0
    a21: Union[str, float] = 0.0
    a22: Union[str, float] = 0.0

    alphas: Sequence[float] = (1.0, 1.0)
    mu: Union[str, Sequence[float]] = "auto"
    mu_safety: float = MU_DEFAULT_SAFETY

    y0: Optional[Sequence] = None          # pair of expressions
    yd1: Optional[Sequence] = None         # follower-1 target pair
    yd2: Optional[Sequence] = None

    lam: float = 2.0
    s: Union[str, float] = "auto"

    g: Union[str, float] = 0.0             # controls for plain simulation
    h1: Union[str, float] = 0.0
    h2: Union[str, float] = 0.0

    solver: SolverOptions = field(default_factory=SolverOptions)
    seed: int = 0

    def validate(self) -> None:
        """Structural checks that need no grid."""
        if self.dim not in (1, 2):
            raise ValidationError(f"dim must be 1 or 2, got {self.dim}")
        for name in ("omega", "omega1", "omega2", "od"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape != (self.dim, 2) or np.any(arr[:, 1] <= arr[:, 0]):
                raise ValidationError(f"region {name} must give {self.dim} "
                                      f"nondegenerate intervals")
        for name in ("omega1", "omega2"):
            if _interval_intersection(getattr(self, name), self.omega) is not None:
                raise ValidationError(f"{name} intersects omega")
        a = np.asarray(self.alphas, dtype=float)
        if a.shape != (2,) or np.any(a <= 0):
            raise ValidationError("alphas must be two positive numbers")
        if not isinstance(self.mu, str):
            m = np.asarray(self.mu, dtype=float)
            if m.shape != (2,) or np.any(m <= 0):
                raise ValidationError("mu must be 'auto' or two positive numbers")
        elif self.mu != "auto":
            raise ValidationError(f"mu must be 'auto' or a pair, got {self.mu!r}")
        if self.mu_safety <= 1.0:
            raise ValidationError("mu_safety must exceed 1")
        if self.lam < 1.0:
            raise ValidationError("lambda must be at least 1")
        if isinstance(self.s, str) and self.s != "auto":
            raise ValidationError(f"s must be 'auto' or positive, got {self.s!r}")
        if not isinstance(self.s, str) and not self.s > 0:
            raise ValidationError("s must be positive")


@dataclass
class DiscreteProblem:
    """Grid-level realization of a HierarchicProblem."""

    source: HierarchicProblem
    grid: SpaceTimeGrid
    omega: RegionMask
    omega_i: tuple
    od: RegionMask
    eta: EtaFunction
    weights: CarlemanWeights
    coeffs: CoefficientField
    ops: StepOperators
    alphas: tuple
    mus: tuple
    mu_thresholds: tuple
    tau_coercivity: float
    lambda_norm_bounds: tuple
    y0_vec: np.ndarray
    yd: tuple                  # per follower: (c1, c2) level arrays or None
    sign_ok: bool
    a0: float
    _system: Optional[TwoPointSystem] = None

    @property
    def solver(self) -> SolverOptions:
        return self.source.solver

    @property
    def s(self) -> float:
        return self.weights.s

    @property
    def lam(self) -> float:
        return self.weights.lam

    def rng(self, stream: int) -> np.random.Generator:
        """Deterministic generator; distinct streams stay independent."""
        return np.random.default_rng([int(self.source.seed), int(stream)])

    def system(self) -> TwoPointSystem:
        if self._system is None:
            self._system = TwoPointSystem(
                self.grid, self.ops, self.omega, self.omega_i, self.od,
                self.alphas, self.mus, self.weights.rho_star_inv2)
        return self._system

    def eval_levels(self, spec) -> np.ndarray:
        """Sample an expression on every time level: (n_t+1, n_nodes)."""
        if isinstance(spec, (int, float)):
            return np.full((self.grid.n_t + 1, self.grid.n_nodes), float(spec))
        expr = spec if isinstance(spec, Expression) else Expression(spec)
        vals = np.stack([expr(self.grid.node_coords(), t) for t in self.grid.times])
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"expression {expr.source!r} is not finite "
                                  f"on the grid")
        return vals

    def hypothesis_report(self) -> dict:
        """Status of the control-theorem hypotheses for this problem."""
        above = tuple(m > t for m, t in zip(self.mus, self.mu_thresholds))
        return {
            "od_omega_nonempty": self.od.intersects(self.omega),
            "sign_condition": self.sign_ok,
            "a0": self.a0,
            "mu_above_thresholds": above,
        }

    def warn_hypotheses(self) -> None:
        rep = self.hypothesis_report()
        if not rep["od_omega_nonempty"]:
            warnings.warn("Od and omega do not intersect; controllability "
                          "has no guarantee here", HypothesisWarning, stacklevel=2)
        if not rep["sign_condition"]:
            warnings.warn("coupling a21 is not one-signed on (Od & omega); "
                          "the observability mechanism is unsupported",
                          HypothesisWarning, stacklevel=2)
        if not all(rep["mu_above_thresholds"]):
            warnings.warn("follower weights mu are below the coercivity "
                          "thresholds; the Nash operator may be indefinite",
                          HypothesisWarning, stacklevel=2)


def _target_levels(disc_eval, pair) -> Optional[tuple]:
    if pair is None:
        return None
    if len(pair) != 2:
        raise ValidationError("targets must give one expression per component")
    return (disc_eval(pair[0]), disc_eval(pair[1]))


def prepare(hp: HierarchicProblem, require_od_omega: bool = False) -> DiscreteProblem:
    """Lower a declarative problem to its discrete form.

    'auto' weight and follower parameters are resolved here: s from the
    representability budget of the weight family, mu from the coercivity
    thresholds times mu_safety.
    """
    hp.validate()
    grid = build_grid(hp.dim, hp.n_x, hp.n_t, hp.T, hp.domain)

    omega = region_mask(grid, hp.omega, "omega")
    om1 = region_mask(grid, hp.omega1, "omega1")
    om2 = region_mask(grid, hp.omega2, "omega2")
    od = region_mask(grid, hp.od, "Od")
    for name, m in (("omega1", om1), ("omega2", om2)):
        if m.intersects(omega):
            raise ValidationError(f"{name} intersects omega")
    if require_od_omega and not od.intersects(omega):
        raise ValidationError("Od and omega must intersect for this command")

    patch = hp.omega_prime if hp.omega_prime is not None else \
        default_omega_prime(hp.omega, hp.od)
    eta = build_eta(grid, patch)

    lam = float(hp.lam)
    s = auto_s(grid, eta, lam) if hp.s == "auto" else float(hp.s)
    cw = build_carleman_weights(grid, eta, lam, s)

    coeffs = CoefficientField.build(grid, hp.a11, hp.a12, hp.a21, hp.a22)
    ops = StepOperators(grid, coeffs)

    inter = _interval_intersection(hp.omega, hp.od)
    if inter is not None:
        sign_ok, a0, _ = coeffs.sign_certificate(grid, region_mask(grid, inter))
    else:
        sign_ok, a0 = False, 0.0

    n = grid.n_nodes
    if hp.y0 is None:
        y0_vec = np.zeros(2 * n)
    else:
        if len(hp.y0) != 2:
            raise ValidationError("y0 must give one expression per component")
        e1, e2 = (Expression(c) for c in hp.y0)
        y0_vec = np.concatenate([e1(grid.node_coords(), 0.0),
                                 e2(grid.node_coords(), 0.0)])
        if not np.all(np.isfinite(y0_vec)):
            raise ValidationError("initial data is not finite on the grid")

    disc = DiscreteProblem(
        source=hp, grid=grid, omega=omega, omega_i=(om1, om2), od=od,
        eta=eta, weights=cw, coeffs=coeffs, ops=ops,
        alphas=tuple(float(a) for a in hp.alphas),
        mus=(1.0, 1.0), mu_thresholds=(0.0, 0.0), tau_coercivity=0.0,
        lambda_norm_bounds=(0.0, 0.0),
        y0_vec=y0_vec, yd=(None, None), sign_ok=sign_ok, a0=a0)
    disc.yd = (_target_levels(disc.eval_levels, hp.yd1),
               _target_levels(disc.eval_levels, hp.yd2))

    # follower weights: explicit values or auto from the coercivity data.
    # Auto takes the safety factor times the larger of the coercivity
    # threshold and the balance scale alpha_i / rho0^2; the floor keeps
    # the weighted penalty comparable to the tracking term (the bare
    # thresholds are usually orders of magnitude below that, giving the
    # followers a degenerate, near-free game).
    from .nash import coercivity_tau   # deferred, nash builds on this module
    if hp.mu == "auto":
        report = coercivity_tau(disc, mus=None)
        mus = tuple(max(hp.mu_safety * max(t, a / cw.rho0 ** 2),
                        np.finfo(float).tiny)
                    for t, a in zip(report.thresholds, disc.alphas))
        report = report.with_mus(mus, cw.rho0)
    else:
        mus = tuple(float(m) for m in hp.mu)
        report = coercivity_tau(disc, mus=mus)
    disc.mus = mus
    disc.mu_thresholds = report.thresholds
    disc.tau_coercivity = report.tau
    disc.lambda_norm_bounds = report.norm_bounds
    return disc
