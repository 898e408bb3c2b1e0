#!/usr/bin/env python3
"""
Finite-volume solver for the age-structured mean-field equation.

One time step is a Strang splitting: half an upwind step in age (with
reinjection at age zero shaped by mu), a full explicit opinion step with the
nonlocal interaction flux and diffusion, and another half step in age.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from model_core import (
    AgeKernel,
    InteractionFunction,
    ModelParams,
    OpinionDistribution,
    age_centers,
    lambda_bound,
)
from simulation_errors import CflViolation, Diverged, ModelError

logger = logging.getLogger(__name__)

DESK_CFL_FRACTION = 0.8
MASS_DRIFT_LIMIT = 1e-6
VALUE_LIMIT = 1e6
NEGATIVE_TOLERANCE = -1e-8

DIAGNOSTIC_COLUMNS = [
    't', 'mass', 'min_density', 'mean_opinion',
    'boundary_density_lo', 'boundary_density_hi',
    'exit_age_density', 'exit_age_moment',
]


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Cell-averaged joint density, opinion cells along rows and age cells along columns"""

    values: np.ndarray
    lo: float = -1.0
    hi: float = 1.0
    max_age: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ModelError(f"density grid must be 2-d (opinion x age), got shape {values.shape}")
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_product(cls, opinion: OpinionDistribution, J_x: int, J_a: int, params: ModelParams, age_profile=None):
        """Density mu(x) * pi(a), pi uniform unless an age profile is given"""
        dx = params.width / J_x
        if age_profile is None:
            age_profile = np.full(J_a, 1.0 / params.max_age)
        masses = opinion.cell_masses(J_x)
        return cls(np.outer(masses / dx, age_profile), params.opinion_lo, params.opinion_hi, params.max_age)

    @property
    def J_x(self) -> int:
        return self.values.shape[0]

    @property
    def J_a(self) -> int:
        return self.values.shape[1]

    @property
    def dx(self) -> float:
        return (self.hi - self.lo) / self.J_x

    @property
    def da(self) -> float:
        return self.max_age / self.J_a

    @property
    def x_interfaces(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.J_x + 1)

    @property
    def x_centers(self) -> np.ndarray:
        edges = self.x_interfaces
        return 0.5 * (edges[:-1] + edges[1:])

    @property
    def a_centers(self) -> np.ndarray:
        return age_centers(self.J_a, self.max_age)

    def with_values(self, values) -> 'DensityGrid':
        return DensityGrid(values, self.lo, self.hi, self.max_age)

    def mass(self) -> float:
        return float(self.values.sum() * self.dx * self.da)

    def min_value(self) -> float:
        return float(self.values.min())

    def age_marginal(self) -> np.ndarray:
        return self.values.sum(axis=0) * self.dx

    def opinion_totals(self) -> np.ndarray:
        return self.values.sum(axis=1) * self.da

    def mirror(self) -> 'DensityGrid':
        return self.with_values(self.values[::-1, :])

    def symmetry_error(self) -> float:
        return float(np.max(np.abs(self.values - self.values[::-1, :])))


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Phi[i, j]: integral over opinion cell j of varphi(y - x_i) for every interface x_i"""

    values: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    @property
    def J_x(self) -> int:
        return self.values.shape[1]


def build_phi_matrix(f: InteractionFunction, J_x: int, lo: float = -1.0, hi: float = 1.0) -> InteractionMatrix:
    if J_x < 2 or J_x % 2:
        raise ModelError(f"opinion grid needs an even cell count >= 2, got {J_x}")
    edges = np.linspace(lo, hi, J_x + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    dx = (hi - lo) / J_x
    if f.variant == 'constant':
        phi = dx * (centers[None, :] - edges[:, None])
    else:
        nodes, weights = np.polynomial.legendre.leggauss(3)
        points = centers[:, None] + 0.5 * dx * nodes[None, :]
        diff = points[None, :, :] - edges[:, None, None]
        phi = 0.5 * dx * np.sum(f.varphi(diff) * weights, axis=2)
    if lo == -hi:
        # exact discrete oddness on the mirror-symmetric grid
        phi = 0.5 * (phi - phi[::-1, ::-1])
    return InteractionMatrix(phi, lo, hi)


def kernel_operator(kernel: AgeKernel, J_a: int, max_age: float = 1.0):
    """Reduce a kernel to the cheapest form of G usable by the field computation"""
    if kernel.variant in ('uniform', 'of_target_age'):
        return 'target', kernel.target_weights(J_a, max_age)
    if kernel.variant == 'delta_same_age':
        return 'delta', None
    return 'full', kernel.grid_matrix(J_a, max_age)


def field_from_values(values: np.ndarray, phi: np.ndarray, operator, da: float) -> np.ndarray:
    mode, table = operator
    if mode == 'target':
        seen = phi @ (values @ table * da)
        return np.broadcast_to(seen[:, None], (phi.shape[0], values.shape[1]))
    if mode == 'delta':
        return phi @ values
    return (phi @ values) @ table.T * da


def interaction_field(rho: DensityGrid, Phi: InteractionMatrix, kernel: AgeKernel) -> np.ndarray:
    """Lambda at every interface and age: sum_l G[k, l] sum_j Phi[i, j] rho[j, l] da"""
    if Phi.J_x != rho.J_x:
        raise ModelError(f"interaction matrix is for {Phi.J_x} cells, density has {rho.J_x}")
    return field_from_values(rho.values, Phi.values, kernel_operator(kernel, rho.J_a, rho.max_age), rho.da)


def check_opinion_cfl(lam: np.ndarray, sigma: float, dt: float, dx: float):
    violations = []
    advective = dt * float(np.max(np.abs(lam[1:-1]))) / dx if lam.shape[0] > 2 else 0.0
    diffusive = sigma ** 2 * dt / dx ** 2
    if advective > 1.0:
        violations.append(f"advective dt*|Lambda|/dx = {advective:.4g} > 1")
    if diffusive > 1.0:
        violations.append(f"diffusive sigma^2*dt/dx^2 = {diffusive:.4g} > 1")
    if violations:
        raise CflViolation(violations)


def opinion_update(values: np.ndarray, lam: np.ndarray, sigma: float, dt: float, dx: float) -> np.ndarray:
    flux = np.zeros((values.shape[0] + 1, values.shape[1]))
    # no flux through the two boundary interfaces
    flux[1:-1] = (
        0.5 * (values[:-1] + values[1:]) * lam[1:-1]
        - (0.5 * sigma ** 2 / dx) * (values[1:] - values[:-1])
    )
    return values - (dt / dx) * (flux[1:] - flux[:-1])


def opinion_step(rho: DensityGrid, lam: np.ndarray, sigma: float, dt: float) -> DensityGrid:
    check_opinion_cfl(lam, sigma, dt, rho.dx)
    return rho.with_values(opinion_update(rho.values, lam, sigma, dt, rho.dx))


def age_update(values: np.ndarray, mu_cells: np.ndarray, kappa: float, dx: float) -> np.ndarray:
    exiting = values[:, -1].sum() * dx
    shifted = np.empty_like(values)
    shifted[:, 1:] = (1.0 - kappa) * values[:, 1:] + kappa * values[:, :-1]
    # mass leaving the oldest cell re-enters at age zero with opinions drawn from mu
    shifted[:, 0] = (1.0 - kappa) * values[:, 0] + kappa * exiting * mu_cells / dx
    return shifted


def age_half_step(rho: DensityGrid, mu_cells, kappa: float) -> DensityGrid:
    if kappa > 1.0:
        raise CflViolation(f"age Courant number kappa = {kappa:.4g} > 1")
    mu_cells = np.asarray(mu_cells, dtype=float)
    if mu_cells.shape != (rho.J_x,):
        raise ModelError(f"mu has {mu_cells.size} cells, density has {rho.J_x}")
    return rho.with_values(age_update(rho.values, mu_cells, kappa, rho.dx))


@dataclass
class CflReport:
    ok: bool
    dt: float
    bounds: dict
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'ok': self.ok, 'dt': self.dt, 'bounds': self.bounds,
                'violations': self.violations, 'warnings': self.warnings}


def stable_dt_bounds(params: ModelParams, f: InteractionFunction, kernel: AgeKernel, J_x: int, J_a: int) -> dict:
    """Largest dt allowed by each explicit-step constraint"""
    dx = params.width / J_x
    da = params.max_age / J_a
    lam_max = lambda_bound(params, f, kernel)
    sigma2 = params.sigma ** 2
    bounds = {}
    if params.tau > 0:
        bounds['age'] = 2.0 * da / params.tau
    if lam_max > 0:
        bounds['advective'] = dx / lam_max
    if sigma2 > 0:
        bounds['diffusive'] = dx ** 2 / sigma2
        if lam_max > 0:
            bounds['centered'] = sigma2 / lam_max ** 2
    return bounds


def suggest_dt(params: ModelParams, f: InteractionFunction, kernel: AgeKernel, J_x: int, J_a: int,
               fraction: float = DESK_CFL_FRACTION) -> float:
    bounds = stable_dt_bounds(params, f, kernel, J_x, J_a)
    if not bounds:
        return 1.0
    return fraction * min(bounds.values())


@dataclass(frozen=True, eq=False)
class PdeRunConfig:
    params: ModelParams
    f: InteractionFunction
    kernel: AgeKernel
    mu: OpinionDistribution
    rho0: OpinionDistribution | DensityGrid
    J_x: int = 200
    J_a: int = 200
    dt: float | None = None
    t_final: float = 0.0
    snapshot_every: int | None = None
    diagnostics_every: int = 1
    totals_every: int | None = None
    log_every: int | None = None

    def __post_init__(self):
        errors = []
        if self.J_x < 2 or self.J_x % 2:
            errors.append(f"J_x must be even and >= 2, got {self.J_x}")
        if self.J_a < 1:
            errors.append(f"J_a must be >= 1, got {self.J_a}")
        if self.dt is not None and not self.dt > 0:
            errors.append(f"dt must be > 0, got {self.dt}")
        if not self.t_final >= 0:
            errors.append(f"t_final must be >= 0, got {self.t_final}")
        for name in ('snapshot_every', 'totals_every', 'log_every'):
            stride = getattr(self, name)
            if stride is not None and stride < 1:
                errors.append(f"{name} must be >= 1, got {stride}")
        if self.diagnostics_every < 1:
            errors.append(f"diagnostics_every must be >= 1, got {self.diagnostics_every}")
        if errors:
            raise ModelError("; ".join(errors))

    @property
    def dx(self) -> float:
        return self.params.width / self.J_x

    @property
    def da(self) -> float:
        return self.params.max_age / self.J_a

    def resolved_dt(self) -> float:
        if self.dt is not None:
            return float(self.dt)
        return suggest_dt(self.params, self.f, self.kernel, self.J_x, self.J_a)

    def n_steps(self) -> int:
        return int(round(self.t_final / self.resolved_dt()))

    def mu_cells(self) -> np.ndarray:
        return self.mu.cell_masses(self.J_x)

    def initial_grid(self) -> DensityGrid:
        if isinstance(self.rho0, DensityGrid):
            if self.rho0.values.shape != (self.J_x, self.J_a):
                raise ModelError(f"initial density has shape {self.rho0.values.shape}, grid is ({self.J_x}, {self.J_a})")
            return self.rho0
        return DensityGrid.from_product(self.rho0, self.J_x, self.J_a, self.params)


def cfl_check(cfg: PdeRunConfig) -> CflReport:
    """Courant numbers of the configured step; a number above one is a violation"""
    dt = cfg.resolved_dt()
    params = cfg.params
    lam_max = lambda_bound(params, cfg.f, cfg.kernel)
    numbers = {
        'age': 0.5 * params.tau * dt / cfg.da,
        'advective': dt * lam_max / cfg.dx,
        'diffusive': params.sigma ** 2 * dt / cfg.dx ** 2,
    }
    violations = [f"{name} Courant number {value:.4g} > 1" for name, value in numbers.items() if value > 1.0]
    warnings = []
    if params.sigma > 0 and lam_max > 0:
        numbers['centered'] = lam_max ** 2 * dt / params.sigma ** 2
        if numbers['centered'] > 1.0:
            warnings.append(
                f"centered flux may oscillate: Lambda_max^2*dt/sigma^2 = {numbers['centered']:.4g} > 1"
            )
    return CflReport(not violations, dt, numbers, violations, warnings)


@dataclass
class PdeRunResult:
    snapshots: list
    diagnostics: pd.DataFrame
    totals: list
    dt: float
    steps: int
    cfl: CflReport
    runtime_seconds: float = 0.0

    @property
    def final(self) -> DensityGrid:
        return self.snapshots[-1][1]

    def mass_drift(self) -> float:
        return float(np.max(np.abs(self.diagnostics['mass'].to_numpy() - self.diagnostics['mass'].iloc[0])))


class PdeSolver:
    """Precomputes the interaction matrix, kernel form and age Courant number for one config"""

    def __init__(self, cfg: PdeRunConfig, check=True):
        self.cfg = cfg
        self.dt = cfg.resolved_dt()
        self.cfl = cfl_check(cfg)
        if check and not self.cfl.ok:
            raise CflViolation(self.cfl.violations)
        for warning in self.cfl.warnings:
            logger.warning(f"⚠️  {warning}")
        params = cfg.params
        self.phi = build_phi_matrix(cfg.f, cfg.J_x, params.opinion_lo, params.opinion_hi)
        self.operator = kernel_operator(cfg.kernel, cfg.J_a, params.max_age)
        self.mu_cells = cfg.mu_cells()
        self.kappa = 0.5 * params.tau * self.dt / cfg.da
        self.dx = cfg.dx
        self.da = cfg.da

    def field(self, values: np.ndarray) -> np.ndarray:
        return field_from_values(values, self.phi.values, self.operator, self.da)

    def step_values(self, values: np.ndarray) -> np.ndarray:
        sigma = self.cfg.params.sigma
        half = age_update(values, self.mu_cells, self.kappa, self.dx)
        lam = self.field(half)
        check_opinion_cfl(lam, sigma, self.dt, self.dx)
        moved = opinion_update(half, lam, sigma, self.dt, self.dx)
        return age_update(moved, self.mu_cells, self.kappa, self.dx)

    def step(self, rho: DensityGrid) -> DensityGrid:
        return rho.with_values(self.step_values(rho.values))

    def diagnostics_row(self, t: float, values: np.ndarray, centers: np.ndarray) -> tuple:
        dx, da = self.dx, self.da
        exit_column = values[:, -1]
        return (
            t,
            float(values.sum() * dx * da),
            float(values.min()),
            float(centers @ values.sum(axis=1) * dx * da),
            float(values[0].sum() * da),
            float(values[-1].sum() * da),
            float(exit_column.sum() * dx),
            float(centers @ exit_column * dx),
        )

    def run(self) -> PdeRunResult:
        cfg = self.cfg
        started = time.time()
        rho = cfg.initial_grid()
        values = np.array(rho.values)
        steps = cfg.n_steps()
        snapshot_every = cfg.snapshot_every or max(steps, 1)
        totals_every = cfg.totals_every or snapshot_every
        log_every = cfg.log_every or max(steps // 10, 1)
        centers = rho.x_centers

        logger.info(f"🚀 PDE run: J_x={cfg.J_x}, J_a={cfg.J_a}, dt={self.dt:.3g}, {steps} steps")
        mass0 = rho.mass()
        rows = [self.diagnostics_row(0.0, values, centers)]
        snapshots = [(0.0, rho)]
        totals = [(0.0, rho.opinion_totals())]
        lowest = float(values.min())

        for n in range(1, steps + 1):
            values = self.step_values(values)
            t = n * self.dt
            if n % cfg.diagnostics_every == 0 or n == steps:
                row = self.diagnostics_row(t, values, centers)
                rows.append(row)
                if not np.isfinite(row[1]) or abs(row[1] - mass0) > MASS_DRIFT_LIMIT:
                    raise Diverged(f"mass drifted to {row[1]:.12g} at t={t:.4g}")
                lowest = min(lowest, row[2])
            if n % snapshot_every == 0 or n == steps:
                if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > VALUE_LIMIT:
                    raise Diverged(f"density left [-{VALUE_LIMIT:g}, {VALUE_LIMIT:g}] at t={t:.4g}")
                snapshots.append((t, rho.with_values(values)))
            if n % totals_every == 0 or n == steps:
                totals.append((t, values.sum(axis=1) * self.da))
            if n % log_every == 0:
                logger.info(f"   step {n}/{steps} t={t:.4g} mass={rows[-1][1]:.12f}")

        if lowest < NEGATIVE_TOLERANCE:
            logger.warning(f"⚠️  density undershoot down to {lowest:.3e}")
        runtime = time.time() - started
        logger.info(f"✅ PDE run finished in {runtime:.2f}s")
        diagnostics = pd.DataFrame(rows, columns=DIAGNOSTIC_COLUMNS)
        return PdeRunResult(snapshots, diagnostics, totals, self.dt, steps, self.cfl, runtime)


def strang_step(rho: DensityGrid, cfg: PdeRunConfig, solver: PdeSolver | None = None) -> DensityGrid:
    solver = solver or PdeSolver(cfg)
    return solver.step(rho)


def run_pde(cfg: PdeRunConfig) -> PdeRunResult:
    return PdeSolver(cfg).run()
