#!/usr/bin/env python3
"""
Stationary states as fixed points of lambda -> F(lambda).

For a fixed interaction density lambda the stationary equation is linear in
rho and age plays the role of time, so the columns rho(a_k, .) follow from mu
by repeated application of the one-step propagator Id + da * Omega.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse

from model_core import AgeKernel, InteractionFunction, ModelParams, OpinionDistribution
from pde_solver import (
    DensityGrid,
    build_phi_matrix,
    field_from_values,
    opinion_update,
    stable_dt_bounds,
)
from reductions import cluster_detect
from simulation_errors import Diverged, KernelError, ModelError, NotConverged

logger = logging.getLogger(__name__)

K_SUM_TOL = 1e-10
K_NEGATIVE_TOL = -1e-10
MONOTONE_PECLET = 2.0
COLUMN_LIMIT = 1e6
SEED_WIDTH = 0.15
SEED_CUTOFF = 3.0
TARGET_NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class LambdaVector:
    """Cell masses of the age-averaged interaction density"""

    masses: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        masses = np.array(self.masses, dtype=float).ravel()
        masses.setflags(write=False)
        object.__setattr__(self, 'masses', masses)

    @property
    def J_x(self) -> int:
        return self.masses.size

    @property
    def dx(self) -> float:
        return (self.hi - self.lo) / self.J_x

    def in_K(self, sum_tol: float = K_SUM_TOL, negative_tol: float = K_NEGATIVE_TOL) -> bool:
        return bool(abs(self.masses.sum() - 1.0) <= sum_tol and self.masses.min() >= negative_tol)

    def check(self):
        if not self.in_K():
            raise ModelError(
                f"lambda outside K: sum={self.masses.sum():.12g}, min={self.masses.min():.3e}"
            )
        return self


@dataclass(frozen=True, eq=False)
class SteadyStateConfig:
    params: ModelParams
    f: InteractionFunction
    kernel: AgeKernel = field(default_factory=AgeKernel.uniform)
    mu_cells: np.ndarray | None = None
    J_x: int = 200
    J_a: int | None = None
    tol: float = 1e-8
    max_iter: int = 10_000
    damping: float = 1.0
    classical_tol: float = 1e-8
    classical_patience: int = 100
    classical_max_steps: int = 1_000_000
    peak_threshold: float = 1.2
    peak_separation: int = 3
    log_every: int = 100

    def __post_init__(self):
        errors = []
        if self.J_x < 2 or self.J_x % 2:
            errors.append(f"J_x must be even and >= 2, got {self.J_x}")
        if self.J_a is not None and self.J_a < 1:
            errors.append(f"J_a must be >= 1, got {self.J_a}")
        if not 0 < self.damping <= 1:
            errors.append(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tol > 0 or self.max_iter < 1:
            errors.append("tol must be > 0 and max_iter >= 1")
        if self.mu_cells is not None and np.asarray(self.mu_cells).size != self.J_x:
            errors.append(f"mu has {np.asarray(self.mu_cells).size} cells, grid has {self.J_x}")
        if errors:
            raise ModelError("; ".join(errors))

    @property
    def dx(self) -> float:
        return self.params.width / self.J_x

    def opinion_dt(self) -> float:
        """Stable explicit step of the single-age opinion equation"""
        bounds = stable_dt_bounds(self.params.with_tau(0.0), self.f, AgeKernel.uniform(), self.J_x, 1)
        return 0.8 * min(bounds.values()) if bounds else 1.0

    def resolved_J_a(self) -> int:
        if self.J_a is not None:
            return int(self.J_a)
        if self.params.tau <= 0:
            raise ModelError("stationary propagator needs tau > 0")
        # one age step advances the opinion equation by da / tau
        return max(1, math.ceil(self.params.max_age / (self.params.tau * self.opinion_dt())))

    def with_tau(self, tau: float) -> 'SteadyStateConfig':
        return replace(self, params=self.params.with_tau(tau))

    def with_mu(self, mu_cells) -> 'SteadyStateConfig':
        return replace(self, mu_cells=np.asarray(mu_cells, dtype=float))


@dataclass(frozen=True, eq=False)
class Propagator:
    omega: sparse.csr_matrix
    step: sparse.csr_matrix
    lam_iface: np.ndarray
    J_a: int
    da: float

    def dense_step(self) -> np.ndarray:
        return self.step.toarray()


@dataclass
class SteadyStateResult:
    lam: LambdaVector
    rho: DensityGrid
    columns: np.ndarray
    iterations: int
    residual_inf: float
    converged: bool
    history: list = field(default_factory=list)
    outside_K: int = 0
    lowest_entry: float = 0.0
    peclet: float = 0.0


def cell_peclet(lam_iface: np.ndarray, sigma: float, dx: float) -> float:
    """max |Lambda| dx / (sigma^2 / 2); the centered flux keeps masses nonnegative up to 2"""
    drift = float(np.max(np.abs(lam_iface))) if lam_iface.size else 0.0
    if drift == 0.0:
        return 0.0
    if sigma == 0:
        return float('inf')
    return drift * dx / (0.5 * sigma ** 2)


def build_propagator(lam: LambdaVector, cfg: SteadyStateConfig) -> Propagator:
    """Omega = (1/(tau dx)) C (diag(Lambda) F1 + sigma^2/2 F2) acting on cell masses"""
    params = cfg.params
    if params.tau <= 0:
        raise ModelError("stationary propagator needs tau > 0; use the tau = 0 reduction instead")
    if lam.J_x != cfg.J_x:
        raise ModelError(f"lambda has {lam.J_x} cells, grid has {cfg.J_x}")
    dx = cfg.dx
    J_a = cfg.resolved_J_a()
    da = params.max_age / J_a
    phi = build_phi_matrix(cfg.f, cfg.J_x, params.opinion_lo, params.opinion_hi)
    lam_iface = phi.values @ (lam.masses / dx)
    lam_iface[0] = lam_iface[-1] = 0.0

    diffusion = 0.5 * params.sigma ** 2 / dx
    # minus the interface flux: alpha * m_left + beta * m_right, zero at both boundaries
    alpha = np.zeros(cfg.J_x + 1)
    beta = np.zeros(cfg.J_x + 1)
    alpha[1:-1] = -0.5 * lam_iface[1:-1] - diffusion
    beta[1:-1] = -0.5 * lam_iface[1:-1] + diffusion
    scale = 1.0 / (params.tau * dx)
    omega = sparse.diags(
        [-scale * alpha[1:-1], scale * (alpha[1:] - beta[:-1]), scale * beta[1:-1]],
        [-1, 0, 1], format='csr',
    )
    step = (sparse.identity(cfg.J_x, format='csr') + da * omega).tocsr()
    return Propagator(omega, step, lam_iface, J_a, da)


def propagate_age(P: Propagator, mu_cells) -> np.ndarray:
    """Cell-mass columns at ages k * da for k = 0..J_a"""
    mu_cells = np.asarray(mu_cells, dtype=float)
    columns = np.empty((mu_cells.size, P.J_a + 1))
    columns[:, 0] = mu_cells
    for k in range(P.J_a):
        columns[:, k + 1] = P.step @ columns[:, k]
    if not np.all(np.isfinite(columns)) or np.max(np.abs(columns)) > COLUMN_LIMIT:
        raise Diverged(f"age propagation blew up with J_a={P.J_a}; refine the age grid")
    return columns


def age_average(columns: np.ndarray, weights: np.ndarray, da: float) -> np.ndarray:
    """sum_k M(a_k) rho_k da, each age cell taking the mean of its two bounding columns"""
    cells = 0.5 * (columns[:, :-1] + columns[:, 1:])
    return cells @ (weights * da)


def columns_to_density(columns: np.ndarray, params: ModelParams) -> DensityGrid:
    """Cell-centered joint density for a uniform age profile"""
    J_x = columns.shape[0]
    dx = params.width / J_x
    cells = 0.5 * (columns[:, :-1] + columns[:, 1:])
    return DensityGrid(cells / (dx * params.max_age), params.opinion_lo, params.opinion_hi, params.max_age)


def _target_weights(cfg: SteadyStateConfig, J_a: int) -> np.ndarray:
    if cfg.kernel.variant not in ('uniform', 'of_target_age'):
        raise KernelError("stationary map needs a kernel depending on the target age only")
    weights = cfg.kernel.target_weights(J_a, cfg.params.max_age)
    total = weights.sum() * (cfg.params.max_age / J_a)
    if abs(total - 1.0) > TARGET_NORMALIZATION_TOL:
        raise KernelError(f"target-age kernel integrates to {total:.9g}, expected 1")
    return weights / total


def _mu_cells(cfg: SteadyStateConfig) -> np.ndarray:
    if cfg.mu_cells is None:
        raise ModelError("stationary map needs the age-zero distribution mu")
    return np.asarray(cfg.mu_cells, dtype=float)


def _evaluate(lam: LambdaVector, cfg: SteadyStateConfig):
    P = build_propagator(lam, cfg)
    columns = propagate_age(P, _mu_cells(cfg))
    new = age_average(columns, _target_weights(cfg, P.J_a), P.da)
    return LambdaVector(new, lam.lo, lam.hi), columns, P


def apply_F(lam: LambdaVector, cfg: SteadyStateConfig) -> LambdaVector:
    return _evaluate(lam, cfg)[0]


def residual(lam: LambdaVector, cfg: SteadyStateConfig) -> float:
    return float(np.max(np.abs(apply_F(lam, cfg).masses - lam.masses)))


def fixed_point_iterate(lambda0: LambdaVector, cfg: SteadyStateConfig, tol: float | None = None,
                        max_iter: int | None = None, damping: float | None = None) -> SteadyStateResult:
    """Picard iteration lambda <- (1 - theta) lambda + theta F(lambda)

    Every image is checked against K; excursions are counted in the result
    together with the lowest entry seen and the cell Peclet number.
    """
    tol = cfg.tol if tol is None else tol
    max_iter = cfg.max_iter if max_iter is None else max_iter
    theta = cfg.damping if damping is None else damping
    lam = lambda0.check()
    history = []
    outside, lowest, peclet = 0, float(lam.masses.min()), 0.0
    logger.info(f"🚀 Fixed-point iteration: tau={cfg.params.tau}, J_x={cfg.J_x}, J_a={cfg.resolved_J_a()}")

    def finish(iterations, converged):
        return SteadyStateResult(lam, columns_to_density(columns, cfg.params), columns, iterations, gap,
                                 converged, history, outside, lowest, peclet)

    for iteration in range(1, max_iter + 1):
        image, columns, P = _evaluate(lam, cfg)
        peclet = max(peclet, cell_peclet(P.lam_iface, cfg.params.sigma, cfg.dx))
        lowest = min(lowest, float(image.masses.min()))
        if not image.in_K():
            outside += 1
            if outside == 1:
                logger.warning(
                    f"⚠️  iterate {iteration} left K: sum={image.masses.sum():.12g}, "
                    f"min={image.masses.min():.3e}, cell Peclet {peclet:.3g}"
                    + (f" > {MONOTONE_PECLET:g}, refine J_x" if peclet > MONOTONE_PECLET else "")
                )
        gap = float(np.max(np.abs(image.masses - lam.masses)))
        history.append(gap)
        if gap < tol:
            logger.info(f"✅ Converged after {iteration} iterations, residual {gap:.3e}")
            return finish(iteration, True)
        if iteration % cfg.log_every == 0:
            logger.info(f"   iteration {iteration}: residual {gap:.3e}")
        lam = LambdaVector((1.0 - theta) * lam.masses + theta * image.masses, lam.lo, lam.hi)

    result = finish(max_iter, False)
    raise NotConverged(f"no fixed point after {max_iter} iterations (residual {gap:.3e})",
                       last_iterate=lam, residual=gap, result=result)


def gaussian_seed(J_x: int, centers, width: float = SEED_WIDTH, lo: float = -1.0,
                  hi: float = 1.0) -> OpinionDistribution:
    """Sum of Gaussian bumps cut off at three widths, mirrored when the centers are"""
    edges = np.linspace(lo, hi, J_x + 1)
    x = 0.5 * (edges[:-1] + edges[1:])
    centers = np.atleast_1d(np.asarray(centers, dtype=float))
    masses = np.zeros(J_x)
    for c in centers:
        offset = x - c
        masses += np.where(np.abs(offset) <= SEED_CUTOFF * width, np.exp(-0.5 * (offset / width) ** 2), 0.0)
    if lo == -hi and np.allclose(np.sort(centers), np.sort(-centers)):
        masses = 0.5 * (masses + masses[::-1])
    return OpinionDistribution.tabulated(masses, lo, hi)


def classical_mf_steady_state(f: InteractionFunction, sigma: float, seed_dist, cfg: SteadyStateConfig) -> LambdaVector:
    """Relax the single-age opinion equation from a seed until it stops moving"""
    params = cfg.params
    dx = cfg.dx
    masses = seed_dist.cell_masses(cfg.J_x) if isinstance(seed_dist, OpinionDistribution) else np.asarray(seed_dist, float)
    values = (masses / masses.sum() / dx)[:, None]
    single_age = replace(cfg, f=f, params=ModelParams(0.0, sigma, 1.0, params.opinion_lo, params.opinion_hi))
    dt = single_age.opinion_dt()
    phi = build_phi_matrix(f, cfg.J_x, params.opinion_lo, params.opinion_hi).values
    operator = ('target', np.ones(1))

    quiet = 0
    for step in range(1, cfg.classical_max_steps + 1):
        lam = field_from_values(values, phi, operator, 1.0)
        updated = opinion_update(values, lam, sigma, dt, dx)
        rate = float(np.max(np.abs(updated - values))) / dt
        values = updated
        quiet = quiet + 1 if rate < cfg.classical_tol else 0
        if quiet >= cfg.classical_patience:
            logger.info(f"✅ Classical steady state after {step} steps (t={step * dt:.4g})")
            return LambdaVector(values[:, 0] * dx, params.opinion_lo, params.opinion_hi)
    raise NotConverged(
        f"classical relaxation still moving after {cfg.classical_max_steps} steps (rate {rate:.3e})",
        last_iterate=LambdaVector(values[:, 0] * dx, params.opinion_lo, params.opinion_hi), residual=rate,
    )


def single_cluster_state(cfg: SteadyStateConfig) -> LambdaVector:
    seed = gaussian_seed(cfg.J_x, [0.0], lo=cfg.params.opinion_lo, hi=cfg.params.opinion_hi)
    return classical_mf_steady_state(cfg.f, cfg.params.sigma, seed, cfg)


def two_cluster_state(cfg: SteadyStateConfig) -> LambdaVector:
    seed = gaussian_seed(cfg.J_x, [-0.5, 0.5], lo=cfg.params.opinion_lo, hi=cfg.params.opinion_hi)
    return classical_mf_steady_state(cfg.f, cfg.params.sigma, seed, cfg)


def l1_distance(a, b) -> float:
    a = a.masses if isinstance(a, LambdaVector) else np.asarray(a)
    b = b.masses if isinstance(b, LambdaVector) else np.asarray(b)
    return float(np.sum(np.abs(a - b)))


def count_peaks(lam: LambdaVector, cfg: SteadyStateConfig) -> int:
    edges = np.linspace(lam.lo, lam.hi, lam.J_x + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return len(cluster_detect(lam.masses, centers, threshold=cfg.peak_threshold, separation=cfg.peak_separation))


@dataclass
class TauSweepEntry:
    tau: float
    result: SteadyStateResult | None
    peak_count: int
    converged: bool
    error: str | None = None
    l1_to_reference: float | None = None


def _sweep_point(lambda0: LambdaVector, tau: float, cfg: SteadyStateConfig, reference) -> TauSweepEntry:
    point_cfg = cfg.with_tau(tau)
    error = None
    try:
        result = fixed_point_iterate(lambda0, point_cfg)
    except NotConverged as e:
        result, error = e.result, str(e)
        logger.warning(f"⚠️  tau={tau}: {e}")
    peaks = count_peaks(result.lam, point_cfg) if result is not None else 0
    gap = l1_distance(result.lam, reference) if result is not None and reference is not None else None
    return TauSweepEntry(float(tau), result, peaks, error is None, error, gap)


def tau_sweep(lambda0: LambdaVector, tau_values, cfg: SteadyStateConfig, jobs: int = 1,
              reference: LambdaVector | None = None) -> list:
    """Fixed points for each tau from the same starting density; failures are recorded, not raised"""
    for tau in tau_values:
        if not tau > 0:
            raise ModelError(f"sweep values must be > 0, got {tau}")
    logger.info(f"📊 tau sweep over {list(tau_values)} with {jobs} job(s)")
    return Parallel(n_jobs=jobs)(
        delayed(_sweep_point)(lambda0, tau, cfg, reference) for tau in tau_values
    )
