#!/usr/bin/env python3
"""
Diagnostics of density snapshots and reference constructions that reduce the
age-structured problem to single-age ones: the Ornstein-Uhlenbeck case for
constant interaction, the same-age kernel, tau = 0 and the death-rate model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import pandas as pd
from scipy.signal import find_peaks

from model_core import AgeKernel, ModelParams, build_mk_kernel, stationary_age_profile
from pde_solver import (
    DensityGrid,
    PdeRunConfig,
    PdeSolver,
    build_phi_matrix,
    field_from_values,
    kernel_operator,
    opinion_update,
)
from simulation_errors import KernelError, ModelError

logger = logging.getLogger(__name__)

CLUSTER_THRESHOLD = 1.2
CLUSTER_SEPARATION = 3
SYMMETRY_TOL = 1e-12


@dataclass
class Diagnostics:
    total_opinion_density: np.ndarray
    age_marginal: np.ndarray
    mean_by_age: np.ndarray
    overall_mean: float
    variance_by_age: np.ndarray


def compute_diagnostics(rho: DensityGrid) -> Diagnostics:
    values = rho.values
    x = rho.x_centers
    P = values.sum(axis=1) * rho.da
    pi = values.sum(axis=0) * rho.dx
    first = (x @ values) * rho.dx
    second = ((x * x) @ values) * rho.dx
    occupied = pi > 0
    safe_pi = np.where(occupied, pi, 1.0)
    mean_by_age = np.where(occupied, first / safe_pi, 0.0)
    # second moment about zero of the age-conditional opinion law
    variance_by_age = np.where(occupied, second / safe_pi, 0.0)
    overall = float(np.sum(mean_by_age * pi) * rho.da)
    return Diagnostics(P, pi, mean_by_age, overall, variance_by_age)


@dataclass
class Cluster:
    position: float
    mass: float


def cluster_detect(profile, centers=None, threshold: float = CLUSTER_THRESHOLD,
                   separation: int = CLUSTER_SEPARATION, cell_width: float | None = None,
                   lo: float = -1.0, hi: float = 1.0) -> list:
    """Local maxima above threshold x the uniform level

    The position is the mass-weighted center of the contiguous supra-threshold region around each
    peak. The mass is the whole basin between neighbouring minima, so cluster masses sum to the total.
    """
    p = np.asarray(profile, dtype=float)
    if centers is None:
        edges = np.linspace(lo, hi, p.size + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
    level = threshold * p.mean()
    if not level > 0:
        return []
    padded = np.concatenate(([-1.0], p, [-1.0]))
    peaks, _ = find_peaks(padded, height=level, distance=separation)
    peaks = peaks - 1
    if peaks.size == 0:
        return []

    splits = [0]
    for left, right in zip(peaks[:-1], peaks[1:]):
        splits.append(left + int(np.argmin(p[left:right + 1])))
    splits.append(p.size - 1)

    weight = 1.0 if cell_width is None else cell_width
    clusters = []
    for n, peak in enumerate(peaks):
        start, stop = peak, peak
        while start > splits[n] and p[start - 1] > level:
            start -= 1
        while stop < splits[n + 1] and p[stop + 1] > level:
            stop += 1
        region = slice(start, stop + 1)
        position = float(np.dot(p[region], centers[region]) / p[region].sum())
        basin = p[splits[n]:] if n == len(peaks) - 1 else p[splits[n]:splits[n + 1]]
        clusters.append(Cluster(position, float(basin.sum()) * weight))
    return clusters


def cluster_count_alternations(counts) -> int:
    """Switches between consensus (1 cluster) and split (2 or more) states"""
    states = [1 if c == 1 else 2 for c in counts if c >= 1]
    return int(sum(1 for a, b in zip(states[:-1], states[1:]) if a != b))


def compare_cluster_positions(first, second) -> float:
    a = sorted(c.position for c in first)
    b = sorted(c.position for c in second)
    if len(a) != len(b) or not a:
        return float('inf')
    return float(max(abs(x - y) for x, y in zip(a, b)))


def variance_closed_form(t: float, a: float, params: ModelParams, var_mu: float,
                         var_rho0_at: Callable[[float], float]) -> float:
    stationary = 0.5 * params.sigma ** 2
    if a <= params.tau * t:
        decay = np.exp(-2.0 * a / params.tau) if params.tau > 0 else 0.0
        return float(stationary + (var_mu - stationary) * decay)
    return float(stationary + (var_rho0_at(a - params.tau * t) - stationary) * np.exp(-2.0 * t))


def _require_symmetric(grid: DensityGrid, what: str):
    if grid.lo != -grid.hi or grid.symmetry_error() > SYMMETRY_TOL * max(1.0, np.max(np.abs(grid.values))):
        raise ModelError(f"{what} must be mirror-symmetric about x = 0")


def _interpolate_columns(values: np.ndarray, ages: np.ndarray, da: float) -> np.ndarray:
    """Columns of a cell-centered age grid read at arbitrary ages, linear in age"""
    position = np.clip(ages / da - 0.5, 0.0, values.shape[1] - 1)
    left = np.floor(position).astype(int)
    right = np.minimum(left + 1, values.shape[1] - 1)
    weight = position - left
    return (1.0 - weight) * values[:, left] + weight * values[:, right]


def _per_age_construction(cfg: PdeRunConfig, field_fn) -> DensityGrid:
    """Cells younger than tau*t carry mu evolved for a/tau; older ones carry rho0(a - tau t) evolved for t

    Every age column evolves on its own under field_fn(columns).
    """
    params = cfg.params
    rho0 = cfg.initial_grid()
    dt = cfg.resolved_dt()
    dx, da = rho0.dx, rho0.da
    ages = rho0.a_centers
    t = cfg.t_final
    sigma = params.sigma
    result = np.empty_like(rho0.values)

    young = ages <= params.tau * t
    old = ~young
    if np.any(old):
        columns = _interpolate_columns(rho0.values, ages[old] - params.tau * t, da)
        for _ in range(int(round(t / dt))):
            columns = opinion_update(columns, field_fn(columns), sigma, dt, dx)
        result[:, old] = columns

    if np.any(young):
        # entering age density is the initial age profile read periodically
        pi0 = rho0.age_marginal()
        entry = np.interp(np.mod(ages[young] - params.tau * t, params.max_age), ages, pi0, period=params.max_age)
        mu_density = cfg.mu_cells() / dx
        columns = np.outer(mu_density, entry)
        counts = np.rint(ages[young] / (params.tau * dt)).astype(int)
        young_index = np.flatnonzero(young)
        captured = np.empty_like(columns)
        done = counts == 0
        captured[:, done] = columns[:, done]
        for n in range(1, int(counts.max()) + 1):
            columns = opinion_update(columns, field_fn(columns), sigma, dt, dx)
            hit = counts == n
            captured[:, hit] = columns[:, hit]
        result[:, young_index] = captured
    return rho0.with_values(result)


def ou_reference_solution(cfg: PdeRunConfig) -> DensityGrid:
    """Per-age Ornstein-Uhlenbeck evolution valid for constant interaction and uniform kernel"""
    if cfg.f.variant != 'constant' or cfg.kernel.variant != 'uniform':
        raise ModelError("OU construction needs constant interaction and a uniform kernel")
    if not np.allclose(cfg.mu_cells(), cfg.mu_cells()[::-1], rtol=0, atol=1e-14):
        raise ModelError("OU construction needs a symmetric mu")
    _require_symmetric(cfg.initial_grid(), "initial density")
    edges = np.linspace(cfg.params.opinion_lo, cfg.params.opinion_hi, cfg.J_x + 1)
    # Lambda = mean - x with mean zero
    drift = -edges[:, None]
    return _per_age_construction(cfg, lambda columns: np.broadcast_to(drift, (edges.size, columns.shape[1])))


def delta_kernel_reference(cfg: PdeRunConfig) -> DensityGrid:
    """Per-age classical evolution: each age column interacts only with itself"""
    if cfg.kernel.variant != 'delta_same_age':
        raise KernelError("same-age construction needs the delta kernel")
    phi = build_phi_matrix(cfg.f, cfg.J_x, cfg.params.opinion_lo, cfg.params.opinion_hi).values
    return _per_age_construction(cfg, lambda columns: phi @ columns)


def _tau_zero_weights(cfg: PdeRunConfig) -> np.ndarray:
    if cfg.params.tau != 0:
        raise ModelError("tau = 0 construction needs tau = 0")
    if cfg.kernel.variant not in ('uniform', 'of_target_age'):
        raise KernelError("tau = 0 construction needs a kernel depending on the target age only")
    return cfg.kernel.target_weights(cfg.J_a, cfg.params.max_age)


def tau_zero_initial_field(cfg: PdeRunConfig) -> np.ndarray:
    """u(0, .) = sum_b M(b) rho0(b, .) da"""
    rho0 = cfg.initial_grid()
    return rho0.values @ (_tau_zero_weights(cfg) * rho0.da)


def tau_zero_age_zero_profile(cfg: PdeRunConfig) -> np.ndarray:
    """Density held at age zero: mu times the oldest cell's mass at t = 0"""
    rho0 = cfg.initial_grid()
    exiting = rho0.values[:, -1].sum() * rho0.dx
    return cfg.mu_cells() / rho0.dx * exiting


def tau_zero_reference(cfg: PdeRunConfig) -> DensityGrid:
    """Evolve u classically, then every age column under the frozen field of u"""
    rho0 = cfg.initial_grid()
    u = tau_zero_initial_field(cfg)[:, None]
    phi = build_phi_matrix(cfg.f, cfg.J_x, cfg.params.opinion_lo, cfg.params.opinion_hi).values
    dt = cfg.resolved_dt()
    sigma = cfg.params.sigma
    columns = np.array(rho0.values)
    for _ in range(int(round(cfg.t_final / dt))):
        lam = phi @ u
        columns = opinion_update(columns, np.broadcast_to(lam, (lam.shape[0], columns.shape[1])), sigma, dt, rho0.dx)
        u = opinion_update(u, lam, sigma, dt, rho0.dx)
    return rho0.with_values(columns)


@dataclass(frozen=True, eq=False)
class MkProblem:
    """Death-rate model mapped onto the ageing model by rho = q * pi"""

    death_rate: Callable[[float], float]
    base_kernel: AgeKernel
    J_a: int
    max_age: float = 1.0
    death_table: np.ndarray = field(init=False, default=None)
    pi: np.ndarray = field(init=False, default=None)
    kernel: AgeKernel = field(init=False, default=None)

    def __post_init__(self):
        pi = stationary_age_profile(self.death_rate, self.J_a, self.max_age)
        centers = (np.arange(self.J_a) + 0.5) * (self.max_age / self.J_a)
        object.__setattr__(self, 'pi', pi)
        object.__setattr__(self, 'death_table', np.array([self.death_rate(a) for a in centers], dtype=float))
        object.__setattr__(self, 'kernel', build_mk_kernel(self.base_kernel, pi, self.max_age))

    def on_grid(self, J_a: int) -> 'MkProblem':
        return self if J_a == self.J_a else MkProblem(self.death_rate, self.base_kernel, J_a, self.max_age)


@dataclass
class MkReport:
    snapshots: list
    age_marginal_error: float
    max_residual: float
    mean_residual: float
    residuals: pd.DataFrame


def _mk_residual(prev: np.ndarray, now: np.ndarray, nxt: np.ndarray, mk: MkProblem, cfg: PdeRunConfig,
                 dt: float, phi: np.ndarray) -> np.ndarray:
    """Centered-difference residual of the death-rate equation away from the reinjected first age column"""
    params = cfg.params
    dx = params.width / cfg.J_x
    da = params.max_age / cfg.J_a
    lam = field_from_values(now, phi, kernel_operator(mk.base_kernel, cfg.J_a, params.max_age), da)
    lam_centers = 0.5 * (lam[:-1] + lam[1:])
    flux = now * lam_centers

    x = slice(1, cfg.J_x - 1)
    a = slice(2, cfg.J_a - 2)
    x_next, x_prev = slice(2, cfg.J_x), slice(0, cfg.J_x - 2)
    a_next, a_prev = slice(3, cfg.J_a - 1), slice(1, cfg.J_a - 3)
    dt_term = (nxt[x, a] - prev[x, a]) / (2.0 * dt)
    age_term = params.tau * (now[x, a_next] - now[x, a_prev]) / (2.0 * da)
    advection = (flux[x_next, a] - flux[x_prev, a]) / (2.0 * dx)
    diffusion = 0.5 * params.sigma ** 2 * (now[x_next, a] - 2.0 * now[x, a] + now[x_prev, a]) / dx ** 2
    death = params.tau * mk.death_table[a][None, :] * now[x, a]
    return dt_term + age_term + advection - diffusion + death


def mk_construct_and_check(mk: MkProblem, cfg: PdeRunConfig, record_steps=None) -> MkReport:
    """Solve the ageing problem with kernel M * pi for q, form rho = q * pi, check the death-rate equation"""
    mk = mk.on_grid(cfg.J_a)
    if cfg.J_a < 6 or cfg.J_x < 4:
        raise ModelError("residual stencil needs J_a >= 6 and J_x >= 4")
    q_cfg = replace(cfg, kernel=mk.kernel)
    solver = PdeSolver(q_cfg)
    steps = q_cfg.n_steps()
    if record_steps is None:
        record_steps = sorted({max(steps // 4, 1), max(steps // 2, 1), max(steps, 1)})
    record_steps = sorted(int(n) for n in record_steps)
    wanted = set()
    for n in record_steps:
        wanted.update((n - 1, n, n + 1))

    q = np.array(q_cfg.initial_grid().values)
    kept = {0: q} if 0 in wanted else {}
    for n in range(1, max(record_steps) + 2):
        q = solver.step_values(q)
        if n in wanted:
            kept[n] = q

    phi = solver.phi.values
    pi = mk.pi[None, :]
    snapshots, rows = [], []
    marginal_error = 0.0
    for n in record_steps:
        if n < 1:
            continue
        rho = kept[n] * pi
        grid = DensityGrid(rho, cfg.params.opinion_lo, cfg.params.opinion_hi, cfg.params.max_age)
        snapshots.append((n * solver.dt, grid))
        marginal_error = max(marginal_error, float(np.max(np.abs(grid.age_marginal() - mk.pi))))
        r = np.abs(_mk_residual(kept[n - 1] * pi, rho, kept[n + 1] * pi, mk, cfg, solver.dt, phi))
        rows.append((n * solver.dt, float(r.max()), float(r.mean())))

    residuals = pd.DataFrame(rows, columns=['t', 'max_residual', 'mean_residual'])
    return MkReport(snapshots, marginal_error, float(residuals['max_residual'].max()),
                    float(residuals['mean_residual'].mean()), residuals)


def check_mean_evolution(diagnostics: pd.DataFrame, mu_mean: float, params: ModelParams,
                         kernel: AgeKernel) -> float:
    """Largest gap between d(mean)/dt and the birth/death plus boundary terms along a run"""
    if not kernel.is_symmetric():
        raise KernelError("mean evolution identity needs a symmetric kernel")
    if len(diagnostics) < 3:
        raise ModelError("mean evolution check needs at least three diagnostic rows")
    t = diagnostics['t'].to_numpy()
    mean = diagnostics['mean_opinion'].to_numpy()
    rate = (mean[2:] - mean[:-2]) / (t[2:] - t[:-2])
    mid = slice(1, -1)
    births = params.tau * (
        mu_mean * diagnostics['exit_age_density'].to_numpy()[mid] - diagnostics['exit_age_moment'].to_numpy()[mid]
    )
    boundary = 0.5 * params.sigma ** 2 * (
        diagnostics['boundary_density_lo'].to_numpy()[mid] - diagnostics['boundary_density_hi'].to_numpy()[mid]
    )
    return float(np.max(np.abs(rate - births - boundary)))


def variance_table(snapshots, cfg: PdeRunConfig) -> pd.DataFrame:
    """Numeric second moment by age against the closed form, one row per (snapshot, age cell)"""
    rho0 = cfg.initial_grid()
    initial = compute_diagnostics(rho0)
    ages = rho0.a_centers
    var_mu = cfg.mu.second_moment()

    def var_rho0_at(age):
        return float(np.interp(age, ages, initial.variance_by_age))

    rows = []
    for t, grid in snapshots:
        numeric = compute_diagnostics(grid).variance_by_age
        for k, a in enumerate(ages):
            rows.append((t, k, float(numeric[k]), variance_closed_form(t, a, cfg.params, var_mu, var_rho0_at)))
    return pd.DataFrame(rows, columns=['t', 'age_index', 'v_numeric', 'v_closed_form'])
