#!/usr/bin/env python3
"""
Model ingredients shared by the agent simulator and the density solvers:
parameters, interaction functions, age kernels and opinion distributions.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import integrate

from simulation_errors import KernelError, ModelError, NonCompactSupport

logger = logging.getLogger(__name__)

DISTRIBUTION_VARIANTS = ('uniform', 'exp_skew', 'bimodal', 'tabulated')
INTERACTION_VARIANTS = ('constant', 'bounded_confidence')
KERNEL_VARIANTS = ('uniform', 'of_target_age', 'tabulated', 'delta_same_age')

ENGINE_VERSION = '1.0.0'

CDF_CELLS = 4096
CDF_OVERSAMPLE = 8
QUAD_TOL = 1e-12
# survival ratio at the maximal age below which the age profile counts as compactly supported
COMPACT_SUPPORT_TOL = 1e-6
COMPACT_SUPPORT_MARGIN = 1e-9


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters: ageing rate, noise, maximal age and opinion domain"""

    tau: float
    sigma: float
    max_age: float = 1.0
    opinion_lo: float = -1.0
    opinion_hi: float = 1.0

    def __post_init__(self):
        errors = []
        if not np.isfinite(self.tau) or self.tau < 0:
            errors.append(f"tau must be >= 0, got {self.tau}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            errors.append(f"sigma must be >= 0, got {self.sigma}")
        if not np.isfinite(self.max_age) or self.max_age <= 0:
            errors.append(f"max_age must be > 0, got {self.max_age}")
        if not self.opinion_lo < self.opinion_hi:
            errors.append(f"opinion domain ({self.opinion_lo}, {self.opinion_hi}) is empty")
        if errors:
            raise ModelError("; ".join(errors))

    @property
    def width(self) -> float:
        return self.opinion_hi - self.opinion_lo

    @property
    def symmetric_domain(self) -> bool:
        return self.opinion_lo == -self.opinion_hi

    def with_tau(self, tau: float) -> 'ModelParams':
        return ModelParams(tau, self.sigma, self.max_age, self.opinion_lo, self.opinion_hi)


def _as_output(values, like):
    return float(values) if np.ndim(like) == 0 else values


@dataclass(frozen=True)
class InteractionFunction:
    """Confidence weight phi(r) and the signed interaction phi(r)*r"""

    variant: str = 'constant'
    r1: float | None = None
    r2: float | None = None

    def __post_init__(self):
        if self.variant not in INTERACTION_VARIANTS:
            raise ModelError(f"unknown interaction variant {self.variant!r}")
        if self.variant == 'bounded_confidence':
            if self.r1 is None or self.r2 is None or not 0 < self.r1 < self.r2:
                raise ModelError(f"bounded confidence needs 0 < r1 < r2, got r1={self.r1}, r2={self.r2}")

    @classmethod
    def constant(cls) -> 'InteractionFunction':
        return cls('constant')

    @classmethod
    def bounded_confidence(cls, r1: float, r2: float) -> 'InteractionFunction':
        return cls('bounded_confidence', float(r1), float(r2))

    def phi(self, r):
        distance = np.abs(np.asarray(r, dtype=float))
        if self.variant == 'constant':
            return _as_output(np.ones_like(distance), r)
        t = np.clip((distance - self.r1) / (self.r2 - self.r1), 0.0, 1.0)
        # quintic smoothstep, C2 at both radii
        step = t * t * t * (t * (6.0 * t - 15.0) + 10.0)
        return _as_output(1.0 - step, r)

    def varphi(self, r):
        r_arr = np.asarray(r, dtype=float)
        return _as_output(self.phi(r_arr) * r_arr, r)

    def sup_varphi(self, width: float) -> float:
        """Upper bound of |phi(r) r| over opinion differences up to width"""
        if self.variant == 'constant':
            return float(width)
        return float(min(self.r2, width))

    def to_dict(self) -> dict:
        if self.variant == 'constant':
            return {'variant': 'constant'}
        return {'variant': self.variant, 'r1': self.r1, 'r2': self.r2}


def phi_eval(f: InteractionFunction, r):
    return f.phi(r)


def varphi_eval(f: InteractionFunction, r):
    return f.varphi(r)


def age_centers(J_a: int, max_age: float = 1.0) -> np.ndarray:
    return (np.arange(J_a) + 0.5) * (max_age / J_a)


def _table_index(ages, table_size, max_age):
    idx = np.floor(np.asarray(ages, dtype=float) / max_age * table_size).astype(int)
    return np.clip(idx, 0, table_size - 1)


@dataclass(frozen=True, eq=False)
class AgeKernel:
    """Age interaction kernel M(a, b) in one of four structural forms

    Tables are indexed by age cells over [0, max_age); when a table and the
    grid it is used on differ in size, it is read as piecewise constant.
    """

    variant: str = 'uniform'
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in KERNEL_VARIANTS:
            raise KernelError(f"unknown kernel variant {self.variant!r}")
        if self.variant in ('of_target_age', 'tabulated'):
            if self.values is None:
                raise KernelError(f"{self.variant} kernel needs a values table")
            table = np.array(self.values, dtype=float)
            expected_ndim = 1 if self.variant == 'of_target_age' else 2
            if table.ndim != expected_ndim or table.size == 0:
                raise KernelError(f"{self.variant} kernel needs a {expected_ndim}-d table, got shape {table.shape}")
            if expected_ndim == 2 and table.shape[0] != table.shape[1]:
                raise KernelError(f"tabulated kernel must be square, got shape {table.shape}")
            if not np.all(np.isfinite(table)) or np.any(table < 0):
                raise KernelError("kernel values must be finite and nonnegative")
            table.setflags(write=False)
            object.__setattr__(self, 'values', table)
        elif self.values is not None:
            raise KernelError(f"{self.variant} kernel takes no values table")

    @classmethod
    def uniform(cls) -> 'AgeKernel':
        return cls('uniform')

    @classmethod
    def of_target_age(cls, values) -> 'AgeKernel':
        return cls('of_target_age', np.asarray(values, dtype=float))

    @classmethod
    def tabulated(cls, values) -> 'AgeKernel':
        return cls('tabulated', np.asarray(values, dtype=float))

    @classmethod
    def delta_same_age(cls) -> 'AgeKernel':
        return cls('delta_same_age')

    def max_value(self, max_age: float = 1.0) -> float:
        if self.variant == 'uniform':
            return 1.0
        if self.variant == 'delta_same_age':
            # self-interaction within one age; an age density is 1/A when ages are uniform
            return 1.0 / max_age
        return float(np.max(self.values))

    def is_symmetric(self) -> bool:
        if self.variant in ('uniform', 'delta_same_age'):
            return True
        if self.variant == 'of_target_age':
            return bool(np.all(self.values == self.values[0]))
        return bool(np.array_equal(self.values, self.values.T))

    def target_weights(self, J_a: int, max_age: float = 1.0) -> np.ndarray:
        """M(b) at the age cell centers of a J_a grid"""
        if self.variant == 'uniform':
            return np.ones(J_a)
        if self.variant == 'of_target_age':
            if self.values.size == J_a:
                return np.array(self.values)
            return self.values[_table_index(age_centers(J_a, max_age), self.values.size, max_age)]
        raise KernelError(f"{self.variant} kernel depends on the observer's age")

    def normalization_error(self, max_age: float = 1.0) -> float:
        """|sum_b M(b) da - 1| on the kernel's own table"""
        if self.variant == 'uniform':
            return abs(max_age - 1.0)
        if self.variant != 'of_target_age':
            raise KernelError(f"{self.variant} kernel has no target-age normalization")
        da = max_age / self.values.size
        return abs(float(np.sum(self.values) * da) - 1.0)

    def grid_matrix(self, J_a: int, max_age: float = 1.0) -> np.ndarray:
        """Discrete G[k, l] = M(a_k, a_l) on a J_a grid"""
        if self.variant == 'uniform':
            return np.ones((J_a, J_a))
        if self.variant == 'of_target_age':
            return np.tile(self.target_weights(J_a, max_age), (J_a, 1))
        if self.variant == 'delta_same_age':
            return np.eye(J_a) * (J_a / max_age)
        if self.values.shape[0] == J_a:
            return np.array(self.values)
        idx = _table_index(age_centers(J_a, max_age), self.values.shape[0], max_age)
        return self.values[np.ix_(idx, idx)]

    def pairwise(self, ages, max_age: float = 1.0) -> np.ndarray:
        """M(a_i, a_j) for every ordered pair of agents"""
        ages = np.asarray(ages, dtype=float)
        n = ages.size
        if self.variant == 'uniform':
            return np.ones((n, n))
        if self.variant == 'delta_same_age':
            raise KernelError("same-age delta kernel has no particle-level meaning")
        if self.variant == 'of_target_age':
            weights = self.values[_table_index(ages, self.values.size, max_age)]
            return np.broadcast_to(weights, (n, n))
        idx = _table_index(ages, self.values.shape[0], max_age)
        return self.values[np.ix_(idx, idx)]

    def to_dict(self) -> dict:
        payload = {'variant': self.variant}
        if self.values is not None:
            payload['values'] = self.values.tolist()
        return payload


@dataclass(frozen=True, eq=False)
class OpinionDistribution:
    """Probability law on the opinion domain

    Analytic variants are normalized by adaptive quadrature; the tabulated
    variant is piecewise uniform over equal cells.
    """

    variant: str = 'uniform'
    masses: np.ndarray | None = None
    lo: float = -1.0
    hi: float = 1.0
    kappa_norm: float = field(init=False, default=1.0)

    def __post_init__(self):
        if self.variant not in DISTRIBUTION_VARIANTS:
            raise ModelError(f"unknown distribution variant {self.variant!r}")
        if not self.lo < self.hi:
            raise ModelError(f"opinion domain ({self.lo}, {self.hi}) is empty")
        if self.variant == 'tabulated':
            if self.masses is None:
                raise ModelError("tabulated distribution needs cell masses")
            table = np.array(self.masses, dtype=float).ravel()
            if table.size == 0 or not np.all(np.isfinite(table)) or np.any(table < 0) or table.sum() <= 0:
                raise ModelError("tabulated masses must be finite, nonnegative and not all zero")
            table = table / table.sum()
            table.setflags(write=False)
            object.__setattr__(self, 'masses', table)
            return
        if self.masses is not None:
            raise ModelError(f"{self.variant} distribution takes no masses")
        if self.variant == 'uniform':
            object.__setattr__(self, 'kappa_norm', 1.0 / (self.hi - self.lo))
        else:
            total, _ = integrate.quad(self._shape, self.lo, self.hi, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
            object.__setattr__(self, 'kappa_norm', 1.0 / total)

    @classmethod
    def uniform(cls, lo=-1.0, hi=1.0) -> 'OpinionDistribution':
        return cls('uniform', lo=lo, hi=hi)

    @classmethod
    def exp_skew(cls, lo=-1.0, hi=1.0) -> 'OpinionDistribution':
        return cls('exp_skew', lo=lo, hi=hi)

    @classmethod
    def bimodal(cls, lo=-1.0, hi=1.0) -> 'OpinionDistribution':
        return cls('bimodal', lo=lo, hi=hi)

    @classmethod
    def tabulated(cls, masses, lo=-1.0, hi=1.0) -> 'OpinionDistribution':
        return cls('tabulated', np.asarray(masses, dtype=float), lo=lo, hi=hi)

    def _shape(self, x):
        """Unnormalized density of the analytic variants"""
        if self.variant == 'uniform':
            return np.ones_like(np.asarray(x, dtype=float))
        if self.variant == 'exp_skew':
            return np.exp(-10.0 * (1.0 - x) ** 2)
        # peaks at x = 0 and x = -0.8
        return np.exp(-10.0 * (0.8 + x) ** 2) + np.exp(-10.0 * x ** 2)

    @property
    def edges(self) -> np.ndarray | None:
        if self.variant != 'tabulated':
            return None
        return np.linspace(self.lo, self.hi, self.masses.size + 1)

    def density(self, x):
        x_arr = np.asarray(x, dtype=float)
        inside = (x_arr >= self.lo) & (x_arr <= self.hi)
        if self.variant == 'tabulated':
            width = (self.hi - self.lo) / self.masses.size
            idx = _table_index(x_arr - self.lo, self.masses.size, self.hi - self.lo)
            values = self.masses[idx] / width
        else:
            values = self.kappa_norm * self._shape(x_arr)
        return _as_output(np.where(inside, values, 0.0), x)

    @cached_property
    def cdf_table(self) -> tuple[np.ndarray, np.ndarray]:
        """(points, cdf) with cdf rising from 0 to 1 across the domain"""
        if self.variant == 'tabulated':
            cdf = np.concatenate(([0.0], np.cumsum(self.masses)))
            return self.edges, cdf / cdf[-1]
        fine = np.linspace(self.lo, self.hi, CDF_CELLS * CDF_OVERSAMPLE + 1)
        cdf = integrate.cumulative_trapezoid(self.density(fine), fine, initial=0.0)
        return fine[::CDF_OVERSAMPLE], cdf[::CDF_OVERSAMPLE] / cdf[-1]

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-CDF sampling, linear within each tabulated interval"""
        points, cdf = self.cdf_table
        u = rng.random(size)
        u_arr = np.atleast_1d(u)
        idx = np.searchsorted(cdf, u_arr, side='right') - 1
        idx = np.clip(idx, 0, cdf.size - 2)
        span = cdf[idx + 1] - cdf[idx]
        frac = np.where(span > 0, (u_arr - cdf[idx]) / np.where(span > 0, span, 1.0), 0.5)
        samples = points[idx] + frac * (points[idx + 1] - points[idx])
        samples = np.clip(samples, self.lo, self.hi)
        return float(samples[0]) if np.ndim(u) == 0 else samples

    def cell_masses(self, J_x: int) -> np.ndarray:
        if J_x < 2 or J_x % 2:
            raise ModelError(f"opinion grid needs an even cell count >= 2, got {J_x}")
        if self.variant == 'uniform':
            return np.full(J_x, 1.0 / J_x)
        edges = np.linspace(self.lo, self.hi, J_x + 1)
        if self.variant == 'tabulated':
            src_edges, src_cdf = self.cdf_table
            masses = np.diff(np.interp(edges, src_edges, src_cdf))
        else:
            masses = np.array([
                integrate.quad(self.density, a, b, epsabs=QUAD_TOL * 1e-2, epsrel=QUAD_TOL)[0]
                for a, b in zip(edges[:-1], edges[1:])
            ])
        masses = np.maximum(masses, 0.0)
        return masses / masses.sum()

    def mean(self) -> float:
        if self.variant == 'tabulated':
            edges = self.edges
            return float(np.sum(self.masses * 0.5 * (edges[:-1] + edges[1:])))
        value, _ = integrate.quad(lambda x: x * self.density(x), self.lo, self.hi, epsabs=QUAD_TOL, limit=200)
        return float(value)

    def second_moment(self) -> float:
        if self.variant == 'tabulated':
            edges = self.edges
            centers = 0.5 * (edges[:-1] + edges[1:])
            width = edges[1] - edges[0]
            return float(np.sum(self.masses * (centers ** 2 + width ** 2 / 12.0)))
        value, _ = integrate.quad(lambda x: x * x * self.density(x), self.lo, self.hi, epsabs=QUAD_TOL, limit=200)
        return float(value)

    def variance(self) -> float:
        return self.second_moment() - self.mean() ** 2

    def to_dict(self) -> dict:
        payload = {'variant': self.variant}
        if self.masses is not None:
            payload['masses'] = self.masses.tolist()
        return payload


def sample_opinion(dist: OpinionDistribution, rng: np.random.Generator, size=None):
    return dist.sample(rng, size)


def discretize_distribution(dist: OpinionDistribution, J_x: int) -> np.ndarray:
    return dist.cell_masses(J_x)


def lambda_bound(params: ModelParams, f: InteractionFunction, kernel: AgeKernel) -> float:
    """Bound on |Lambda| for unit total mass"""
    return kernel.max_value(params.max_age) * f.sup_varphi(params.width)


def _cumulative_death(death_rate: Callable[[float], float], points: np.ndarray) -> np.ndarray:
    bounds = np.concatenate(([0.0], points))
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', integrate.IntegrationWarning)
        pieces = [integrate.quad(death_rate, a, b, limit=500)[0] for a, b in zip(bounds[:-1], bounds[1:])]
    return np.cumsum(pieces)


def stationary_age_profile(death_rate: Callable[[float], float], J_a: int, max_age: float = 1.0) -> np.ndarray:
    """Stationary age density exp(-int_0^a d) at the age cell centers, normalized on [0, A]"""
    if J_a < 1:
        raise ModelError(f"age grid needs at least one cell, got {J_a}")
    centers = age_centers(J_a, max_age)
    horizon = max_age * (1.0 - COMPACT_SUPPORT_MARGIN)
    cumulative = _cumulative_death(death_rate, np.concatenate((centers, [horizon])))
    if np.any(~np.isfinite(cumulative[:-1])) or np.any(np.diff(cumulative) < -1e-12):
        raise ModelError("death rate must be finite and nonnegative below the maximal age")
    survival = np.exp(-cumulative)
    if survival[-1] > COMPACT_SUPPORT_TOL * survival[:-1].max():
        raise NonCompactSupport(
            f"survival {survival[-1]:.3e} at the maximal age; death rate does not diverge"
        )
    profile = survival[:-1]
    return profile / (profile.sum() * (max_age / J_a))


def build_mk_kernel(base: AgeKernel, pi, max_age: float = 1.0) -> AgeKernel:
    """Kernel M(a, b) * pi(b) that maps the death-rate model onto the ageing model"""
    pi = np.asarray(pi, dtype=float)
    J_a = pi.size
    if base.variant == 'uniform':
        return AgeKernel.of_target_age(pi)
    if base.variant == 'of_target_age':
        return AgeKernel.of_target_age(base.target_weights(J_a, max_age) * pi)
    if base.variant == 'delta_same_age':
        return AgeKernel.tabulated(np.diag(pi) * (J_a / max_age))
    return AgeKernel.tabulated(base.grid_matrix(J_a, max_age) * pi[None, :])
