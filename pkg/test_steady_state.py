#!/usr/bin/env python3

import numpy as np
import pytest

from model_core import AgeKernel, InteractionFunction, ModelParams, OpinionDistribution
from pde_solver import PdeRunConfig, PdeSolver
from simulation_errors import KernelError, ModelError, NotConverged
from steady_state import (
    LambdaVector,
    SteadyStateConfig,
    age_average,
    apply_F,
    build_propagator,
    classical_mf_steady_state,
    count_peaks,
    fixed_point_iterate,
    gaussian_seed,
    l1_distance,
    propagate_age,
    residual,
    tau_sweep,
)


def ss_cfg(tau=0.5, sigma=0.1, f=None, J_x=20, mu=None, **extra):
    mu = mu or OpinionDistribution.uniform()
    return SteadyStateConfig(ModelParams(tau, sigma), f or InteractionFunction.constant(),
                             mu_cells=mu.cell_masses(J_x), J_x=J_x, **extra)


def uniform_lambda(J_x=20):
    return LambdaVector(np.full(J_x, 1.0 / J_x))


def centers(J_x):
    edges = np.linspace(-1, 1, J_x + 1)
    return 0.5 * (edges[:-1] + edges[1:])


class TestLambdaVector:
    def test_membership(self):
        assert uniform_lambda().in_K()
        with pytest.raises(ModelError):
            LambdaVector(np.full(4, 0.5)).check()

    def test_is_read_only(self):
        lam = uniform_lambda()
        with pytest.raises(ValueError):
            lam.masses[0] = 1.0


class TestConfig:
    def test_automatic_age_resolution(self):
        cfg = ss_cfg()
        # phi = 1 on (-1, 1): centered bound sigma^2 / 4 is the tightest
        assert cfg.opinion_dt() == pytest.approx(0.8 * 0.01 / 4.0)
        assert abs(cfg.resolved_J_a() - 1000) <= 1

    def test_rejects_bad_damping(self):
        with pytest.raises(ModelError):
            ss_cfg(damping=0.0)

    def test_rejects_mismatched_mu(self):
        with pytest.raises(ModelError):
            SteadyStateConfig(ModelParams(0.5, 0.1), InteractionFunction.constant(), mu_cells=np.ones(4), J_x=20)


class TestPropagator:
    def test_columns_sum_to_one(self):
        P = build_propagator(uniform_lambda(), ss_cfg(J_a=200))
        assert np.allclose(P.dense_step().sum(axis=0), 1.0, atol=1e-12, rtol=0)

    def test_commutes_with_mirror(self):
        masses = np.random.default_rng(0).uniform(0.1, 1.0, 20)
        masses = masses + masses[::-1]
        lam = LambdaVector(masses / masses.sum())
        omega = build_propagator(lam, ss_cfg(f=InteractionFunction.bounded_confidence(0.4, 0.5))).omega.toarray()
        mirror = np.eye(20)[::-1]
        assert np.allclose(omega @ mirror, mirror @ omega, atol=1e-12, rtol=0)

    def test_point_mass_field(self):
        J_x = 20
        masses = np.zeros(J_x)
        masses[J_x // 2] = 1.0
        P = build_propagator(LambdaVector(masses), ss_cfg(J_x=J_x))
        edges = np.linspace(-1, 1, J_x + 1)
        dx = 2.0 / J_x
        assert np.all(np.abs(P.lam_iface[1:-1] + edges[1:-1]) <= dx)
        assert P.lam_iface[0] == 0.0 and P.lam_iface[-1] == 0.0

    def test_needs_ageing(self):
        with pytest.raises(ModelError):
            build_propagator(uniform_lambda(), ss_cfg(tau=0.0, J_a=10))

    def test_zeroth_column_is_mu(self):
        cfg = ss_cfg(mu=OpinionDistribution.exp_skew())
        columns = propagate_age(build_propagator(uniform_lambda(), cfg), cfg.mu_cells)
        assert columns.shape == (20, cfg.resolved_J_a() + 1)
        assert np.array_equal(columns[:, 0], cfg.mu_cells)
        assert np.allclose(columns.sum(axis=0), 1.0, atol=1e-9, rtol=0)

    def test_mass_drifts_towards_centre_without_noise(self):
        J_x = 80
        mu = gaussian_seed(J_x, [0.5]).cell_masses(J_x)
        cfg = SteadyStateConfig(ModelParams(2.0, 0.0), InteractionFunction.constant(), mu_cells=mu,
                                J_x=J_x, J_a=2000)
        columns = propagate_age(build_propagator(LambdaVector(np.full(J_x, 1.0 / J_x)), cfg), mu)
        means = centers(J_x) @ columns
        assert np.all(np.diff(means) < 0)
        assert 0 < means[-1] < means[0]


class TestFixedPoint:
    def test_averaging_constant_columns(self):
        nu = OpinionDistribution.bimodal().cell_masses(20)
        columns = np.tile(nu[:, None], (1, 11))
        assert np.allclose(age_average(columns, np.ones(10), 0.1), nu, atol=1e-12, rtol=0)

    def test_image_stays_in_K(self):
        cfg = ss_cfg(sigma=0.4, f=InteractionFunction.bounded_confidence(0.4, 0.5), mu=OpinionDistribution.exp_skew())
        image = apply_F(uniform_lambda(), cfg)
        assert abs(image.masses.sum() - 1.0) <= 1e-10
        assert image.in_K()

    def test_converges_from_uniform(self):
        # sigma = 0.4 on 40 cells keeps the cell Peclet number below 2
        cfg = ss_cfg(sigma=0.4, J_x=40, mu=OpinionDistribution.exp_skew(), tol=1e-10, max_iter=500)
        result = fixed_point_iterate(uniform_lambda(40), cfg)
        assert result.converged
        assert result.residual_inf < 1e-10
        assert residual(result.lam, cfg) < 1e-10
        assert result.lam.in_K()
        assert result.outside_K == 0
        assert result.peclet <= 2.0
        assert result.history[-1] == result.residual_inf
        assert result.columns.shape == (40, cfg.resolved_J_a() + 1)

    def test_oscillating_tail_is_recorded(self):
        # sigma = 0.1 on 20 cells: the centered flux alternates in sign beyond the peak
        cfg = ss_cfg(mu=OpinionDistribution.exp_skew(), tol=1e-10, max_iter=500)
        result = fixed_point_iterate(uniform_lambda(), cfg)
        assert result.peclet > 2.0
        assert result.outside_K > 0
        assert result.lowest_entry < -1e-10

    def test_mirror_symmetric_fixed_point(self):
        cfg = ss_cfg(sigma=0.4, f=InteractionFunction.bounded_confidence(0.4, 0.5), tol=1e-12, max_iter=2000)
        result = fixed_point_iterate(uniform_lambda(), cfg)
        assert result.converged
        assert np.max(np.abs(result.lam.masses - result.lam.masses[::-1])) <= 1e-10

    def test_damped_iteration_reaches_same_point(self):
        cfg = ss_cfg(sigma=0.4, mu=OpinionDistribution.exp_skew(), tol=1e-10, max_iter=2000)
        plain = fixed_point_iterate(uniform_lambda(), cfg)
        damped = fixed_point_iterate(uniform_lambda(), cfg, damping=0.5)
        assert l1_distance(plain.lam, damped.lam) < 1e-7

    def test_budget_exhaustion_keeps_last_iterate(self):
        cfg = ss_cfg(mu=OpinionDistribution.exp_skew())
        with pytest.raises(NotConverged) as info:
            fixed_point_iterate(uniform_lambda(), cfg, tol=1e-300, max_iter=1)
        assert info.value.result is not None
        assert not info.value.result.converged
        assert isinstance(info.value.last_iterate, LambdaVector)
        assert info.value.exit_code == 5

    def test_unnormalized_target_kernel_rejected(self):
        cfg = ss_cfg(kernel=AgeKernel.of_target_age([0.5, 0.5]), J_a=50)
        with pytest.raises(KernelError):
            apply_F(uniform_lambda(), cfg)

    def test_observer_dependent_kernel_rejected(self):
        cfg = ss_cfg(kernel=AgeKernel.tabulated(np.ones((2, 2))), J_a=50)
        with pytest.raises(KernelError):
            apply_F(uniform_lambda(), cfg)


class TestClassicalStates:
    def test_seed_is_mirror_symmetric(self):
        seed = gaussian_seed(40, [-0.5, 0.5])
        masses = seed.cell_masses(40)
        assert np.allclose(masses, masses[::-1], atol=1e-14, rtol=0)
        assert masses.sum() == pytest.approx(1.0, abs=1e-12)

    def test_global_interaction_relaxes_to_single_peak(self):
        cfg = ss_cfg(sigma=0.05, J_x=40)
        lam = classical_mf_steady_state(cfg.f, 0.05, gaussian_seed(40, [0.0]), cfg)
        assert lam.masses.sum() == pytest.approx(1.0, abs=1e-10)
        assert lam.masses.min() > -1e-6
        assert count_peaks(lam, cfg) == 1
        assert abs(centers(40) @ lam.masses) < 1e-10

    def test_two_cluster_state_is_mirror_symmetric(self):
        f = InteractionFunction.bounded_confidence(0.5, 0.6)
        cfg = ss_cfg(sigma=0.1, f=f, J_x=40)
        lam = classical_mf_steady_state(f, 0.1, gaussian_seed(40, [-0.5, 0.5]), cfg)
        assert np.max(np.abs(lam.masses - lam.masses[::-1])) <= 1e-10
        assert count_peaks(lam, cfg) == 2


class TestAgreesWithDensitySolver:
    def test_stationary_density_does_not_move_under_the_solver(self):
        f = InteractionFunction.constant()
        base = ss_cfg(sigma=0.4, tol=1e-12, max_iter=2000)
        mu = classical_mf_steady_state(f, 0.4, gaussian_seed(20, [0.0]), base)
        cfg = base.with_mu(mu.masses)
        result = fixed_point_iterate(uniform_lambda(), cfg)
        pde_cfg = PdeRunConfig(cfg.params, f, AgeKernel.uniform(), OpinionDistribution.tabulated(mu.masses),
                               result.rho, J_x=20, J_a=result.rho.J_a)
        solver = PdeSolver(pde_cfg)
        moved = solver.step(result.rho)
        assert np.max(np.abs(moved.values - result.rho.values)) <= 5e-3 * solver.dt


class TestTauSweep:
    def test_rejects_non_positive_tau(self):
        with pytest.raises(ModelError):
            tau_sweep(uniform_lambda(), [0.5, 0.0], ss_cfg())

    def test_sweep_records_each_point(self):
        cfg = ss_cfg(mu=OpinionDistribution.exp_skew(), tol=1e-9, max_iter=500)
        reference = LambdaVector(cfg.mu_cells)
        entries = tau_sweep(uniform_lambda(), [0.5, 1.0], cfg, jobs=1, reference=reference)
        assert [e.tau for e in entries] == [0.5, 1.0]
        assert all(e.converged for e in entries)
        assert all(e.l1_to_reference is not None for e in entries)
        # slower ageing keeps the population closer to its age-zero opinions
        assert entries[1].l1_to_reference < entries[0].l1_to_reference
