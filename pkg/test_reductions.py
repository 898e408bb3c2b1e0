#!/usr/bin/env python3

import numpy as np
import pandas as pd
import pytest

from model_core import AgeKernel, InteractionFunction, ModelParams, OpinionDistribution, age_centers
from pde_solver import DensityGrid, build_phi_matrix, run_pde
from reductions import (
    MkProblem,
    _mk_residual,
    check_mean_evolution,
    cluster_count_alternations,
    cluster_detect,
    compare_cluster_positions,
    compute_diagnostics,
    delta_kernel_reference,
    mk_construct_and_check,
    ou_reference_solution,
    tau_zero_age_zero_profile,
    tau_zero_initial_field,
    tau_zero_reference,
    variance_closed_form,
    variance_table,
)
from simulation_errors import KernelError, ModelError
from steady_state import gaussian_seed


def inverse_remaining(a):
    return 1.0 / (1.0 - a) if a < 1.0 else np.inf


class TestClusterDetect:
    def test_uniform_profile_has_no_clusters(self):
        assert cluster_detect(np.full(50, 0.02)) == []

    def test_empty_profile(self):
        assert cluster_detect(np.zeros(10)) == []

    def test_point_mass(self):
        profile = np.zeros(20)
        profile[15] = 1.0
        clusters = cluster_detect(profile)
        assert len(clusters) == 1
        assert clusters[0].position == pytest.approx(0.55)
        assert clusters[0].mass == pytest.approx(1.0)

    def test_peak_in_boundary_cell(self):
        profile = np.full(20, 0.01)
        profile[-1] = 0.5
        clusters = cluster_detect(profile)
        assert len(clusters) == 1
        assert clusters[0].position == pytest.approx(0.95)

    def test_mirrored_bumps(self):
        profile = gaussian_seed(100, [-0.5, 0.5]).cell_masses(100)
        clusters = cluster_detect(profile)
        assert len(clusters) == 2
        left, right = sorted(c.position for c in clusters)
        assert abs(left + right) < 0.05
        assert right == pytest.approx(0.5, abs=0.02)

    def test_cluster_masses_cover_the_profile(self):
        profile = gaussian_seed(100, [-0.5, 0.2, 0.7]).cell_masses(100) + 0.002
        clusters = cluster_detect(profile)
        assert len(clusters) >= 2
        assert sum(c.mass for c in clusters) == pytest.approx(profile.sum(), abs=1e-12)

    def test_cell_width_turns_density_into_mass(self):
        density = np.zeros(20)
        density[5] = 10.0
        clusters = cluster_detect(density, cell_width=0.1)
        assert clusters[0].mass == pytest.approx(1.0)

    def test_compare_positions(self):
        first = cluster_detect(gaussian_seed(100, [-0.5, 0.5]).cell_masses(100))
        assert compare_cluster_positions(first, first) == 0.0
        assert compare_cluster_positions(first, first[:1]) == float('inf')


class TestAlternations:
    def test_counts_switches(self):
        assert cluster_count_alternations([1, 2, 2, 1, 2, 1]) == 4

    def test_many_clusters_count_as_split(self):
        assert cluster_count_alternations([2, 3, 4, 2]) == 0
        assert cluster_count_alternations([1, 3]) == 1

    def test_empty_snapshots_skipped(self):
        assert cluster_count_alternations([1, 0, 1]) == 0


class TestDiagnostics:
    def test_product_density(self):
        params = ModelParams(0.1, 0.05)
        grid = DensityGrid.from_product(OpinionDistribution.uniform(), 20, 10, params)
        d = compute_diagnostics(grid)
        assert np.allclose(d.total_opinion_density, 0.5)
        assert np.allclose(d.age_marginal, 1.0)
        assert np.allclose(d.mean_by_age, 0.0, atol=1e-15)
        assert d.overall_mean == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(d.variance_by_age, np.mean(grid.x_centers ** 2))

    def test_empty_age_columns(self):
        values = np.zeros((4, 3))
        values[:, 1] = 1.0
        d = compute_diagnostics(DensityGrid(values))
        assert d.mean_by_age[0] == 0.0 and d.variance_by_age[2] == 0.0


class TestVarianceClosedForm:
    params = ModelParams(0.1, 0.1)
    var_mu = 1.0 / 3.0

    def rho0(self, a):
        return self.var_mu

    def test_newborns_keep_mu(self):
        assert variance_closed_form(3.0, 0.0, self.params, self.var_mu, self.rho0) == pytest.approx(self.var_mu)

    def test_long_time_limit(self):
        assert variance_closed_form(100.0, 0.5, self.params, self.var_mu, self.rho0) == pytest.approx(0.005, abs=1e-4)

    def test_continuous_across_characteristic(self):
        t = 2.0
        edge = self.params.tau * t
        below = variance_closed_form(t, edge, self.params, self.var_mu, self.rho0)
        above = variance_closed_form(t, edge + 1e-12, self.params, self.var_mu, self.rho0)
        assert below == pytest.approx(above, abs=1e-9)

    def test_initial_time_reads_rho0(self):
        value = variance_closed_form(0.0, 0.4, self.params, self.var_mu, lambda a: 0.2)
        assert value == pytest.approx(0.2)


class TestOuReference:
    def test_initial_time_is_rho0(self, small_pde_cfg, constant_f):
        cfg = small_pde_cfg(f=constant_f, t_final=0.0)
        reference = ou_reference_solution(cfg)
        assert np.allclose(reference.values, cfg.initial_grid().values, atol=1e-14, rtol=0)

    def test_forgets_rho0_after_one_lifetime(self, small_pde_cfg, constant_f):
        seed = gaussian_seed(16, [-0.5, 0.5])
        first = ou_reference_solution(small_pde_cfg(f=constant_f, tau=0.5, t_final=2.0))
        second = ou_reference_solution(small_pde_cfg(f=constant_f, tau=0.5, t_final=2.0, rho0=seed))
        assert np.allclose(first.values, second.values, atol=1e-14, rtol=0)

    def test_needs_constant_interaction(self, small_pde_cfg, bc_f):
        with pytest.raises(ModelError):
            ou_reference_solution(small_pde_cfg(f=bc_f))

    def test_needs_symmetric_initial_density(self, small_pde_cfg, constant_f):
        with pytest.raises(ModelError):
            ou_reference_solution(small_pde_cfg(f=constant_f, rho0=OpinionDistribution.exp_skew()))


class TestDeltaKernel:
    def test_matches_solver_without_ageing(self, small_pde_cfg, bc_f):
        cfg = small_pde_cfg(f=bc_f, tau=0.0, kernel=AgeKernel.delta_same_age(),
                            rho0=OpinionDistribution.exp_skew())
        solved = run_pde(cfg).final
        reference = delta_kernel_reference(cfg)
        assert np.max(np.abs(solved.values - reference.values)) <= 1e-12

    def test_needs_delta_kernel(self, small_pde_cfg):
        with pytest.raises(KernelError):
            delta_kernel_reference(small_pde_cfg())


class TestTauZero:
    def test_matches_solver(self, small_pde_cfg, bc_f):
        cfg = small_pde_cfg(f=bc_f, tau=0.0, rho0=OpinionDistribution.exp_skew(), mu=OpinionDistribution.bimodal())
        solved = run_pde(cfg).final
        reference = tau_zero_reference(cfg)
        assert np.max(np.abs(solved.values - reference.values)) <= 1e-8

    def test_initial_field_is_opinion_total(self, small_pde_cfg):
        cfg = small_pde_cfg(tau=0.0, rho0=OpinionDistribution.exp_skew())
        assert np.allclose(tau_zero_initial_field(cfg), cfg.initial_grid().opinion_totals(), atol=1e-14, rtol=0)

    def test_age_zero_profile(self, small_pde_cfg):
        cfg = small_pde_cfg(tau=0.0, mu=OpinionDistribution.bimodal())
        profile = tau_zero_age_zero_profile(cfg)
        assert np.allclose(profile, cfg.mu_cells() / cfg.dx)

    def test_needs_zero_tau(self, small_pde_cfg):
        with pytest.raises(ModelError):
            tau_zero_reference(small_pde_cfg(tau=0.1))

    def test_needs_target_age_kernel(self, small_pde_cfg):
        with pytest.raises(KernelError):
            tau_zero_initial_field(small_pde_cfg(tau=0.0, kernel=AgeKernel.delta_same_age()))


class TestDeathRateModel:
    def test_age_profile_is_linear(self):
        mk = MkProblem(inverse_remaining, AgeKernel.uniform(), 16)
        expected = 2.0 * (1.0 - age_centers(16))
        assert np.max(np.abs(mk.pi - expected)) <= 5e-3
        assert mk.kernel.variant == 'of_target_age'

    def test_terminal_spike_is_nearly_uniform(self):
        mk = MkProblem(lambda a: 1e4 if a >= 0.99 else 0.0, AgeKernel.uniform(), 10)
        assert np.allclose(mk.kernel.values, 1.0, atol=1e-6)

    def test_construction_keeps_age_marginal(self, small_pde_cfg, constant_f):
        cfg = small_pde_cfg(f=constant_f, J_a=16)
        report = mk_construct_and_check(MkProblem(inverse_remaining, AgeKernel.uniform(), 16), cfg)
        assert report.age_marginal_error <= 1e-12
        assert len(report.snapshots) == len(report.residuals)
        assert list(report.residuals.columns) == ['t', 'max_residual', 'mean_residual']
        assert np.isfinite(report.max_residual)

    def test_rejects_tiny_grids(self, small_pde_cfg):
        with pytest.raises(ModelError):
            mk_construct_and_check(MkProblem(inverse_remaining, AgeKernel.uniform(), 4), small_pde_cfg(J_a=4))

    def test_residual_ignores_reinjected_age_columns(self, small_pde_cfg, constant_f):
        cfg = small_pde_cfg(f=constant_f, J_a=8)
        mk = MkProblem(inverse_remaining, AgeKernel.uniform(), 8)
        phi = build_phi_matrix(constant_f, cfg.J_x).values
        rng = np.random.default_rng(5)
        prev, now, nxt = (rng.uniform(0.5, 1.5, (cfg.J_x, cfg.J_a)) for _ in range(3))
        base = _mk_residual(prev, now, nxt, mk, cfg, 0.01, phi)
        assert base.shape == (cfg.J_x - 2, cfg.J_a - 4)
        prev[:, :2] += 10.0
        nxt[:, :2] -= 0.4
        assert np.array_equal(_mk_residual(prev, now, nxt, mk, cfg, 0.01, phi), base)


class TestMeanEvolution:
    def test_symmetric_run_keeps_zero_mean(self, small_pde_cfg):
        cfg = small_pde_cfg()
        result = run_pde(cfg)
        gap = check_mean_evolution(result.diagnostics, cfg.mu.mean(), cfg.params, cfg.kernel)
        assert gap <= 1e-6

    def test_needs_symmetric_kernel(self, small_pde_cfg):
        result = run_pde(small_pde_cfg())
        with pytest.raises(KernelError):
            check_mean_evolution(result.diagnostics, 0.0, ModelParams(0.1, 0.05),
                                 AgeKernel.tabulated([[1.0, 2.0], [0.0, 1.0]]))

    def test_needs_three_rows(self):
        rows = pd.DataFrame({'t': [0.0, 0.1]})
        with pytest.raises(ModelError):
            check_mean_evolution(rows, 0.0, ModelParams(0.1, 0.05), AgeKernel.uniform())


class TestVarianceTable:
    def test_one_row_per_snapshot_and_age(self, small_pde_cfg, constant_f):
        cfg = small_pde_cfg(f=constant_f, snapshot_every=100)
        result = run_pde(cfg)
        table = variance_table(result.snapshots, cfg)
        assert list(table.columns) == ['t', 'age_index', 'v_numeric', 'v_closed_form']
        assert len(table) == len(result.snapshots) * cfg.J_a
        initial = table[table['t'] == 0.0]
        # closed form at t = 0 interpolates the initial moments
        assert np.allclose(initial['v_numeric'], initial['v_closed_form'], atol=1e-12)
