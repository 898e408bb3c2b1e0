#!/usr/bin/env python3
"""
Runs one configured experiment and writes its CSV artifacts plus summary.json.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from experiment_config import ExperimentConfig, death_rate_function
from model_core import ENGINE_VERSION
from pde_solver import DensityGrid, run_pde
from reductions import (
    MkProblem,
    check_mean_evolution,
    cluster_count_alternations,
    cluster_detect,
    delta_kernel_reference,
    mk_construct_and_check,
    ou_reference_solution,
    tau_zero_age_zero_profile,
    tau_zero_reference,
    variance_table,
)
from sde_simulator import opinion_histogram, run_sde
from simulation_errors import AgepinError, ConfigError, NotConverged
from steady_state import (
    LambdaVector,
    count_peaks,
    fixed_point_iterate,
    l1_distance,
    residual,
    single_cluster_state,
    tau_sweep,
    two_cluster_state,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STATE_BUILDERS = {
    'single_cluster_state': single_cluster_state,
    'two_cluster_state': two_cluster_state,
}


def write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False)
    logger.debug(f"   wrote {path}")


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(document: dict, path: Path):
    with open(path, 'w') as f:
        json.dump(document, f, indent=2, sort_keys=True, default=_json_default)
        f.write('\n')


def density_frame(grid: DensityGrid, t: float | None = None) -> pd.DataFrame:
    """Long form, one row per (age cell, opinion cell)"""
    opinion_index, age_index = np.meshgrid(np.arange(grid.J_x), np.arange(grid.J_a), indexing='ij')
    frame = pd.DataFrame({
        'age_index': age_index.ravel(),
        'opinion_index': opinion_index.ravel(),
        'density': grid.values.ravel(),
    })
    if t is not None:
        frame.insert(0, 't', t)
    return frame


def snapshots_frame(snapshots) -> pd.DataFrame:
    return pd.concat([density_frame(grid, t) for t, grid in snapshots], ignore_index=True)


def totals_frame(totals) -> pd.DataFrame:
    return pd.DataFrame({
        't': np.concatenate([np.full(P.size, t) for t, P in totals]),
        'opinion_index': np.concatenate([np.arange(P.size) for _, P in totals]),
        'total_density': np.concatenate([P for _, P in totals]),
    })


def clusters_frame(series) -> pd.DataFrame:
    rows = [(t, n, c.position, c.mass) for t, clusters in series for n, c in enumerate(clusters)]
    return pd.DataFrame(rows, columns=['t', 'cluster_id', 'position', 'mass'])


def lambda_frame(lam: LambdaVector) -> pd.DataFrame:
    return pd.DataFrame({'opinion_index': np.arange(lam.J_x), 'mass': lam.masses})


def convergence_frame(history) -> pd.DataFrame:
    return pd.DataFrame({'iteration': np.arange(1, len(history) + 1), 'residual_inf': history})


def cluster_summary(clusters) -> dict:
    return {
        'count': len(clusters),
        'positions': [c.position for c in clusters],
        'masses': [c.mass for c in clusters],
    }


def _sup_gap(result, reference: DensityGrid) -> float:
    return float(np.max(np.abs(result.final.values - reference.values)))


def _ratio(values):
    """Coarse over first refined value, None without a usable refinement"""
    if len(values) < 2 or not values[1] > 0:
        return None
    return values[0] / values[1]


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.summary = {}

        self.mode_runners = {
            'sde': self.run_sde_mode,
            'pde': self.run_pde_mode,
            'steady_state': self.run_steady_state_mode,
            'tau_sweep': self.run_tau_sweep_mode,
            'reduction_check': self.run_reduction_check,
        }
        self.check_runners = {
            'variance': self.check_variance,
            'delta_kernel': self.check_delta_kernel,
            'tau_zero': self.check_tau_zero,
            'mckendrick': self.check_mckendrick,
            'mean_evolution': self.check_mean_evolution,
        }
        self._states = {}

    def run(self) -> dict:
        """Run the configured mode; summary.json is written on failure as well"""
        cfg = self.cfg
        if cfg.mode not in self.mode_runners:
            raise ConfigError(f"unknown mode {cfg.mode!r}; available: {list(self.mode_runners)}")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.summary = {
            'schema_version': SCHEMA_VERSION,
            'code_version': ENGINE_VERSION,
            **cfg.summary_header(),
            'success': False,
            'error': None,
            'mass_drift': None,
            'residuals': {},
        }
        started = time.time()
        logger.info(f"🚀 Running {cfg.name} ({cfg.mode}) into {self.out_dir}")
        try:
            self.mode_runners[cfg.mode]()
            self.summary['success'] = True
            logger.info(f"✅ {cfg.name} finished")
        except AgepinError as e:
            self.summary['error'] = str(e)
            self.summary['exit_code'] = e.exit_code
            logger.error(f"❌ {cfg.name} failed: {e}")
            raise
        finally:
            self.summary['runtime_seconds'] = time.time() - started
            write_json(self.summary, self.out_dir / 'summary.json')
        return self.summary

    def _path(self, name: str) -> Path:
        return self.out_dir / name

    # --- agent simulation -------------------------------------------------

    def run_sde_mode(self):
        cfg = self.cfg
        params = cfg.params
        result = run_sde(cfg.sde_config())
        write_csv(result.trajectory, self._path('trajectory.csv'))
        write_json({**result.metadata, 'config': cfg.document}, self._path('metadata.json'))

        cells = int(cfg.outputs.get('histogram_cells', 40))
        histogram = opinion_histogram(result.final, cells, params.opinion_lo, params.opinion_hi)
        edges = np.linspace(params.opinion_lo, params.opinion_hi, cells + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        write_csv(pd.DataFrame({'opinion': centers, 'fraction': histogram}), self._path('histogram.csv'))
        clusters = cluster_detect(histogram, centers)
        write_csv(clusters_frame([(result.final.time, clusters)]), self._path('clusters.csv'))

        self.summary.update({
            'clusters': cluster_summary(clusters),
            'mass_drift': 0.0,
            'n_agents': result.metadata['n_agents'],
            'steps': result.metadata['steps'],
            'generator': result.metadata['generator'],
        })

    # --- density solver ---------------------------------------------------

    def _write_pde_result(self, result):
        write_csv(snapshots_frame(result.snapshots), self._path('snapshots.csv'))
        write_csv(result.diagnostics, self._path('diagnostics.csv'))
        write_csv(totals_frame(result.totals), self._path('totals.csv'))

    def run_pde_mode(self):
        cfg = self.cfg
        pde_cfg = cfg.pde_config()
        result = run_pde(pde_cfg)
        self._write_pde_result(result)

        grid = result.final
        series = [
            (t, cluster_detect(P, grid.x_centers, cell_width=grid.dx)) for t, P in result.totals
        ]
        write_csv(clusters_frame(series), self._path('clusters.csv'))
        final_clusters = series[-1][1]
        after = float(cfg.outputs.get('alternation_after', 0.0))
        counts = [len(clusters) for t, clusters in series if t > after]

        self.summary.update({
            'clusters': cluster_summary(final_clusters),
            'cluster_alternations': cluster_count_alternations(counts),
            'mass_drift': result.mass_drift(),
            'min_density': float(result.diagnostics['min_density'].min()),
            'symmetry_error': grid.symmetry_error() if cfg.params.symmetric_domain else None,
            'dt': result.dt,
            'steps': result.steps,
            'cfl': result.cfl.to_dict(),
        })

    # --- stationary states ------------------------------------------------

    def _state(self, name: str, ss_cfg) -> LambdaVector:
        if name not in STATE_BUILDERS:
            raise ConfigError(f"unknown starting state {name!r}; available: {list(STATE_BUILDERS)}")
        if name not in self._states:
            self._states[name] = STATE_BUILDERS[name](ss_cfg)
        return self._states[name]

    def _stationary_config(self):
        cfg = self.cfg
        ss_cfg = cfg.steady_config()
        if isinstance(cfg.mu, str):
            mu_cells = self._state(cfg.mu, ss_cfg).masses
        else:
            mu_cells = cfg.mu.cell_masses(ss_cfg.J_x)
        return ss_cfg.with_mu(mu_cells)

    def _write_branch(self, name: str, result, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        write_csv(lambda_frame(result.lam), directory / f'lambda_{name}.csv')
        write_csv(density_frame(result.rho), directory / f'density_{name}.csv')
        write_csv(convergence_frame(result.history), directory / f'convergence_{name}.csv')

    def run_steady_state_mode(self):
        cfg = self.cfg
        ss_cfg = self._stationary_config()
        branches = cfg.extra.get('branches', ['two_cluster_state'])
        mu = LambdaVector(ss_cfg.mu_cells, cfg.params.opinion_lo, cfg.params.opinion_hi)
        mu_residual = residual(mu, ss_cfg)
        self.summary['residuals']['mu_fixed_point'] = mu_residual
        logger.info(f"📊 residual of mu under the stationary map: {mu_residual:.3e}")

        fixed_points, failures = {}, []
        for name in branches:
            try:
                result = fixed_point_iterate(self._state(name, ss_cfg), ss_cfg)
            except NotConverged as e:
                result = e.result
                failures.append(f"{name}: {e}")
            self._write_branch(name, result, self.out_dir)
            fixed_points[name] = result
            self.summary.setdefault('branches', {})[name] = {
                'converged': result.converged,
                'iterations': result.iterations,
                'residual_inf': result.residual_inf,
                'peak_count': count_peaks(result.lam, ss_cfg),
                'l1_to_mu': l1_distance(result.lam, mu),
                'outside_K': result.outside_K,
                'cell_peclet': result.peclet,
            }
            self.summary['residuals'][name] = result.residual_inf

        if len(fixed_points) >= 2:
            first, second = list(fixed_points.values())[:2]
            self.summary['l1_gap'] = l1_distance(first.lam, second.lam)
        self.summary['mass_drift'] = max(abs(r.lam.masses.sum() - 1.0) for r in fixed_points.values())
        self.summary['J_a'] = ss_cfg.resolved_J_a()
        if failures:
            raise NotConverged("; ".join(failures))

    def run_tau_sweep_mode(self):
        cfg = self.cfg
        ss_cfg = self._stationary_config()
        start = cfg.extra.get('branches', ['single_cluster_state'])[0]
        reference_name = cfg.extra.get('reference', 'two_cluster_state')
        lambda0 = self._state(start, ss_cfg)
        reference = self._state(reference_name, ss_cfg)

        entries = tau_sweep(lambda0, cfg.extra['tau_values'], ss_cfg, jobs=cfg.jobs, reference=reference)
        rows = []
        for entry in entries:
            if entry.result is not None:
                self._write_branch(start, entry.result, self.out_dir / f'tau_{entry.tau:g}')
            rows.append({
                'tau': entry.tau,
                'converged': entry.converged,
                'iterations': entry.result.iterations if entry.result is not None else None,
                'residual_inf': entry.result.residual_inf if entry.result is not None else None,
                'peak_count': entry.peak_count,
                'l1_to_reference': entry.l1_to_reference,
                'outside_K': entry.result.outside_K if entry.result is not None else None,
                'error': entry.error,
            })
        write_csv(pd.DataFrame(rows), self._path('sweep.csv'))
        self.summary.update({
            'start': start,
            'reference': reference_name,
            'sweep': rows,
            'mass_drift': max(
                (abs(e.result.lam.masses.sum() - 1.0) for e in entries if e.result is not None), default=0.0
            ),
        })
        self.summary['residuals'] = {f'tau_{row["tau"]:g}': row['residual_inf'] for row in rows}

    # --- reduction checks ---------------------------------------------------

    def run_reduction_check(self):
        check = self.cfg.check
        if check not in self.check_runners:
            raise ConfigError(f"unknown check {check!r}; available: {list(self.check_runners)}")
        self.check_runners[check]()

    def _refined(self, level: int, base_cfg, **extra):
        factor = 2 ** level
        return self.cfg.pde_config(J_x=base_cfg.J_x * factor, J_a=base_cfg.J_a * factor,
                                   dt=base_cfg.resolved_dt() / factor, **extra)

    def _levels(self) -> int:
        return max(int(self.cfg.extra.get('refinement_levels', 1)), 1)

    def check_variance(self):
        base = self.cfg.pde_config()
        result = run_pde(base)
        self._write_pde_result(result)
        table = variance_table(result.snapshots, base)
        write_csv(table, self._path('variance.csv'))
        errors = [float(np.max(np.abs(table['v_numeric'] - table['v_closed_form'])))]
        ou_gaps = [_sup_gap(result, ou_reference_solution(base))]

        for level in range(1, self._levels()):
            refined = self._refined(level, base)
            fine = run_pde(refined)
            fine_table = variance_table(fine.snapshots, refined)
            errors.append(float(np.max(np.abs(fine_table['v_numeric'] - fine_table['v_closed_form']))))
            ou_gaps.append(_sup_gap(fine, ou_reference_solution(refined)))
        write_csv(pd.DataFrame({'refinement_level': np.arange(len(errors)), 'max_abs_error': errors,
                                'ou_sup_difference': ou_gaps}), self._path('variance_refinement.csv'))
        ou_gap = ou_gaps[0]

        self.summary.update({
            'mass_drift': result.mass_drift(),
            'max_abs_error': errors[0],
            'error_ratio': _ratio(errors),
            'ou_sup_difference': ou_gap,
            'ou_sup_difference_levels': ou_gaps,
            'ou_ratio': _ratio(ou_gaps),
        })
        self.summary['residuals'] = {'variance': errors[0], 'ou': ou_gap}

    def _compare(self, name: str, result, reference: DensityGrid):
        gap = _sup_gap(result, reference)
        write_csv(pd.DataFrame({
            'age_index': density_frame(reference)['age_index'],
            'opinion_index': density_frame(reference)['opinion_index'],
            'solver': result.final.values.ravel(),
            'reference': reference.values.ravel(),
        }), self._path(f'{name}_comparison.csv'))
        self.summary.update({'mass_drift': result.mass_drift(), 'sup_difference': gap})
        self.summary['residuals'] = {name: gap}
        logger.info(f"📊 {name}: sup difference {gap:.3e}")

    def check_delta_kernel(self):
        pde_cfg = self.cfg.pde_config()
        result = run_pde(pde_cfg)
        self._write_pde_result(result)
        self._compare('delta_kernel', result, delta_kernel_reference(pde_cfg))
        gaps = [self.summary['sup_difference']]
        for level in range(1, self._levels()):
            refined = self._refined(level, pde_cfg)
            gaps.append(_sup_gap(run_pde(refined), delta_kernel_reference(refined)))
        self.summary.update({'sup_difference_levels': gaps, 'difference_ratio': _ratio(gaps)})
        logger.info(f"📊 delta_kernel: sup difference by refinement level {[f'{g:.3e}' for g in gaps]}")

    def check_tau_zero(self):
        pde_cfg = self.cfg.pde_config()
        result = run_pde(pde_cfg)
        self._write_pde_result(result)
        profile = tau_zero_age_zero_profile(pde_cfg)
        write_csv(pd.DataFrame({'opinion_index': np.arange(profile.size), 'density': profile}),
                  self._path('age_zero_profile.csv'))
        self._compare('tau_zero', result, tau_zero_reference(pde_cfg))

    def check_mckendrick(self):
        cfg = self.cfg
        params = cfg.params
        death_rate = death_rate_function(cfg.extra.get('death_rate', {'variant': 'inverse_remaining'}),
                                         params.max_age)
        base = cfg.pde_config()
        mk = MkProblem(death_rate, cfg.kernel, base.J_a, params.max_age)
        base = replace(base, dt=replace(base, kernel=mk.kernel).resolved_dt())

        rows, marginal_errors, drift = [], [], 0.0
        for level in range(self._levels()):
            level_cfg = base if level == 0 else self._refined(level, base)
            report = mk_construct_and_check(mk, level_cfg)
            rows.append((level, report.max_residual, report.mean_residual))
            marginal_errors.append(report.age_marginal_error)
            drift = max([drift] + [abs(grid.mass() - 1.0) for _, grid in report.snapshots])
            if level == 0:
                write_csv(snapshots_frame(report.snapshots), self._path('snapshots.csv'))
                exact = _closed_form_age_profile(cfg.extra.get('death_rate', {}), report.snapshots[0][1])
                if exact is not None:
                    self.summary['closed_form_marginal_error'] = max(
                        float(np.max(np.abs(grid.age_marginal() - exact))) for _, grid in report.snapshots
                    )
        residuals = pd.DataFrame(rows, columns=['refinement_level', 'max_residual', 'mean_residual'])
        write_csv(residuals, self._path('mk_residuals.csv'))

        max_res = residuals['max_residual'].to_numpy()
        self.summary.update({
            'mass_drift': drift,
            'age_marginal_error': max(marginal_errors),
            'residual_ratio': float(max_res[0] / max_res[1]) if max_res.size > 1 and max_res[1] > 0 else None,
        })
        self.summary['residuals'] = {f'level_{level}': r for level, r, _ in rows}

    def check_mean_evolution(self):
        cfg = self.cfg
        base = cfg.pde_config(diagnostics_every=1)
        mu_mean = cfg.mu.mean()
        rows, drift = [], 0.0
        for level in range(self._levels()):
            level_cfg = base if level == 0 else self._refined(level, base, diagnostics_every=1)
            result = run_pde(level_cfg)
            if level == 0:
                self._write_pde_result(result)
            drift = max(drift, result.mass_drift())
            rows.append((level, check_mean_evolution(result.diagnostics, mu_mean, cfg.params, cfg.kernel)))
        table = pd.DataFrame(rows, columns=['refinement_level', 'max_deviation'])
        write_csv(table, self._path('mean_evolution.csv'))

        deviations = table['max_deviation'].to_numpy()
        self.summary.update({
            'mass_drift': drift,
            'max_deviation': float(deviations[0]),
            'deviation_ratio': float(deviations[0] / deviations[1]) if deviations.size > 1 and deviations[1] > 0 else None,
        })
        self.summary['residuals'] = {f'level_{level}': d for level, d in rows}


def _closed_form_age_profile(spec: dict, grid: DensityGrid):
    """Stationary age density for d(a) = 1 / (A - a): 2 (A - a) / A^2"""
    if spec.get('variant', 'inverse_remaining') != 'inverse_remaining':
        return None
    A = grid.max_age
    return 2.0 * (A - grid.a_centers) / A ** 2


def run_experiment(cfg: ExperimentConfig) -> dict:
    return ExperimentRunner(cfg).run()
