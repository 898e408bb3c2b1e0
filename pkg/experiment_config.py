#!/usr/bin/env python3
"""
Experiment configuration: preset table, config file parsing and validation,
and construction of the per-module run configs.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from load_env import get_setting
from model_core import AgeKernel, InteractionFunction, ModelParams, OpinionDistribution
from pde_solver import PdeRunConfig, cfl_check
from sde_simulator import SdeRunConfig
from simulation_errors import CflViolation, ModelError, ParseError, ValidationError
from steady_state import SteadyStateConfig

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / 'support' / 'presets'
MODES = ('sde', 'pde', 'steady_state', 'tau_sweep', 'reduction_check')
SCALES = ('desk', 'paper')
CHECKS = ('variance', 'delta_kernel', 'tau_zero', 'mckendrick', 'mean_evolution')
DERIVED_STATES = ('single_cluster_state', 'two_cluster_state')
DEATH_RATES = ('inverse_remaining', 'terminal_spike')


def load_presets(preset_dir=PRESET_DIR) -> dict:
    """Load all preset documents from the presets folder"""
    presets = {}
    for filename in sorted(os.listdir(preset_dir)):
        if not filename.endswith('.json'):
            continue
        filepath = os.path.join(preset_dir, filename)
        try:
            with open(filepath, 'r') as f:
                document = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"❌ Error loading preset {filename}: {e}") from e
        name = document.get('preset_name')
        if name:
            presets[name] = document
            logger.debug(f"✅ Loaded preset: {name}")
    return presets


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config file {path} does not exist")
    try:
        if path.suffix == '.toml':
            with open(path, 'rb') as f:
                return tomllib.load(f)
        if path.suffix == '.json':
            with open(path, 'r') as f:
                return json.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot decode {path}: {e}") from e
    raise ParseError(f"unsupported config format {path.suffix!r}; use .toml or .json")


class _FieldErrors:
    """Collects field errors while reading a document"""

    def __init__(self):
        self.errors = []

    def require(self, table: dict, key: str, where: str, kind=float):
        if not isinstance(table, dict) or key not in table or table[key] is None:
            self.errors.append(f"{where}.{key}: required field missing")
            return None
        value = table[key]
        try:
            return kind(value)
        except (TypeError, ValueError):
            self.errors.append(f"{where}.{key}: expected {kind.__name__}, got {value!r}")
            return None

    def optional(self, table: dict, key: str, where: str, default, kind=float):
        if not isinstance(table, dict) or table.get(key) is None:
            return default
        return self.require(table, key, where, kind)

    def guard(self, where: str, build):
        try:
            return build()
        except ModelError as e:
            self.errors.append(f"{where}: {e}")
            return None


def build_interaction(spec: dict, errors: _FieldErrors, where='model.interaction'):
    variant = errors.require(spec, 'variant', where, str)
    if variant == 'constant':
        return InteractionFunction.constant()
    if variant == 'bounded_confidence':
        r1 = errors.require(spec, 'r1', where)
        r2 = errors.require(spec, 'r2', where)
        if r1 is None or r2 is None:
            return None
        return errors.guard(where, lambda: InteractionFunction.bounded_confidence(r1, r2))
    if variant is not None:
        errors.errors.append(f"{where}.variant: unknown interaction {variant!r}")
    return None


def build_kernel(spec: dict | None, errors: _FieldErrors, where='model.kernel'):
    spec = spec or {'variant': 'uniform'}
    variant = errors.require(spec, 'variant', where, str)
    if variant == 'uniform':
        return AgeKernel.uniform()
    if variant == 'delta_same_age':
        return AgeKernel.delta_same_age()
    if variant in ('of_target_age', 'tabulated'):
        if 'values' not in spec:
            errors.errors.append(f"{where}.values: required field missing")
            return None
        builder = AgeKernel.of_target_age if variant == 'of_target_age' else AgeKernel.tabulated
        return errors.guard(where, lambda: builder(np.asarray(spec['values'], dtype=float)))
    if variant is not None:
        errors.errors.append(f"{where}.variant: unknown kernel {variant!r}")
    return None


def build_distribution(spec: dict | None, errors: _FieldErrors, where: str, lo=-1.0, hi=1.0,
                       allow_derived=False):
    spec = spec or {'variant': 'uniform'}
    variant = errors.require(spec, 'variant', where, str)
    if variant in ('uniform', 'exp_skew', 'bimodal'):
        return errors.guard(where, lambda: OpinionDistribution(variant, lo=lo, hi=hi))
    if variant == 'tabulated':
        if 'masses' not in spec:
            errors.errors.append(f"{where}.masses: required field missing")
            return None
        return errors.guard(where, lambda: OpinionDistribution.tabulated(spec['masses'], lo, hi))
    if variant in DERIVED_STATES:
        if allow_derived:
            return variant
        errors.errors.append(f"{where}.variant: {variant} is only available to stationary modes")
        return None
    if variant is not None:
        errors.errors.append(f"{where}.variant: unknown distribution {variant!r}")
    return None


def death_rate_function(spec: dict, max_age: float = 1.0):
    """Death rate a -> d(a) from its config description"""
    variant = spec.get('variant')
    if variant == 'inverse_remaining':
        return lambda a: 1.0 / (max_age - a) if a < max_age else np.inf
    if variant == 'terminal_spike':
        onset = float(spec.get('onset', 0.999 * max_age))
        rate = float(spec.get('rate', 1e5))
        return lambda a: rate if a >= onset else 0.0
    raise ValidationError(f"model.death_rate.variant: unknown death rate {variant!r}")


@dataclass
class ExperimentConfig:
    name: str
    mode: str
    scale: str
    document: dict
    params: ModelParams
    f: InteractionFunction
    kernel: AgeKernel
    mu: object
    rho0: object
    t_final: float
    numerics: dict
    seed: int = 0
    jobs: int = 1
    out_dir: Path | None = None
    outputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def check(self) -> str | None:
        return self.extra.get('check')

    def _strides(self, steps: int) -> tuple:
        snapshots = int(self.outputs.get('snapshots', 10))
        totals = int(self.outputs.get('totals', 100))
        return max(steps // max(snapshots, 1), 1), max(steps // max(totals, 1), 1)

    def pde_config(self, **overrides) -> PdeRunConfig:
        numerics = self.numerics
        fields = dict(
            params=self.params, f=self.f, kernel=self.kernel, mu=self.mu, rho0=self.rho0,
            J_x=int(numerics.get('J_x', 200)), J_a=int(numerics.get('J_a', 200)),
            dt=numerics.get('dt'), t_final=self.t_final,
        )
        fields.update(overrides)
        if 'snapshot_every' not in overrides or 'totals_every' not in overrides:
            snapshot_every, totals_every = self._strides(PdeRunConfig(**fields).n_steps())
            fields.setdefault('snapshot_every', snapshot_every)
            fields.setdefault('totals_every', totals_every)
        return PdeRunConfig(**fields)

    def sde_config(self) -> SdeRunConfig:
        numerics = self.numerics
        return SdeRunConfig(
            params=self.params, f=self.f, kernel=self.kernel, mu=self.mu, rho0=self.rho0,
            n_agents=int(numerics.get('n_agents', 500)), dt=float(numerics.get('dt', 0.01)),
            t_final=self.t_final, seed=self.seed, record_every=int(self.outputs.get('record_every', 10)),
        )

    def steady_config(self) -> SteadyStateConfig:
        numerics = self.numerics
        J_a = numerics.get('J_a')
        return SteadyStateConfig(
            params=self.params, f=self.f, kernel=self.kernel,
            J_x=int(numerics.get('J_x', 200)), J_a=int(J_a) if J_a is not None else None,
            tol=float(numerics.get('tol', 1e-8)), max_iter=int(numerics.get('max_iter', 10_000)),
            damping=float(numerics.get('damping', 1.0)),
        )

    def summary_header(self) -> dict:
        return {
            'preset': self.name,
            'mode': self.mode,
            'scale': self.scale,
            'seed': self.seed,
            'check': self.check,
        }


def resolve_document(source: str | os.PathLike, presets: dict | None = None) -> dict:
    """Preset name, or config file optionally layered on a named preset"""
    presets = presets if presets is not None else load_presets()
    text = str(source)
    if text in presets:
        return copy.deepcopy(presets[text])
    if not Path(text).exists():
        raise ParseError(f"{text!r} is neither a preset ({', '.join(sorted(presets))}) nor a config file")
    document = read_config_file(text)
    name = document.pop('preset_name', None) or Path(text).stem
    base_name = document.pop('preset', None)
    if base_name is not None:
        if base_name not in presets:
            raise ValidationError(f"preset: unknown preset {base_name!r}")
        document = deep_merge(presets[base_name], document)
    document['preset_name'] = name
    return document


def parse_config(source, scale: str | None = None, seed: int | None = None, out_dir=None,
                 jobs: int | None = None, presets: dict | None = None, validate_cfl: bool = True) -> ExperimentConfig:
    document = resolve_document(source, presets)
    errors = _FieldErrors()
    scale = scale or get_setting('AGEPIN_SCALE', 'desk')
    if scale not in SCALES:
        errors.errors.append(f"scale: expected one of {SCALES}, got {scale!r}")

    mode = errors.require(document, 'mode', 'config', str)
    if mode is not None and mode not in MODES:
        errors.errors.append(f"config.mode: expected one of {MODES}, got {mode!r}")
    stationary = mode in ('steady_state', 'tau_sweep')

    model = document.get('model')
    if not isinstance(model, dict):
        errors.errors.append("config.model: required table missing")
        model = {}
    tau = errors.require(model, 'tau', 'model')
    sigma = errors.require(model, 'sigma', 'model')
    max_age = errors.optional(model, 'max_age', 'model', 1.0)
    lo = errors.optional(model, 'opinion_lo', 'model', -1.0)
    hi = errors.optional(model, 'opinion_hi', 'model', 1.0)
    params = None
    if None not in (tau, sigma, max_age, lo, hi):
        params = errors.guard('model', lambda: ModelParams(tau, sigma, max_age, lo, hi))
    f = build_interaction(model.get('interaction'), errors)
    kernel = build_kernel(model.get('kernel'), errors)
    lo = lo if lo is not None else -1.0
    hi = hi if hi is not None else 1.0
    mu = build_distribution(model.get('mu'), errors, 'model.mu', lo, hi, allow_derived=stationary)
    rho0 = build_distribution(model.get('rho0'), errors, 'model.rho0', lo, hi)

    run = document.get('run', {})
    t_final = errors.optional(run, 't_final', 'run', 0.0)
    if not stationary and (not isinstance(run, dict) or run.get('t_final') is None):
        errors.errors.append("run.t_final: required field missing")

    profiles = document.get('numerics', {})
    numerics = profiles.get(scale) if isinstance(profiles, dict) else None
    if not isinstance(numerics, dict):
        errors.errors.append(f"numerics.{scale}: required table missing")
        numerics = {}

    extra = {key: document[key] for key in ('check', 'tau_values', 'branches', 'refinement_levels',
                                             'death_rate', 'reference') if key in document}
    if mode == 'reduction_check' and extra.get('check') not in CHECKS:
        errors.errors.append(f"config.check: expected one of {CHECKS}, got {extra.get('check')!r}")
    if mode == 'tau_sweep' and not extra.get('tau_values'):
        errors.errors.append("config.tau_values: required field missing")

    if errors.errors:
        raise ValidationError(errors.errors)

    out_dir = out_dir or Path(get_setting('AGEPIN_OUTPUT_DIR', 'runs')) / document['preset_name']
    cfg = ExperimentConfig(
        name=document['preset_name'], mode=mode, scale=scale, document=document,
        params=params, f=f, kernel=kernel, mu=mu, rho0=rho0, t_final=float(t_final),
        numerics=numerics, seed=int(seed if seed is not None else document.get('seed', 0)),
        jobs=int(jobs if jobs is not None else get_setting('AGEPIN_JOBS', 1, int)),
        out_dir=Path(out_dir), outputs=document.get('outputs', {}), extra=extra,
    )
    if validate_cfl and mode in ('pde', 'reduction_check') and cfg.check != 'mckendrick':
        try:
            report = cfl_check(cfg.pde_config())
        except ModelError as e:
            raise ValidationError(f"numerics.{scale}: {e}") from e
        if not report.ok:
            raise CflViolation(report.violations)
    logger.info(f"✅ Config {cfg.name} ({cfg.mode}, {cfg.scale}) parsed")
    return cfg
