#!/usr/bin/env python3
"""
agepin command line

    agepin run   --preset fig3b [--scale desk|paper] [--seed S] [--out DIR] [--jobs K]
    agepin sweep --preset tau_sweep
    agepin check --preset variance
"""

# Load environment variables first
import load_env

import argparse
import logging
import sys

from experiment_config import load_presets, parse_config
from experiment_runner import run_experiment
from load_env import get_setting
from model_core import ENGINE_VERSION
from simulation_errors import AgepinError, ConfigError

logger = logging.getLogger(__name__)

COMMAND_MODES = {
    'run': None,
    'sweep': ('tau_sweep',),
    'check': ('reduction_check',),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='agepin', description='Age-structured opinion dynamics engine')
    parser.add_argument('--version', action='version', version=f'agepin {ENGINE_VERSION}')
    commands = parser.add_subparsers(dest='command', required=True)
    for name, help_text in (('run', 'run any preset or config file'),
                            ('sweep', 'run a tau sweep preset'),
                            ('check', 'run a reduction check preset')):
        command = commands.add_parser(name, help=help_text)
        source = command.add_mutually_exclusive_group(required=True)
        source.add_argument('--preset', help='built-in preset name')
        source.add_argument('--config', help='TOML or JSON config file')
        command.add_argument('--scale', choices=['desk', 'paper'], default=None)
        command.add_argument('--seed', type=int, default=None)
        command.add_argument('--out', default=None, help='output directory')
        command.add_argument('--jobs', type=int, default=None, help='parallel sweep workers')
    commands.add_parser('presets', help='list built-in presets')
    return parser


def list_presets():
    for name, document in sorted(load_presets().items()):
        print(f"  {name:16s} {document.get('mode', ''):16s} {document.get('description', '')}")


def print_summary(summary: dict):
    print("=" * 50)
    print(f"📊 {summary['preset']} ({summary['mode']}, {summary['scale']})")
    clusters = summary.get('clusters')
    if clusters:
        positions = ", ".join(f"{p:+.3f}" for p in clusters['positions'])
        print(f"   clusters: {clusters['count']} [{positions}]")
    if summary.get('mass_drift') is not None:
        print(f"   mass drift: {summary['mass_drift']:.3e}")
    for name, value in summary.get('residuals', {}).items():
        if value is not None:
            print(f"   residual {name}: {value:.3e}")
    if 'l1_gap' in summary:
        print(f"   L1 gap between fixed points: {summary['l1_gap']:.4f}")
    print(f"   runtime: {summary['runtime_seconds']:.1f}s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(get_setting('AGEPIN_LOG_LEVEL', 'INFO')).upper(), logging.INFO))

    if args.command == 'presets':
        list_presets()
        return 0

    try:
        cfg = parse_config(args.preset or args.config, scale=args.scale, seed=args.seed,
                           out_dir=args.out, jobs=args.jobs)
        allowed = COMMAND_MODES[args.command]
        if allowed is not None and cfg.mode not in allowed:
            raise ConfigError(f"'{args.command}' expects a {' or '.join(allowed)} preset, {cfg.name} is {cfg.mode}")
        summary = run_experiment(cfg)
    except AgepinError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code

    print_summary(summary)
    print(f"✅ Outputs written to {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
