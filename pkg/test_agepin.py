#!/usr/bin/env python3

import json

import pytest

from agepin import build_parser, main

SMALL_PDE = {
    'mode': 'pde',
    'model': {'tau': 0.1, 'sigma': 0.05, 'interaction': {'variant': 'constant'}},
    'run': {'t_final': 0.1},
    'numerics': {'desk': {'J_x': 16, 'J_a': 8}},
}


def test_presets_listing(capsys):
    assert main(['presets']) == 0
    listed = capsys.readouterr().out
    assert 'fig3b' in listed and 'mckendrick' in listed


def test_run_config_file(write_config, tmp_path, capsys):
    out = tmp_path / 'out'
    assert main(['run', '--config', str(write_config(SMALL_PDE)), '--out', str(out)]) == 0
    printed = capsys.readouterr().out
    assert '✅ Outputs written to' in printed
    with open(out / 'summary.json') as f:
        assert json.load(f)['success'] is True


def test_check_rejects_density_preset(capsys):
    assert main(['check', '--preset', 'fig3b']) == 2
    assert 'ConfigError' in capsys.readouterr().err


def test_sweep_rejects_agent_preset():
    assert main(['sweep', '--preset', 'fig2a']) == 2


def test_missing_config_file(tmp_path, capsys):
    assert main(['run', '--config', str(tmp_path / 'nope.toml')]) == 2
    assert 'ParseError' in capsys.readouterr().err


def test_cfl_violation_exit_code(write_config, tmp_path):
    document = dict(SMALL_PDE, numerics={'desk': {'J_x': 16, 'J_a': 8, 'dt': 1.0}})
    assert main(['run', '--config', str(write_config(document)), '--out', str(tmp_path / 'out')]) == 3


def test_not_converged_exit_code(write_config, tmp_path):
    document = {
        'mode': 'steady_state',
        'model': {'tau': 0.5, 'sigma': 0.4, 'interaction': {'variant': 'constant'}},
        'branches': ['single_cluster_state'],
        'numerics': {'desk': {'J_x': 20, 'tol': 1e-300, 'max_iter': 1}},
    }
    out = tmp_path / 'out'
    assert main(['run', '--config', str(write_config(document)), '--out', str(out)]) == 5
    with open(out / 'summary.json') as f:
        assert json.load(f)['exit_code'] == 5


def test_source_is_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['run'])


def test_preset_and_config_are_exclusive():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['run', '--preset', 'fig3b', '--config', 'x.toml'])
