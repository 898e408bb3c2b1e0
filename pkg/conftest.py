import json

import pytest

from model_core import AgeKernel, InteractionFunction, ModelParams, OpinionDistribution
from pde_solver import PdeRunConfig


@pytest.fixture
def constant_f():
    return InteractionFunction.constant()


@pytest.fixture
def bc_f():
    return InteractionFunction.bounded_confidence(0.4, 0.5)


@pytest.fixture
def small_pde_cfg():
    """Factory for coarse density runs that finish in well under a second"""

    def build(f=None, tau=0.1, sigma=0.05, kernel=None, mu=None, rho0=None, J_x=16, J_a=8, t_final=0.2, **extra):
        return PdeRunConfig(
            params=ModelParams(tau, sigma),
            f=f or InteractionFunction.bounded_confidence(0.4, 0.5),
            kernel=kernel or AgeKernel.uniform(),
            mu=mu or OpinionDistribution.uniform(),
            rho0=rho0 or OpinionDistribution.uniform(),
            J_x=J_x, J_a=J_a, t_final=t_final, **extra,
        )

    return build


@pytest.fixture
def write_config(tmp_path):
    """Write a JSON config document and return its path"""

    def write(document, name='experiment.json'):
        path = tmp_path / name
        path.write_text(json.dumps(document))
        return path

    return write
