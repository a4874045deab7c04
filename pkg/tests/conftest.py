import time

import numpy as np
import pytest
from hypothesis import settings

from bellman_resnet.bellman_engine import estimate_regularity_constants
from bellman_resnet.grid_space import GridDomain
from bellman_resnet.mdp_model import make_spec
from bellman_resnet.operator_net import (FunctionFamily, TrainConfig, default_output_bound,
                                         train_block)
from bellman_resnet.resnet_stack import lipschitz_cap, plan_stack

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")

# lines collected by the acceptance suite, echoed at the end of the run
CRITERIA_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def walk_spec():
    return make_spec("appendix_e")


@pytest.fixture(scope="session")
def walk_grid(walk_spec):
    return GridDomain.for_spec(walk_spec, 11)


@pytest.fixture(scope="session")
def ou_spec():
    return make_spec("ou_1d")


@pytest.fixture(scope="session")
def ou_grid(ou_spec):
    return GridDomain.for_spec(ou_spec, 21, action_nodes=3)


def walk_family(spec, grid, seed=0):
    """The training family used for the move-left/move-right walk at epsilon 0.1."""
    plan = plan_stack(spec, 0.1)
    consts = estimate_regularity_constants(spec, grid, seed=seed)
    ceiling = grid.size * default_output_bound(plan.M_hat, plan.beta) / grid.h_min
    return FunctionFamily(grid, plan.M_hat, lipschitz_cap(consts.K_A, consts.K_B, ceiling, plan.L),
                          spec=spec, seed=seed)


@pytest.fixture(scope="session")
def trained_walk_block(walk_spec, walk_grid):
    """Block trained once per session with the default configuration."""
    family = walk_family(walk_spec, walk_grid)
    t0 = time.perf_counter()
    block = train_block(walk_spec, family, walk_grid,
                        TrainConfig(target_eps=plan_stack(walk_spec, 0.1).epsilon_1))
    return {"block": block, "family": family, "seconds": time.perf_counter() - t0}


def bump_function(grid, seed, amplitude=1.0, cap=np.inf):
    from bellman_resnet.grid_space import decode, random_bump_values

    v = random_bump_values(grid, np.random.default_rng(seed), 1, amplitude=amplitude,
                           lipschitz_cap=cap)[0]
    return decode(v, grid)
