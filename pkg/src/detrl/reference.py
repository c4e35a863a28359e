"""Committed reference artifacts: the suite ranker and the two evaluation suites.

The ranker is an ordinary desk-scale agent trained with its own seeds.  The
start-state suite is generated from it with a fixed seed.  Everything here
can be rebuilt bit for bit with :func:`regenerate`.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from detrl.dqn import AgentRunConfig, run_training
from detrl.env import EnvConfig
from detrl.evalproto import EvalSuite, SuiteParams, make_start_state_suite, make_sticky_suite
from detrl.nn import QNetwork, load_network, network_from_bytes, save_network
from detrl.rng import SeedSpec

RANKER_SEEDS = SeedSpec(init_seed=1001, exploration_seed=1002, noop_seed=1003,
                        minibatch_seed=1004)
START_SUITE_SEED = 2019
STICKY_SUITE_SEED = 2020

RANKER_FILE = "ranker.qnet"
START_SUITE_FILE = "catch_suite.json"
STICKY_SUITE_FILE = "catch_sticky_suite.json"


def ranker_config() -> AgentRunConfig:
    return AgentRunConfig(seeds=RANKER_SEEDS)


def train_ranker() -> QNetwork:
    return run_training(ranker_config()).network


def build_start_suite(ranker: QNetwork, env_cfg: EnvConfig | None = None) -> EvalSuite:
    return make_start_state_suite(ranker, START_SUITE_SEED, env_cfg or EnvConfig(), SuiteParams())


def build_sticky_suite() -> EvalSuite:
    return make_sticky_suite(STICKY_SUITE_SEED)


def _data(name: str):
    return resources.files("detrl").joinpath("data", name)


def load_ranker() -> QNetwork:
    return network_from_bytes(_data(RANKER_FILE).read_bytes())


def load_start_suite() -> EvalSuite:
    return EvalSuite.from_json(_data(START_SUITE_FILE).read_text())


def load_sticky_suite() -> EvalSuite:
    return EvalSuite.from_json(_data(STICKY_SUITE_FILE).read_text())


def suite_for(env_cfg: EnvConfig) -> EvalSuite:
    """The committed suite that fits the environment's stochasticity."""
    return load_sticky_suite() if env_cfg.sticky_p > 0 else load_start_suite()


def regenerate(out_dir) -> None:
    """Rebuild all three artifacts into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ranker = train_ranker()
    save_network(ranker, out / RANKER_FILE)
    build_start_suite(load_network(out / RANKER_FILE)).save(out / START_SUITE_FILE)
    build_sticky_suite().save(out / STICKY_SUITE_FILE)
