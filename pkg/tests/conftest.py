import json
import os
import warnings

import pytest

from irlcast.config import RunConfig, dump_config
from irlcast.scene import GeneratorParams, generate_scenario, save_scenario
from irlcast.train import train_irl, train_refiner


def tiny_config() -> RunConfig:
    return RunConfig(irl_epochs=2, irl_lr=0.005, irl_batch=4,
                     refine_epochs=2, refine_lr=0.02, oversample=80,
                     seed=0).validate()


@pytest.fixture(scope="session")
def tiny_workdir(tmp_path_factory):
    """A small corpus plus trained checkpoints shared across CLI/service tests."""
    root = tmp_path_factory.mktemp("tiny")
    corpus_dir = root / "corpus"
    corpus_dir.mkdir()
    params = GeneratorParams(block_prob=0.3)
    scenarios = []
    for i in range(6):
        kind = "t_junction" if i % 2 == 0 else "crossing"
        s = generate_scenario(kind, params, seed=500 + i)
        save_scenario(s, str(corpus_dir / f"{s.id}.json"))
        scenarios.append(s)
    cfg = tiny_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stage1, _ = train_irl(scenarios, cfg,
                              checkpoint_path=str(root / "stage1.json"))
        train_refiner(scenarios, stage1, cfg,
                      checkpoint_path=str(root / "stage2.json"))
    cfg_path = root / "config.json"
    dump_config(cfg, str(cfg_path))
    return {
        "root": str(root),
        "corpus": str(corpus_dir),
        "stage1": str(root / "stage1.json"),
        "stage2": str(root / "stage2.json"),
        "config": str(cfg_path),
        "scenario": str(corpus_dir / f"{scenarios[0].id}.json"),
        "cfg": cfg,
    }
