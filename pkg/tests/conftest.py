"""Shared fixtures: one default-scale trained pipeline reused by the
training-quality tests and the acceptance suite."""

import json
from types import SimpleNamespace

import pytest

from latentadv.attack import AttackConfig, AttackModels, run_attack
from latentadv.cli import _load_admission, _load_corpus, _load_trained, main
from latentadv.config import resolve_config


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """gen-data + train with the all-defaults config, via the CLI layer."""
    workdir = tmp_path_factory.mktemp("default_run") / "run"
    cfg_path = workdir.parent / "config.json"
    cfg_path.write_text(json.dumps({"paths": {"workdir": str(workdir)}}))
    assert main(["gen-data", str(cfg_path)]) == 0
    assert main(["train", str(cfg_path)]) == 0

    cfg = resolve_config({"paths": {"workdir": str(workdir)}})
    samples = _load_corpus(cfg)
    admission = _load_admission(cfg)
    schedule, codec, score, table, white_box, transfer = _load_trained(cfg)
    bundle = AttackModels(
        codec=codec,
        score_net=score,
        table=table,
        schedule=schedule,
        white_box=tuple(white_box),
        white_box_names=tuple(f"classifier_{i}" for i in range(len(white_box))),
        transfer=transfer,
        transfer_name="transfer",
        admission=admission,
    )
    return SimpleNamespace(
        config=cfg,
        config_path=str(cfg_path),
        workdir=str(workdir),
        samples=samples,
        admission=admission,
        schedule=schedule,
        codec=codec,
        score=score,
        table=table,
        white_box=white_box,
        transfer=transfer,
        bundle=bundle,
    )


@pytest.fixture(scope="session")
def default_attack_results(default_run):
    """Default attack over every fake test image of the default run."""
    fakes = [
        (i, s) for i, s in enumerate(default_run.samples) if s.split == "test" and s.label == 1
    ]
    attack_cfg = AttackConfig(seed=default_run.config["attack"]["seed"])
    results = [
        run_attack(s.image, attack_cfg, default_run.bundle, image_id=i) for i, s in fakes
    ]
    return SimpleNamespace(fakes=fakes, attack_cfg=attack_cfg, results=results)
