from __future__ import annotations

import json

import pytest

from evomal.config import experiment_from_dict, experiment_to_dict, load_config
from evomal.errors import ConfigError
from evomal.loop import ExperimentConfig


def test_empty_document_gives_defaults():
    assert experiment_from_dict({}) == ExperimentConfig()


def test_missing_path_gives_defaults():
    assert load_config(None) == ExperimentConfig()


def test_round_trip_through_json(tmp_path):
    doc = {
        "cycles": 2,
        "master_seed": 9,
        "evo": {"population_size": 4, "candidate_pool_size": 8, "kinds": ["Pack", "Unpack"]},
        "corpus": {"sections_range": [2, 3], "n_malware": 30, "holdout_malware": 5},
        "detector": {"k": 512},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    cfg = load_config(path)
    assert cfg.cycles == 2 and cfg.evo.kinds == ("Pack", "Unpack")
    assert cfg.corpus.sections_range == (2, 3)
    again = experiment_from_dict(json.loads(json.dumps(experiment_to_dict(cfg))))
    assert again == cfg


@pytest.mark.parametrize("doc", [
    {"cycle": 3},
    {"evo": {"populaton_size": 4}},
    {"detector": {"k": 512, "depth": 2}},
])
def test_unknown_keys_are_rejected(doc):
    with pytest.raises(ConfigError, match="unknown"):
        experiment_from_dict(doc)


@pytest.mark.parametrize("doc", [
    [],
    {"evo": []},
    {"cycles": 0},
    {"evo": {"weighting_mode": "greedy"}},
    {"corpus": {"split_ratio": 2}},
])
def test_invalid_values_are_config_errors(doc):
    with pytest.raises(ConfigError):
        experiment_from_dict(doc)


def test_unreadable_files_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
