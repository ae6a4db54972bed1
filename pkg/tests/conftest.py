from __future__ import annotations

import numpy as np
import pytest

from evomal.corpus import BENIGN, MALWARE, CorpusConfig, generate_file
from evomal.detector import DetectorConfig, DetectorWeights, TrainConfig, loss_and_grad, train
from evomal.evolution import EvoConfig
from evomal.loop import ExperimentConfig

from oracles import finite_difference

SMALL_DETECTOR = DetectorConfig(k=1024, embed_dim=4, conv_filters=6, kernel_size=16, stride=16, hidden_units=6)

# three kinds, two params each, length 2: 36 genomes in all
TINY_KINDS = ("RenameSection", "AppendSectionSlack", "SetChecksum")
TINY_EVO = EvoConfig(
    population_size=6, candidate_pool_size=12, generation_limit=4, score_threshold=1.0,
    sequence_length=2, kinds=TINY_KINDS, param_limits={k: 2 for k in TINY_KINDS},
    weighting_mode="uniform",
)


def random_tiny(seed: int):
    """A small random detector, input and label for gradient checks."""
    rng = np.random.default_rng(seed)
    cfg = DetectorConfig(
        k=int(rng.integers(8, 40)),
        embed_dim=int(rng.integers(1, 4)),
        conv_filters=int(rng.integers(1, 4)),
        kernel_size=int(rng.integers(1, 5)),
        stride=int(rng.integers(1, 5)),
        hidden_units=int(rng.integers(1, 4)),
    )
    w = DetectorWeights.initialize(cfg, seed, scale=2.0)
    w = w.unflatten(w.flat() + rng.normal(0, 0.1, w.flat().size))
    return w, rng.integers(0, 256, cfg.k), int(rng.integers(0, 2))


def max_relative_error(weights, x, label) -> tuple[float, int]:
    """Worst analytic-vs-central-difference error over stable coordinates."""
    _, grad = loss_and_grad(weights, x, label)
    fd, stable = finite_difference(weights, x, label, h=1e-4)
    worst, checked = 0.0, 0
    for a, n, ok in zip(grad.flat(), fd, stable):
        if not ok:
            continue
        checked += 1
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-8))
    return worst, checked


def tiny_experiment(output_dir, **overrides) -> ExperimentConfig:
    """A loop configuration that finishes in about a second."""
    base = dict(
        cycles=2,
        detector=SMALL_DETECTOR,
        train=TrainConfig(epochs=25, batch_size=8),
        evo=EvoConfig(population_size=4, candidate_pool_size=6, generation_limit=3, sequence_length=4),
        corpus=CorpusConfig(n_malware=24, n_benign=20, holdout_malware=4, size_range=(4096, 8192)),
        output_dir=str(output_dir),
        retrain_epochs=2,
        max_evolved=4,
        baseline_samples=3,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def corpus_cfg() -> CorpusConfig:
    return CorpusConfig()


@pytest.fixture(scope="session")
def sample_files(corpus_cfg) -> list[tuple[str, bytes]]:
    """The first 25 malware and 25 benign files of the default corpus."""
    out = []
    for label in (MALWARE, BENIGN):
        out.extend((label, generate_file(label, i, corpus_cfg)) for i in range(25))
    return out


@pytest.fixture(scope="session")
def malware_bytes(sample_files) -> list[bytes]:
    return [data for label, data in sample_files if label == MALWARE]


@pytest.fixture(scope="session")
def small_detector(sample_files) -> DetectorWeights:
    """A quickly trained reduced-size detector for evolution-level tests."""
    dataset = [(data, int(label == BENIGN)) for label, data in sample_files]
    weights = DetectorWeights.initialize(SMALL_DETECTOR, seed=3)
    return train(weights, dataset, TrainConfig(epochs=15, seed=3))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# PASS/FAIL lines from the acceptance suite, repeated after the test summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
