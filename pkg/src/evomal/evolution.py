"""Per-sample evolutionary search over action sequences, plus a random-search
baseline spending the same number of detector queries.

Every random draw comes from a counter-based Philox stream keyed by
(seed, sample id, generation, child), so results do not depend on the
order in which children are evaluated or on how work is spread over
processes.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .actions import ActionKind, ActionSequence, Alphabet, apply_sequence
from .detector import DetectorWeights, score_bytes
from .errors import LayoutConflict, LengthMismatch
from .pe import PeFile, serialize_pe

INIT_STREAM = 0xFFFF_FFFF
RANDOM_STREAM = 0xFFFF_FFFE


@dataclass(frozen=True)
class EvoConfig:
    population_size: int = 16
    candidate_pool_size: int = 48
    score_threshold: float = 0.5 + 1e-6
    generation_limit: int = 10
    shuffle_prob: float = 0.2
    replace_prob: float = 0.1
    crossover_prob: float = 0.9
    weighting_mode: str = "validation"
    seed: int = 0
    sequence_length: int = 8
    # optional restriction of the gene alphabet (kind names and per-kind pool caps)
    kinds: Optional[tuple[str, ...]] = None
    param_limits: Optional[dict[str, int]] = None

    def __post_init__(self):
        if self.population_size < 1:
            raise ValueError("population_size must be at least 1")
        if self.candidate_pool_size < self.population_size:
            raise ValueError("candidate_pool_size must be >= population_size")
        if not 0 <= self.score_threshold <= 1:
            raise ValueError("score_threshold must lie in [0, 1]")
        if self.generation_limit < 1:
            raise ValueError("generation_limit must be at least 1")
        for name in ("shuffle_prob", "replace_prob", "crossover_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.weighting_mode not in ("uniform", "validation"):
            raise ValueError(f"unknown weighting mode {self.weighting_mode!r}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be at least 1")
        self.alphabet()  # rejects unknown kind names early

    @property
    def budget(self) -> int:
        """Detector queries of a run that exhausts the generation limit."""
        return self.population_size + self.generation_limit * self.candidate_pool_size

    def alphabet(self, mode: Optional[str] = None) -> Alphabet:
        kinds = [ActionKind(k) for k in self.kinds] if self.kinds else None
        limits = {ActionKind(k): v for k, v in (self.param_limits or {}).items()}
        return Alphabet(mode or self.weighting_mode, kinds, limits)


@dataclass(frozen=True)
class Individual:
    sequence: ActionSequence
    fitness: float
    modified_bytes: int
    hit_irreversible: bool
    error: Optional[str] = None

    @property
    def evades(self) -> bool:
        return self.fitness > 0.5


@dataclass
class EvolutionResult:
    sample_id: int
    best: Individual
    history: list[float]
    evaluations_used: int
    generations: int = 0
    # best of the current population per generation; may dip when the
    # population loses its best member
    population_history: list[float] = field(default_factory=list)
    trajectory: list[Individual] = field(default_factory=list)

    @property
    def evaded(self) -> bool:
        return self.best.evades

    @property
    def dead_species(self) -> bool:
        return self.best.hit_irreversible and not self.evaded

    def trace_rows(self) -> list[dict]:
        return [
            {
                "sample_id": self.sample_id,
                "generation": g,
                "best_fitness": repr(ind.fitness),
                "modified_bytes": ind.modified_bytes,
                "hit_irreversible": int(ind.hit_irreversible),
            }
            for g, ind in enumerate(self.trajectory)
        ]


TRACE_FIELDS = ("sample_id", "generation", "best_fitness", "modified_bytes", "hit_irreversible")


def stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def init_population(cfg: EvoConfig, rng: np.random.Generator, alphabet: Optional[Alphabet] = None) -> list[ActionSequence]:
    alphabet = alphabet or cfg.alphabet()
    return [
        ActionSequence(tuple(alphabet.sample(rng) for _ in range(cfg.sequence_length)))
        for _ in range(cfg.population_size)
    ]


def mutate(seq: ActionSequence, cfg: EvoConfig, rng: np.random.Generator, alphabet: Optional[Alphabet] = None) -> ActionSequence:
    """Adjacent swaps with probability shuffle_prob per pair, then per-position
    resampling with probability replace_prob."""
    alphabet = alphabet or cfg.alphabet()
    genes = list(seq.genes)
    swaps = rng.random(max(len(genes) - 1, 0)) < cfg.shuffle_prob
    for i in np.flatnonzero(swaps):
        genes[i], genes[i + 1] = genes[i + 1], genes[i]
    replace = rng.random(len(genes)) < cfg.replace_prob
    for i in np.flatnonzero(replace):
        genes[i] = alphabet.sample(rng)
    return ActionSequence(tuple(genes))


def crossover(a: ActionSequence, b: ActionSequence, cfg: EvoConfig, rng: np.random.Generator) -> ActionSequence:
    """Uniform crossover: each position from either parent with probability 1/2."""
    if len(a) != len(b):
        raise LengthMismatch(f"parents have lengths {len(a)} and {len(b)}")
    take_a = rng.random(len(a)) < 0.5
    return ActionSequence(tuple(x if t else y for x, y, t in zip(a.genes, b.genes, take_a)))


def evaluate_individual(
    sample: PeFile,
    seq: ActionSequence,
    weights: DetectorWeights,
    original: Optional[bytes] = None,
) -> Individual:
    try:
        out = apply_sequence(sample, seq, original)
    except LayoutConflict as exc:
        return Individual(seq, 0.0, 0, False, error=str(exc))
    return Individual(seq, score_bytes(weights, out.data), out.modified_bytes, out.hit_irreversible)


class _Evaluator:
    """Memoizes fitness per genome within one run; every call still counts
    against the query budget."""

    def __init__(self, sample: PeFile, weights: DetectorWeights):
        self.sample = sample
        self.weights = weights
        self.original = serialize_pe(sample)
        self.cache: dict[ActionSequence, Individual] = {}
        self.calls = 0

    def __call__(self, seq: ActionSequence) -> Individual:
        self.calls += 1
        ind = self.cache.get(seq)
        if ind is None:
            ind = evaluate_individual(self.sample, seq, self.weights, self.original)
            self.cache[seq] = ind
        return ind


def _top(individuals: Sequence[Individual], n: int) -> list[Individual]:
    order = sorted(range(len(individuals)), key=lambda i: -individuals[i].fitness)
    return [individuals[i] for i in order[:n]]


def evolve_for_sample(
    sample: PeFile, weights: DetectorWeights, cfg: EvoConfig, sample_id: int = 0
) -> EvolutionResult:
    """Evolve action sequences maximizing the benign score of ``sample``.

    The caller is expected to pass a sample the detector flags as malware.
    """
    alphabet = cfg.alphabet()
    evaluate = _Evaluator(sample, weights)
    population = [evaluate(s) for s in init_population(cfg, stream(cfg.seed, sample_id, 0, INIT_STREAM), alphabet)]
    best = _top(population, 1)[0]
    trajectory = [best]
    population_history = [best.fitness]
    g = 0
    while best.fitness < cfg.score_threshold and g < cfg.generation_limit:
        g += 1
        leader = _top(population, 1)[0]
        pool = []
        for child in range(cfg.candidate_pool_size):
            rng = stream(cfg.seed, sample_id, g, child)
            parent = population[int(rng.integers(len(population)))]
            seq = parent.sequence
            if rng.random() < cfg.crossover_prob:
                seq = crossover(parent.sequence, leader.sequence, cfg, rng)
            pool.append(evaluate(mutate(seq, cfg, rng, alphabet)))
        population = _top(pool, cfg.population_size)
        population_history.append(population[0].fitness)
        if population[0].fitness > best.fitness:
            best = population[0]
        trajectory.append(best)
    return EvolutionResult(
        sample_id=sample_id,
        best=best,
        history=[ind.fitness for ind in trajectory],
        evaluations_used=evaluate.calls,
        generations=g,
        population_history=population_history,
        trajectory=trajectory,
    )


def random_search_baseline(
    sample: PeFile,
    weights: DetectorWeights,
    budget: int,
    weighting_mode: str = "uniform",
    seed: int = 0,
    sample_id: int = 0,
    sequence_length: int = 8,
    alphabet: Optional[Alphabet] = None,
) -> EvolutionResult:
    """Best of ``budget`` independently drawn sequences (with replacement)."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    alphabet = alphabet or Alphabet(weighting_mode)
    rng = stream(seed, sample_id, 0, RANDOM_STREAM)
    evaluate = _Evaluator(sample, weights)
    best = None
    trajectory = []
    for _ in range(budget):
        ind = evaluate(ActionSequence(tuple(alphabet.sample(rng) for _ in range(sequence_length))))
        if best is None or ind.fitness > best.fitness:
            best = ind
        trajectory.append(best)
    return EvolutionResult(
        sample_id=sample_id,
        best=best,
        history=[ind.fitness for ind in trajectory],
        evaluations_used=evaluate.calls,
        trajectory=trajectory,
    )


def _evolve_job(args):
    sample, weights, cfg, sample_id = args
    return evolve_for_sample(sample, weights, cfg, sample_id)


def evolve_corpus(
    samples: Sequence[PeFile],
    weights: DetectorWeights,
    cfg: EvoConfig,
    sample_ids: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> list[EvolutionResult]:
    """Independent runs per sample; results follow input order."""
    ids = list(range(len(samples))) if sample_ids is None else list(sample_ids)
    if len(ids) != len(samples):
        raise ValueError("sample_ids and samples differ in length")
    jobs = [(s, weights, cfg, i) for s, i in zip(samples, ids)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_evolve_job, jobs))
    return [_evolve_job(j) for j in jobs]
