"""The outer hardening cycle: train, evolve evaders from caught training
malware, add them to the training set as malware, retrain, measure."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .actions import apply_sequence, pool_manifest
from .corpus import CorpusConfig, CorpusManifest, generate_corpus
from .detector import DetectorConfig, DetectorWeights, TrainConfig, evaluate, score_bytes, train
from .errors import NoDetectedMalware, OverlapDetected
from .evolution import (
    TRACE_FIELDS,
    EvoConfig,
    EvolutionResult,
    evolve_corpus,
    evolve_for_sample,
    random_search_baseline,
)
from .pe import parse_pe

Dataset = list[tuple[bytes, int]]

OVERFIT_GAP = 0.05
# log4-spaced modified-byte buckets; the last one is open-ended
BYTE_BUCKETS = (0, 64, 256, 1024, 4096, 16384, 65536, None)
COMPARISON_FIELDS = (
    "sample_id", "ea_best_fitness", "random_best_fitness", "ea_modified_bytes", "random_modified_bytes",
)
BYTES_FIELDS = ("bucket_lo", "bucket_hi", "ea_accuracy", "random_accuracy", "ea_variants", "random_variants")


@dataclass(frozen=True)
class ExperimentConfig:
    cycles: int = 3
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evo: EvoConfig = field(default_factory=EvoConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    output_dir: str = "run"
    master_seed: int = 0
    # epochs of each warm-started retrain
    retrain_epochs: int = 10
    # caps on how many caught samples are evolved per cycle and how many feed
    # the equal-budget random-search comparison; None means all of them
    max_evolved: Optional[int] = None
    baseline_samples: int = 50
    workers: int = 1

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError("cycles must be at least 1")
        if self.retrain_epochs < 0:
            raise ValueError("retrain_epochs must be non-negative")
        if self.max_evolved is not None and self.max_evolved < 1:
            raise ValueError("max_evolved must be positive")
        if self.baseline_samples < 0:
            raise ValueError("baseline_samples must be non-negative")


@dataclass(frozen=True)
class CycleReport:
    cycle_index: int
    train_accuracy: float
    validation_accuracy: float
    holdout_accuracy: float
    evasion_rate_before: float
    evasion_rate_after: float
    evolved_added: int
    mean_modified_bytes: float
    dead_species_count: int
    detected_malware: int
    attack_success_rate: float
    validation_accuracy_before: float
    holdout_accuracy_before: float
    mixture_accuracy_before: float
    mixture_accuracy: float
    first_cycle_evasion_rate: float

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.field_names())
            writer.writeheader()
            writer.writerow({k: _fmt(v) for k, v in asdict(self).items()})

    @classmethod
    def read_csv(cls, path: Path) -> "CycleReport":
        with open(path, newline="") as fh:
            row = next(csv.DictReader(fh))
        kinds = {f.name: f.type for f in fields(cls)}
        return cls(**{k: (int(v) if kinds[k] in ("int", int) else float(v)) for k, v in row.items()})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


@dataclass
class LoopState:
    weights: DetectorWeights
    train_set: Dataset
    validation: Dataset
    holdout: Dataset
    # the clean training set size; evolution only starts from these samples
    n_original: int = 0
    first_evaders: Optional[Dataset] = None

    def __post_init__(self):
        if not self.n_original:
            self.n_original = len(self.train_set)


def derive_seed(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([master_seed, *key]).generate_state(1, np.uint64)[0])


def _accuracy(weights, dataset) -> float:
    return evaluate(weights, dataset).accuracy if dataset else 0.0


def _evasion_rate(weights: DetectorWeights, samples: Sequence[bytes]) -> float:
    if not samples:
        return 0.0
    return float(np.mean([score_bytes(weights, s) > weights.config.threshold for s in samples]))


def caught_training_malware(state: LoopState) -> list[int]:
    """Indices of original training malware the detector scores as malware."""
    originals = state.train_set[: state.n_original]
    ev = evaluate(state.weights, originals)
    return list(ev.detected_malware)


def _variant(sample: bytes, result: EvolutionResult) -> bytes:
    return apply_sequence(parse_pe(sample), result.best.sequence, sample).data


def run_cycle(
    state: LoopState,
    cfg: ExperimentConfig,
    cycle_index: int,
    on_results: Optional[Callable[[list[int], list[EvolutionResult]], None]] = None,
) -> tuple[LoopState, CycleReport, list[EvolutionResult]]:
    caught = caught_training_malware(state)
    if not caught:
        raise NoDetectedMalware(f"cycle {cycle_index}: detector catches no training malware")
    if cfg.max_evolved is not None:
        caught = caught[: cfg.max_evolved]
    evo = replace(cfg.evo, seed=derive_seed(cfg.master_seed, cycle_index, 1))
    samples = [parse_pe(state.train_set[i][0]) for i in caught]
    results = evolve_corpus(samples, state.weights, evo, sample_ids=caught, workers=cfg.workers)
    if on_results is not None:
        on_results(caught, results)

    evaders = [_variant(state.train_set[i][0], r) for i, r in zip(caught, results) if r.evaded]
    modified = [r.best.modified_bytes for r in results if r.evaded]
    mixture = state.validation + [(e, 0) for e in evaders]
    before = dict(
        validation_accuracy_before=_accuracy(state.weights, state.validation),
        holdout_accuracy_before=_accuracy(state.weights, state.holdout),
        mixture_accuracy_before=_accuracy(state.weights, mixture),
        evasion_rate_before=_evasion_rate(state.weights, evaders),
    )

    train_set = state.train_set + [(e, 0) for e in evaders]
    tcfg = replace(cfg.train, epochs=cfg.retrain_epochs, seed=derive_seed(cfg.master_seed, cycle_index, 2))
    weights = train(state.weights, train_set, tcfg)
    first = state.first_evaders if state.first_evaders is not None else [(e, 0) for e in evaders]

    report = CycleReport(
        cycle_index=cycle_index,
        train_accuracy=_accuracy(weights, train_set),
        validation_accuracy=_accuracy(weights, state.validation),
        holdout_accuracy=_accuracy(weights, state.holdout),
        evasion_rate_after=_evasion_rate(weights, evaders),
        evolved_added=len(evaders),
        mean_modified_bytes=float(np.mean(modified)) if modified else 0.0,
        dead_species_count=sum(r.dead_species for r in results),
        detected_malware=len(caught),
        attack_success_rate=len(evaders) / len(caught),
        mixture_accuracy=_accuracy(weights, mixture),
        first_cycle_evasion_rate=_evasion_rate(weights, [e for e, _ in first]),
        **before,
    )
    new_state = replace(state, weights=weights, train_set=train_set, first_evaders=first)
    return new_state, report, results


def _bucket(n: int) -> int:
    for i in range(len(BYTE_BUCKETS) - 1):
        hi = BYTE_BUCKETS[i + 1]
        if hi is None or n < hi:
            return i
    raise AssertionError("unreachable")


def _search_variants(
    dataset: Dataset, indices: Sequence[int], weights: DetectorWeights, evo: EvoConfig, seed: int
) -> dict[str, list[tuple[bytes, EvolutionResult]]]:
    """Best variants from evolution and from random search at the same budget.

    Evolution runs with a threshold of 1 so both searches spend the whole
    budget rather than stopping at the first evader."""
    full = replace(evo, score_threshold=1.0, seed=seed)
    out = {"ea": [], "random": []}
    for i in indices:
        data = dataset[i][0]
        pe = parse_pe(data)
        ea = evolve_for_sample(pe, weights, full, i)
        rs = random_search_baseline(
            pe, weights, evo.budget, "uniform", seed, i, evo.sequence_length, evo.alphabet("uniform")
        )
        out["ea"].append((_variant(data, ea), ea))
        out["random"].append((_variant(data, rs), rs))
    return out


def bytes_vs_accuracy(state: LoopState, cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    """Post-retrain detection accuracy per modified-byte bucket, evolution
    against random search.

    Both searches attack the same caught training malware at equal budget.
    For every bucket and search, a copy of the current detector is retrained
    with that search's evaders whose modified-byte count lies in the bucket.
    All copies are scored on one fixed probe: the clean validation set plus
    the best variants both searches find for caught validation malware,
    which no copy ever trains on.

    Also returns the per-sample best fitness of both searches.
    """
    caught = caught_training_malware(state)[: cfg.baseline_samples]
    train_side = _search_variants(state.train_set, caught, state.weights, cfg.evo, derive_seed(cfg.master_seed, 0, 3))
    held = list(evaluate(state.weights, state.validation).detected_malware)
    probe_side = _search_variants(state.validation, held, state.weights, cfg.evo, derive_seed(cfg.master_seed, 0, 4))
    probe = state.validation + [(v, 0) for route in probe_side.values() for v, _ in route]
    tcfg = replace(cfg.train, epochs=cfg.retrain_epochs, seed=derive_seed(cfg.master_seed, 0, 2))

    rows = []
    for b in range(len(BYTE_BUCKETS) - 1):
        row = {"bucket_lo": BYTE_BUCKETS[b], "bucket_hi": "" if BYTE_BUCKETS[b + 1] is None else BYTE_BUCKETS[b + 1]}
        for name, route in train_side.items():
            added = [(v, 0) for v, r in route if r.evaded and _bucket(r.best.modified_bytes) == b]
            hardened = train(state.weights, state.train_set + added, tcfg)
            row[f"{name}_accuracy"] = repr(_accuracy(hardened, probe))
            row[f"{name}_variants"] = len(added)
        rows.append(row)
    comparison = [
        {
            "sample_id": i,
            "ea_best_fitness": repr(ea.best.fitness),
            "random_best_fitness": repr(rs.best.fitness),
            "ea_modified_bytes": ea.best.modified_bytes,
            "random_modified_bytes": rs.best.modified_bytes,
        }
        for i, (_, ea), (_, rs) in zip(caught, train_side["ea"], train_side["random"])
    ]
    return rows, comparison


def _digests(dataset: Dataset) -> set[str]:
    return {hashlib.sha256(d).hexdigest() for d, _ in dataset}


def overfit_check(weights: DetectorWeights, validation: Dataset, holdout: Dataset) -> float:
    """Validation accuracy minus holdout accuracy; the sets must not share files."""
    if _digests(validation) & _digests(holdout):
        raise OverlapDetected("holdout and validation share samples")
    return evaluate(weights, validation).accuracy - evaluate(weights, holdout).accuracy


def is_overfit(gap: float) -> bool:
    return gap > OVERFIT_GAP


def check_disjoint(manifest: CorpusManifest) -> None:
    seen: dict[str, str] = {}
    for e in manifest.entries:
        if e.digest in seen and seen[e.digest] != e.split:
            raise OverlapDetected(f"{e.path} appears in {seen[e.digest]} and {e.split}")
        seen[e.digest] = e.split


def _write_rows(path: Path, names: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(names))
        writer.writeheader()
        writer.writerows(rows)


def initial_state(cfg: ExperimentConfig, manifest: CorpusManifest) -> LoopState:
    check_disjoint(manifest)
    return LoopState(
        weights=DetectorWeights.initialize(
            cfg.detector, derive_seed(cfg.master_seed, 0, 0), cfg.train.init_scale
        ),
        train_set=manifest.load("train"),
        validation=manifest.load("validation"),
        holdout=manifest.load("holdout"),
    )


def run_experiment(
    cfg: ExperimentConfig,
    manifest: Optional[CorpusManifest] = None,
    log: Callable[[str], None] = lambda msg: None,
) -> list[CycleReport]:
    """Full loop; writes reports, traces, the byte table and weight snapshots
    under ``cfg.output_dir``.  Reports already written survive a failure."""
    from .config import experiment_to_dict

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(experiment_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    (out / "action_pools.json").write_text(json.dumps(pool_manifest(), indent=2) + "\n")
    if manifest is None:
        manifest = generate_corpus(cfg.corpus, out / "corpus")
    state = initial_state(cfg, manifest)
    state.weights = train(state.weights, state.train_set, replace(cfg.train, seed=derive_seed(cfg.master_seed, 0, 1)))
    state.weights.save(out / "weights_initial.bin")
    log(f"initial detector: validation accuracy {_accuracy(state.weights, state.validation):.4f}")

    trace_rows: list[dict] = []

    def capture(cycle):
        def hook(caught, results):
            for r in results:
                trace_rows.extend({"cycle": cycle, **row} for row in r.trace_rows())
        return hook

    reports = []
    try:
        rows, comparison = bytes_vs_accuracy(state, cfg)
        _write_rows(out / "bytes_vs_accuracy.csv", BYTES_FIELDS, rows)
        _write_rows(out / "search_comparison.csv", COMPARISON_FIELDS, comparison)
        log("byte-bucket comparison done")
        for c in range(cfg.cycles):
            state, report, _ = run_cycle(state, cfg, c, on_results=capture(c))
            report.write_csv(out / f"cycle_{c}.csv")
            state.weights.save(out / f"weights_cycle_{c}.bin")
            reports.append(report)
            log(
                f"cycle {c}: caught {report.detected_malware}, evaders {report.evolved_added}, "
                f"validation {report.validation_accuracy:.4f}, holdout {report.holdout_accuracy:.4f}"
            )
    except NoDetectedMalware as exc:
        log(str(exc))
    finally:
        _write_rows(out / "evolution_trace.csv", ("cycle",) + TRACE_FIELDS, trace_rows)
    return reports
