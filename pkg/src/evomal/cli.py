"""Command-line driver: corpus generation, training, single-sample evolution,
the full hardening loop, and plot-ready report tables."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .actions import apply_sequence
from .config import experiment_to_dict, load_config
from .corpus import BENIGN, MALWARE, SPLITS, CorpusManifest, generate_corpus
from .detector import DetectorWeights, evaluate, score_bytes, train
from .errors import ConfigError, DivergedLoss, EvomalError
from .evolution import evolve_for_sample
from .loop import run_experiment
from .pe import parse_pe

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_DIVERGED = 4
EXIT_NOT_DETECTED = 5
EXIT_NO_TRACES = 6

CYCLE_TABLE = "accuracy_by_cycle.csv"
BYTES_TABLE = "accuracy_by_bytes.csv"


def _write_config(cfg, path: Path) -> None:
    path.write_text(json.dumps(experiment_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_gen_corpus(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    try:
        manifest = generate_corpus(cfg.corpus, out)
    except (OSError, EvomalError, ValueError) as exc:
        _err(f"corpus generation failed: {exc}")
        return EXIT_GENERATION
    _write_config(cfg, out / "config.json")
    for split in SPLITS:
        counts = {lab: len(manifest.select(split, lab)) for lab in (MALWARE, BENIGN)}
        print(f"{split:<10} malware={counts[MALWARE]:<5} benign={counts[BENIGN]}")
    print(f"total      {len(manifest.entries)} files in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = CorpusManifest.read(Path(args.corpus) / "manifest.csv")
    train_set, validation = manifest.load("train"), manifest.load("validation")
    weights = DetectorWeights.initialize(cfg.detector, cfg.train.seed, cfg.train.init_scale)
    weights = train(weights, train_set, cfg.train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    weights.save(out)
    _write_config(cfg, out.with_name(out.name + ".config.json"))
    print(f"train_accuracy {evaluate(weights, train_set).accuracy:.4f}")
    print(f"validation_accuracy {evaluate(weights, validation).accuracy:.4f}")
    return EXIT_OK


def cmd_evolve(args) -> int:
    cfg = load_config(args.config)
    weights = DetectorWeights.load(args.weights)
    sample_path = Path(args.sample)
    data = sample_path.read_bytes()
    initial = score_bytes(weights, data)
    if initial > weights.config.threshold:
        _err(f"sample already scored benign ({initial:.4f}); nothing to evade")
        return EXIT_NOT_DETECTED
    result = evolve_for_sample(parse_pe(data), weights, cfg.evo)
    for g, ind in enumerate(result.trajectory):
        print(f"generation {g} best_fitness {ind.fitness:.6f} modified_bytes {ind.modified_bytes}")
    print(f"evaded {result.evaded} evaluations {result.evaluations_used}")
    print("sequence " + result.best.sequence.describe())
    modified = apply_sequence(parse_pe(data), result.best.sequence, data).data
    out = sample_path.with_name(sample_path.stem + ".evolved" + sample_path.suffix)
    out.write_bytes(modified)
    _write_config(cfg, out.with_name(out.name + ".config.json"))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_loop(args) -> int:
    cfg = load_config(args.config)
    cfg = replace(cfg, output_dir=str(args.out))
    manifest = CorpusManifest.read(Path(args.corpus) / "manifest.csv") if args.corpus else None
    reports = run_experiment(cfg, manifest, log=print)
    print(f"{len(reports)} cycle reports written to {args.out}")
    return EXIT_OK


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _emit(path: Path, rows: list[dict], title: str) -> None:
    names = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        writer.writerows(rows)
    print(title)
    print(",".join(names))
    for r in rows:
        print(",".join(str(r[n]) for n in names))


def cycle_table(out: Path) -> list[dict]:
    """One row per cycle: accuracies plus the evolution outcome from the traces."""
    trace = _read_rows(out / "evolution_trace.csv")
    final: dict[tuple[str, str], float] = {}
    for row in trace:
        final[(row["cycle"], row["sample_id"])] = float(row["best_fitness"])
    rows = []
    for path in sorted(out.glob("cycle_*.csv"), key=lambda p: int(p.stem.split("_")[1])):
        rep = _read_rows(path)[0]
        c = rep["cycle_index"]
        fits = [v for (cyc, _), v in final.items() if cyc == c]
        rows.append({
            "cycle": c,
            "validation_accuracy": rep["validation_accuracy"],
            "holdout_accuracy": rep["holdout_accuracy"],
            "mixture_accuracy": rep["mixture_accuracy"],
            "evolved_added": rep["evolved_added"],
            "mean_best_fitness": repr(float(np.mean(fits))) if fits else "",
        })
    return rows


def cmd_report(args) -> int:
    out = Path(args.out)
    needed = [out / "evolution_trace.csv", out / "bytes_vs_accuracy.csv"]
    if not all(p.is_file() for p in needed) or not list(out.glob("cycle_*.csv")):
        _err(f"no loop traces under {out}")
        return EXIT_NO_TRACES
    _emit(out / CYCLE_TABLE, cycle_table(out), "# detection accuracy by cycle")
    print()
    _emit(out / BYTES_TABLE, _read_rows(out / "bytes_vs_accuracy.csv"), "# detection accuracy by modified bytes")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evomal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write the synthetic corpus and its manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the initial detector")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="weights file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evolve", help="evolve one detected sample")
    p.add_argument("--config")
    p.add_argument("--weights", required=True)
    p.add_argument("--sample", required=True)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("loop", help="run the full hardening loop")
    p.add_argument("--config")
    p.add_argument("--corpus", help="existing corpus directory; generated under --out if omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("report", help="aggregate loop outputs into two tables")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except DivergedLoss as exc:
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED
    except (EvomalError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
