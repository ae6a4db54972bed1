from __future__ import annotations

import hashlib
from collections import Counter

import pytest

from evomal.corpus import (
    BENIGN,
    MALWARE,
    CorpusConfig,
    CorpusManifest,
    ManifestEntry,
    generate_corpus,
    generate_file,
    make_plan,
    split_corpus,
)
from evomal.errors import InsufficientSamples
from evomal.pe import parse_pe, serialize_pe

from oracles import stratified_split_counts

SMALL = CorpusConfig(n_malware=12, n_benign=10, holdout_malware=2, size_range=(4096, 8192))


def _bare_manifest(n_malware: int, n_benign: int) -> CorpusManifest:
    entries = [ManifestEntry(f"m{i}", MALWARE, "train", f"dm{i}") for i in range(n_malware)]
    entries += [ManifestEntry(f"b{i}", BENIGN, "train", f"db{i}") for i in range(n_benign)]
    return CorpusManifest(tuple(entries))


def _counts(manifest: CorpusManifest) -> dict:
    return dict(Counter((e.split, e.label) for e in manifest.entries))


@pytest.mark.parametrize("n_malware,n_benign,ratio,holdout", [
    (400, 400, 0.9, 40),
    (400, 400, 0.9, 100),
    (37, 23, 0.75, 5),
    (3, 2, 0.5, 0),
])
def test_split_counts_match_oracle(n_malware, n_benign, ratio, holdout):
    split = split_corpus(_bare_manifest(n_malware, n_benign), ratio, holdout, seed=1)
    expected = {k: v for k, v in stratified_split_counts(n_malware, n_benign, ratio, holdout).items() if v}
    assert _counts(split) == expected


def test_worked_split_example():
    split = split_corpus(_bare_manifest(400, 400), 0.9, 40, seed=0)
    c = _counts(split)
    assert (c[("train", MALWARE)], c[("validation", MALWARE)], c[("holdout", MALWARE)]) == (324, 36, 40)
    assert (c[("train", BENIGN)], c[("validation", BENIGN)]) == (360, 40)


def test_split_is_a_seeded_partition():
    base = _bare_manifest(50, 40)
    a = split_corpus(base, 0.8, 10, seed=7)
    assert a == split_corpus(base, 0.8, 10, seed=7)
    assert a != split_corpus(base, 0.8, 10, seed=8)
    assert [e.path for e in a.entries] == [e.path for e in base.entries]
    assert all(e.split in ("train", "validation", "holdout") for e in a.entries)
    assert {e.label for e in a.select("holdout")} == {MALWARE}


def test_holdout_too_large_is_rejected():
    with pytest.raises(InsufficientSamples):
        split_corpus(_bare_manifest(5, 5), 0.9, 5, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(n_malware=10, holdout_malware=10)
    with pytest.raises(ValueError):
        CorpusConfig(split_ratio=1.0)
    with pytest.raises(ValueError):
        CorpusConfig(signal_strength=1.5)


def test_generation_is_deterministic():
    cfg = CorpusConfig(seed=5)
    assert generate_file(MALWARE, 3, cfg) == generate_file(MALWARE, 3, cfg)
    assert generate_file(MALWARE, 3, cfg) != generate_file(MALWARE, 4, cfg)
    assert generate_file(MALWARE, 3, cfg) != generate_file(MALWARE, 3, CorpusConfig(seed=6))


def test_sample_files_respect_the_config(sample_files, corpus_cfg):
    lo, hi = corpus_cfg.sections_range
    for _, data in sample_files:
        pe = parse_pe(data)
        assert serialize_pe(pe) == data
        assert lo <= pe.section_count <= hi


def test_corpus_covers_optional_structures(sample_files):
    pes = [parse_pe(d) for _, d in sample_files]
    assert any(pe.certificate_range() is not None for pe in pes)
    assert any(pe.certificate_range() is None for pe in pes)
    assert any(pe.optional.directory(6) != (0, 0) for pe in pes)
    assert any(pe.optional.is_pe32_plus for pe in pes)
    assert any(not pe.optional.is_pe32_plus for pe in pes)


def test_plans_depend_on_label():
    m, _ = make_plan(MALWARE, 0, CorpusConfig())
    b, _ = make_plan(BENIGN, 0, CorpusConfig())
    assert m != b


def test_generated_corpus_on_disk(tmp_path):
    manifest = generate_corpus(SMALL, tmp_path)
    assert len(manifest.entries) == 22
    assert manifest.verify() == []
    reread = CorpusManifest.read(tmp_path / "manifest.csv")
    assert reread.entries == manifest.entries
    for e in reread.entries:
        data = (tmp_path / e.path).read_bytes()
        assert hashlib.sha256(data).hexdigest() == e.digest
        assert serialize_pe(parse_pe(data)) == data
    expected = stratified_split_counts(12, 10, SMALL.split_ratio, 2)
    assert _counts(reread) == {k: v for k, v in expected.items() if v}
    labels = [y for _, y in reread.load("train")]
    assert set(labels) == {0, 1}


def test_tampered_file_fails_verification(tmp_path):
    manifest = generate_corpus(SMALL, tmp_path)
    victim = manifest.entries[0].path
    (tmp_path / victim).write_bytes(b"MZ")
    assert manifest.verify() == [victim]


def test_unbound_manifest_cannot_load():
    with pytest.raises(ValueError):
        _bare_manifest(2, 2).load()
