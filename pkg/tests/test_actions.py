from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evomal.actions import (
    CHECKSUM_DEADBEEF,
    CHECKSUM_RECOMPUTED,
    CHECKSUM_ZERO,
    KINDS,
    NAME_SLOTS,
    OVERLAY_SIZES,
    SECTION_NAME_POOL,
    VALIDATION_EPSILON,
    ActionKind,
    ActionSequence,
    Alphabet,
    Gene,
    action_weights,
    apply_action,
    apply_sequence,
    is_applicable,
    is_packed,
    pool_manifest,
    rle_decode,
    rle_encode,
)
from evomal.corpus import CorpusConfig, generate_file, make_plan
from evomal.errors import LayoutConflict
from evomal.pe import byte_diff_count, compute_pe_checksum, parse_pe, serialize_pe

from oracles import checksum_oracle


def _find(sample_files, predicate):
    for _, data in sample_files:
        if predicate(parse_pe(data)):
            return data
    pytest.skip("no sample with the required property")


def _small_signed_file() -> bytes:
    cfg = CorpusConfig(sections_range=(2, 2), size_range=(4096, 4096))
    for i in range(100):
        plan, _ = make_plan("malware", i, cfg)
        if plan.signature and plan.debug and not plan.packed:
            return generate_file("malware", i, cfg)
    raise AssertionError("no small signed file")


def test_kinds_and_descriptors():
    assert len(KINDS) == 11
    assert len([k for k in KINDS if k is not ActionKind.NOOP]) == 10
    assert {k for k in KINDS if not k.reversible} == {ActionKind.REMOVE_SIGNATURE, ActionKind.STRIP_DEBUG}
    assert all(k.pool_size >= 1 for k in KINDS)
    assert Gene(ActionKind.SET_CHECKSUM, CHECKSUM_ZERO).irreversible
    assert not Gene(ActionKind.SET_CHECKSUM, CHECKSUM_RECOMPUTED).irreversible


def test_sequence_rejects_out_of_pool_params():
    with pytest.raises(ValueError):
        ActionSequence.of([(ActionKind.PACK, 1)])


def test_pool_manifest_lists_every_kind():
    doc = pool_manifest()
    assert set(doc["pool_sizes"]) == {k.value for k in KINDS}
    assert doc["overlay_sizes"] == list(OVERLAY_SIZES)


# -- applicability -----------------------------------------------------------

def test_unpack_needs_a_packed_file(sample_files):
    data = _find(sample_files, lambda pe: not is_packed(pe))
    assert not is_applicable(parse_pe(data), ActionKind.UNPACK, 0)


def test_remove_signature_needs_a_signature(sample_files):
    data = _find(sample_files, lambda pe: pe.certificate_range() is None)
    assert not is_applicable(parse_pe(data), ActionKind.REMOVE_SIGNATURE, 0)


def test_noop_always_applies(sample_files):
    for _, data in sample_files[:5]:
        assert is_applicable(parse_pe(data), ActionKind.NOOP, 0)


def test_new_entry_point_without_header_room_conflicts(sample_files):
    pe = parse_pe(sample_files[0][1])
    for _ in range(32):
        try:
            pe = apply_action(pe, ActionKind.NEW_ENTRY_POINT, 0)
        except LayoutConflict:
            return
    raise AssertionError("section table grew without bound")


# -- per-kind semantics ---------------------------------------------------------

def test_append_overlay_1024(sample_files):
    data = sample_files[0][1]
    out = apply_sequence(parse_pe(data), ActionSequence.of([(ActionKind.APPEND_OVERLAY, 2)]))
    assert OVERLAY_SIZES[2] == 1024
    assert len(out.data) == len(data) + 1024
    assert out.data[: len(data)] == data
    assert out.modified_bytes == 1024


def test_unpack_inverts_pack(sample_files):
    data = _find(sample_files, lambda pe: is_applicable(pe, ActionKind.PACK, 0))
    packed = apply_action(parse_pe(data), ActionKind.PACK, 0)
    assert serialize_pe(packed) != data
    assert serialize_pe(apply_action(packed, ActionKind.UNPACK, 0)) == data


def test_remove_signature_is_idempotent(sample_files):
    data = _find(sample_files, lambda pe: pe.certificate_range() is not None)
    seq = ActionSequence.of([(ActionKind.REMOVE_SIGNATURE, 0)] * 2)
    out = apply_sequence(parse_pe(data), seq)
    assert out.applied == (True, False)
    assert out.hit_irreversible
    assert out.result.certificate_range() is None


def test_strip_debug_is_idempotent(sample_files):
    data = _find(sample_files, lambda pe: is_applicable(pe, ActionKind.STRIP_DEBUG, 0))
    out = apply_sequence(parse_pe(data), ActionSequence.of([(ActionKind.STRIP_DEBUG, 0)] * 2))
    assert out.applied == (True, False)
    assert out.result.optional.directory(6) == (0, 0)


def test_set_checksum_recomputed_verifies(sample_files):
    for _, data in sample_files[:10]:
        pe = apply_action(parse_pe(data), ActionKind.SET_CHECKSUM, CHECKSUM_RECOMPUTED)
        out = serialize_pe(pe)
        stored = struct.unpack_from("<I", out, pe.checksum_offset)[0]
        assert stored == compute_pe_checksum(out) == checksum_oracle(out)


def test_rename_section_sets_pool_name(sample_files):
    pe = parse_pe(sample_files[0][1])
    param = 3 * NAME_SLOTS + 1
    out = apply_action(pe, ActionKind.RENAME_SECTION, param)
    assert out.sections[1 % pe.section_count].name == SECTION_NAME_POOL[3]


def test_add_import_appends_a_descriptor(sample_files):
    data = _find(sample_files, lambda pe: is_applicable(pe, ActionKind.ADD_IMPORT, 0))
    pe = parse_pe(data)
    out = apply_action(pe, ActionKind.ADD_IMPORT, 0)
    assert out.section_count == pe.section_count + 1
    assert out.optional.directory(1)[1] == pe.optional.directory(1)[1] + 20


def test_new_entry_point_targets_stub(sample_files):
    pe = parse_pe(sample_files[0][1])
    out = apply_action(pe, ActionKind.NEW_ENTRY_POINT, 0)
    assert out.optional.entry_point_rva == out.sections[-1].virtual_address
    old = (pe.optional.image_base + pe.optional.entry_point_rva) & 0xFFFFFFFF
    assert out.section_data[-1][1:5] == struct.pack("<I", old)


def test_append_slack_keeps_offsets(sample_files):
    data = _find(sample_files, lambda pe: is_applicable(pe, ActionKind.APPEND_SECTION_SLACK, 0))
    pe = parse_pe(data)
    out = apply_action(pe, ActionKind.APPEND_SECTION_SLACK, 0)
    raw = serialize_pe(out)
    assert len(raw) == len(data)
    assert [s.raw_offset for s in out.sections] == [s.raw_offset for s in pe.sections]


# -- sequences ------------------------------------------------------------------

def test_noop_sequence_is_identity(sample_files):
    data = sample_files[0][1]
    out = apply_sequence(parse_pe(data), ActionSequence.noop(8))
    assert out.data == data
    assert out.modified_bytes == 0
    assert not out.hit_irreversible


def test_pack_then_unpack_sequence(sample_files):
    data = _find(sample_files, lambda pe: is_applicable(pe, ActionKind.PACK, 0))
    out = apply_sequence(parse_pe(data), ActionSequence.of([(ActionKind.PACK, 0), (ActionKind.UNPACK, 0)]))
    assert out.applied == (True, True)
    assert out.modified_bytes == 0


def test_modified_bytes_is_diff_count(sample_files):
    rng = np.random.default_rng(7)
    alphabet = Alphabet()
    for _, data in sample_files[:10]:
        seq = ActionSequence(tuple(alphabet.sample(rng) for _ in range(8)))
        out = apply_sequence(parse_pe(data), seq)
        assert out.modified_bytes == byte_diff_count(data, out.data)
        assert apply_sequence(parse_pe(data), seq).data == out.data


def test_every_gene_keeps_the_file_valid(sample_files):
    for _, data in sample_files[::10]:
        pe = parse_pe(data)
        for gene in Alphabet().all_genes():
            try:
                out = serialize_pe(apply_action(pe, *gene))
            except LayoutConflict:
                continue
            assert serialize_pe(parse_pe(out)) == out


# -- reversibility ---------------------------------------------------------------

def test_rename_back_restores_bytes(sample_files):
    def renamable(pe):
        return pe.sections[0].name in SECTION_NAME_POOL
    data = _find(sample_files, renamable)
    pe = parse_pe(data)
    original = SECTION_NAME_POOL.index(pe.sections[0].name)
    other = (original + 1) % len(SECTION_NAME_POOL)
    seq = ActionSequence.of([
        (ActionKind.RENAME_SECTION, other * NAME_SLOTS),
        (ActionKind.RENAME_SECTION, original * NAME_SLOTS),
    ])
    out = apply_sequence(pe, seq)
    assert out.applied == (True, True)
    assert out.data == data


def test_checksum_restore_after_overwrite(sample_files):
    def valid(pe):
        data = serialize_pe(pe)
        return pe.optional.checksum == compute_pe_checksum(data)
    data = _find(sample_files, valid)
    seq = ActionSequence.of([(ActionKind.SET_CHECKSUM, CHECKSUM_DEADBEEF), (ActionKind.SET_CHECKSUM, CHECKSUM_RECOMPUTED)])
    assert apply_sequence(parse_pe(data), seq).data == data


def _reachable(pe, genes) -> set[bytes]:
    out = set()
    for gene in genes:
        try:
            out.add(serialize_pe(apply_action(pe, *gene)))
        except LayoutConflict:
            pass
    return out


@pytest.mark.parametrize("kind", [ActionKind.REMOVE_SIGNATURE, ActionKind.STRIP_DEBUG])
def test_irreversible_kinds_admit_no_two_step_repair(kind):
    data = _small_signed_file()
    genes = Alphabet().all_genes()
    start = apply_action(parse_pe(data), kind, 0)
    assert serialize_pe(start) != data
    first = _reachable(start, genes)
    assert data not in first
    for mid in first:
        assert data not in _reachable(parse_pe(mid), genes)


# -- weights ---------------------------------------------------------------------

def test_uniform_weights():
    w = action_weights("uniform")
    assert all(abs(p - 1 / 11) < 1e-15 for p in w.values())
    assert abs(sum(w.values()) - 1.0) < 1e-12


def test_validation_weights():
    w = action_weights("validation")
    assert w[ActionKind.REMOVE_SIGNATURE] == VALIDATION_EPSILON == 0.02
    assert w[ActionKind.STRIP_DEBUG] == 0.02
    total = 0.0
    for p in w.values():
        total += p
    assert abs(total - 1.0) < 1e-12
    zero = Alphabet("validation").gene_probability(Gene(ActionKind.SET_CHECKSUM, CHECKSUM_ZERO))
    assert abs(zero - 0.02) < 1e-12


def test_unknown_weighting_mode():
    with pytest.raises(ValueError):
        action_weights("greedy")


def test_gene_probabilities_sum_to_one():
    for mode in ("uniform", "validation"):
        a = Alphabet(mode)
        assert abs(sum(a.gene_probability(g) for g in a.all_genes()) - 1.0) < 1e-12


# -- run-length transform ------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=600))
def test_rle_round_trip(blob):
    assert rle_decode(rle_encode(blob)) == blob


def test_rle_round_trip_on_long_runs():
    blob = b"\0" * 5000 + b"\xf7" * 300 + bytes(range(256))
    assert rle_decode(rle_encode(blob)) == blob
    assert len(rle_encode(b"\0" * 5000)) < 100
