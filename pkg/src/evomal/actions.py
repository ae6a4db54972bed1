"""Binary-modification actions over :class:`~evomal.pe.PeFile` values.

Ten structure-preserving modifications plus a no-op.  Every action takes
an index into a fixed, compiled-in parameter pool, so a genome is a
finite-alphabet string.  Actions never fail on inapplicable input: the
sequence applier records them as not applied and moves on.
"""

from __future__ import annotations

import enum
import itertools
import struct
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import LayoutConflict
from .motifs import DONOR_STRINGS
from .pe import (
    DIR_DEBUG,
    DIR_IMPORT,
    DIR_SECURITY,
    SECTION_HEADER_SIZE,
    PeFile,
    SectionHeader,
    align_up,
    byte_diff_count,
    compute_pe_checksum,
    pad_name,
    serialize_pe,
)


class ActionKind(enum.Enum):
    ADD_IMPORT = "AddImport"
    RENAME_SECTION = "RenameSection"
    APPEND_SECTION_SLACK = "AppendSectionSlack"
    NEW_ENTRY_POINT = "NewEntryPoint"
    REMOVE_SIGNATURE = "RemoveSignature"
    STRIP_DEBUG = "StripDebug"
    PACK = "Pack"
    UNPACK = "Unpack"
    SET_CHECKSUM = "SetChecksum"
    APPEND_OVERLAY = "AppendOverlay"
    NOOP = "NoOp"

    @property
    def reversible(self) -> bool:
        return self not in (ActionKind.REMOVE_SIGNATURE, ActionKind.STRIP_DEBUG)

    @property
    def pool_size(self) -> int:
        return _POOL_SIZES[self]


KINDS: tuple[ActionKind, ...] = tuple(ActionKind)

IMPORT_POOL: tuple[tuple[bytes, bytes], ...] = (
    (b"KERNEL32.dll", b"GetTickCount"),
    (b"USER32.dll", b"MessageBoxW"),
    (b"GDI32.dll", b"DeleteObject"),
    (b"COMCTL32.dll", b"InitCommonControlsEx"),
    (b"SHELL32.dll", b"DragFinish"),
    (b"OLE32.dll", b"CoUninitialize"),
    (b"VERSION.dll", b"GetFileVersionInfoW"),
    (b"ADVAPI32.dll", b"RegCloseKey"),
    (b"KERNEL32.dll", b"Sleep"),
    (b"USER32.dll", b"GetMessageW"),
    (b"KERNEL32.dll", b"GetModuleHandleW"),
    (b"SHLWAPI.dll", b"PathFileExistsW"),
    (b"CRYPT32.dll", b"CertOpenStore"),
    (b"WININET.dll", b"InternetOpenA"),
    (b"WS2_32.dll", b"WSAStartup"),
    (b"WINHTTP.dll", b"WinHttpOpen"),
)
SECTION_NAME_POOL: tuple[bytes, ...] = tuple(
    pad_name(n)
    for n in (
        b".text", b".rdata", b".data", b".rsrc", b".reloc", b".pdata", b".bss", b".idata",
        b".edata", b".tls", b".CRT", b".gfids", b"UPX0", b"UPX1", b".adata", b".vmp0",
    )
)
NAME_SLOTS = 8
SLACK_SIZES = (64, 256, 1024, 4096)
SLACK_SLOTS = 4
FILL_PATTERNS: tuple[bytes, ...] = DONOR_STRINGS
CHECKSUM_ZERO, CHECKSUM_RECOMPUTED, CHECKSUM_DEADBEEF, CHECKSUM_ONE = range(4)
OVERLAY_SIZES = (64, 256, 1024, 4096, 16384)
OVERLAY_PATTERN = b"".join(DONOR_STRINGS)

STUB_SECTION_NAME = pad_name(b".stub")
IMPORT_SECTION_NAME = pad_name(b".idata")
PACK_MAGIC = b"RLE\x01"
PACKED_FLAG = 0x00000008
RLE_ESCAPE = 0xF7

_POOL_SIZES = {
    ActionKind.ADD_IMPORT: len(IMPORT_POOL),
    ActionKind.RENAME_SECTION: len(SECTION_NAME_POOL) * NAME_SLOTS,
    ActionKind.APPEND_SECTION_SLACK: len(SLACK_SIZES) * len(FILL_PATTERNS) * SLACK_SLOTS,
    ActionKind.NEW_ENTRY_POINT: 1,
    ActionKind.REMOVE_SIGNATURE: 1,
    ActionKind.STRIP_DEBUG: 1,
    ActionKind.PACK: 1,
    ActionKind.UNPACK: 1,
    ActionKind.SET_CHECKSUM: 4,
    ActionKind.APPEND_OVERLAY: len(OVERLAY_SIZES),
    ActionKind.NOOP: 1,
}

VALIDATION_EPSILON = 0.02


class Gene(NamedTuple):
    kind: ActionKind
    param: int

    @property
    def irreversible(self) -> bool:
        return (not self.kind.reversible) or (
            self.kind is ActionKind.SET_CHECKSUM and self.param == CHECKSUM_ZERO
        )

    def describe(self) -> str:
        return f"{self.kind.value}({describe_param(self.kind, self.param)})"


@dataclass(frozen=True)
class ActionSequence:
    """Fixed-length genome of (action kind, parameter index) pairs."""

    genes: tuple[Gene, ...]

    def __post_init__(self):
        for g in self.genes:
            if not 0 <= g.param < g.kind.pool_size:
                raise ValueError(f"parameter {g.param} outside pool of {g.kind.value}")

    @classmethod
    def of(cls, pairs: Iterable[tuple[ActionKind, int]]) -> "ActionSequence":
        return cls(tuple(Gene(k, int(p)) for k, p in pairs))

    @classmethod
    def noop(cls, length: int) -> "ActionSequence":
        return cls(tuple(Gene(ActionKind.NOOP, 0) for _ in range(length)))

    def __len__(self) -> int:
        return len(self.genes)

    def __iter__(self):
        return iter(self.genes)

    def __getitem__(self, i):
        return self.genes[i]

    def describe(self) -> str:
        return " -> ".join(g.describe() for g in self.genes)


@dataclass(frozen=True)
class ApplyOutcome:
    result: PeFile
    data: bytes
    applied: tuple[bool, ...]
    modified_bytes: int
    hit_irreversible: bool


def describe_param(kind: ActionKind, param: int) -> str:
    if kind is ActionKind.ADD_IMPORT:
        dll, fn = IMPORT_POOL[param]
        return f"{dll.decode()}!{fn.decode()}"
    if kind is ActionKind.RENAME_SECTION:
        name = SECTION_NAME_POOL[param // NAME_SLOTS].rstrip(b"\0").decode()
        return f"slot={param % NAME_SLOTS},name={name}"
    if kind is ActionKind.APPEND_SECTION_SLACK:
        size, pattern, slot = _slack_params(param)
        return f"slot={slot},bytes={size},pattern={pattern}"
    if kind is ActionKind.SET_CHECKSUM:
        return ("0", "recomputed", "0xDEADBEEF", "1")[param]
    if kind is ActionKind.APPEND_OVERLAY:
        return str(OVERLAY_SIZES[param])
    return ""


def pool_manifest() -> dict:
    """The compiled-in parameter pools, for echoing into run directories."""
    return {
        "pool_sizes": {k.value: k.pool_size for k in KINDS},
        "import_pool": [[dll.decode(), fn.decode()] for dll, fn in IMPORT_POOL],
        "section_name_pool": [n.rstrip(b"\0").decode() for n in SECTION_NAME_POOL],
        "section_name_slots": NAME_SLOTS,
        "slack_sizes": list(SLACK_SIZES),
        "slack_slots": SLACK_SLOTS,
        "fill_patterns": [p.hex() for p in FILL_PATTERNS],
        "checksum_values": ["0", "recomputed", "0xDEADBEEF", "1"],
        "overlay_sizes": list(OVERLAY_SIZES),
        "validation_epsilon": VALIDATION_EPSILON,
    }


# -- weights ------------------------------------------------------------------

def action_weights(mode: str = "uniform") -> dict[ActionKind, float]:
    """Per-kind sampling probability.

    ``validation`` gives RemoveSignature, StripDebug and the zero variant of
    SetChecksum ``VALIDATION_EPSILON`` each and splits the rest evenly over
    the nine remaining entries; SetChecksum's weight is the sum of its zero
    variant and its share of the remainder.
    """
    if mode == "uniform":
        return {k: 1.0 / len(KINDS) for k in KINDS}
    if mode != "validation":
        raise ValueError(f"unknown weighting mode {mode!r}")
    share = (1.0 - 3 * VALIDATION_EPSILON) / (len(KINDS) - 2)
    weights = {k: share for k in KINDS}
    weights[ActionKind.REMOVE_SIGNATURE] = VALIDATION_EPSILON
    weights[ActionKind.STRIP_DEBUG] = VALIDATION_EPSILON
    weights[ActionKind.SET_CHECKSUM] = VALIDATION_EPSILON + share
    return weights


def param_weights(kind: ActionKind, mode: str = "uniform", limit: Optional[int] = None) -> np.ndarray:
    n = kind.pool_size if limit is None else min(limit, kind.pool_size)
    if mode == "validation" and kind is ActionKind.SET_CHECKSUM and n > 1:
        w = action_weights("validation")
        zero = VALIDATION_EPSILON / w[kind]
        p = np.full(n, (1.0 - zero) / (n - 1))
        p[CHECKSUM_ZERO] = zero
        return p
    return np.full(n, 1.0 / n)


class Alphabet:
    """The genes evolution may draw, with their sampling distribution.

    ``kinds`` restricts the action kinds (weights renormalised over them) and
    ``param_limits`` caps a kind's pool to its first entries.
    """

    def __init__(
        self,
        mode: str = "uniform",
        kinds: Optional[Sequence[ActionKind]] = None,
        param_limits: Optional[dict[ActionKind, int]] = None,
    ):
        self.mode = mode
        self.kinds = tuple(kinds) if kinds else KINDS
        self.param_limits = dict(param_limits or {})
        w = action_weights(mode)
        kind_p = np.array([w[k] for k in self.kinds])
        self.kind_p = kind_p / kind_p.sum()
        self.param_p = [param_weights(k, mode, self.param_limits.get(k)) for k in self.kinds]
        self._kind_cdf = np.cumsum(self.kind_p)
        self._param_cdf = [np.cumsum(p) for p in self.param_p]

    def sample(self, rng: np.random.Generator) -> Gene:
        u, v = rng.random(2)
        ki = min(int(np.searchsorted(self._kind_cdf, u, side="right")), len(self.kinds) - 1)
        cdf = self._param_cdf[ki]
        pi = min(int(np.searchsorted(cdf, v, side="right")), len(cdf) - 1)
        return Gene(self.kinds[ki], pi)

    def gene_probability(self, gene: Gene) -> float:
        ki = self.kinds.index(gene.kind)
        return float(self.kind_p[ki] * self.param_p[ki][gene.param])

    def all_genes(self) -> list[Gene]:
        return [Gene(k, p) for k, pp in zip(self.kinds, self.param_p) for p in range(len(pp))]

    def contains(self, gene: Gene) -> bool:
        if gene.kind not in self.kinds:
            return False
        return gene.param < len(self.param_p[self.kinds.index(gene.kind)])

    def enumerate_sequences(self, length: int) -> Iterable[ActionSequence]:
        for combo in itertools.product(self.all_genes(), repeat=length):
            yield ActionSequence(tuple(combo))


# -- run-length transform -------------------------------------------------------

def rle_encode(data: bytes) -> bytes:
    """Escape-coded RLE: runs of 4+ equal bytes, and any escape byte, become
    (ESC, count, value) triples with count <= 255; everything else is literal."""
    x = np.frombuffer(data, dtype=np.uint8)
    if x.size == 0:
        return b""
    starts = np.flatnonzero(np.concatenate(([True], x[1:] != x[:-1])))
    lengths = np.diff(np.append(starts, x.size))
    coded = np.flatnonzero((lengths >= 4) | (x[starts] == RLE_ESCAPE))
    out = bytearray()
    pos = 0
    for r in coded:
        start, n, v = int(starts[r]), int(lengths[r]), int(x[starts[r]])
        out += data[pos:start]
        while n:
            c = min(n, 255)
            out += bytes((RLE_ESCAPE, c, v))
            n -= c
        pos = start + int(lengths[r])
    out += data[pos:]
    return bytes(out)


def rle_decode(body: bytes) -> bytes:
    out = bytearray()
    pos = 0
    while True:
        i = body.find(RLE_ESCAPE, pos)
        if i < 0:
            out += body[pos:]
            return bytes(out)
        if i + 2 >= len(body):
            raise ValueError("truncated escape triple")
        out += body[pos:i]
        out += bytes((body[i + 2],)) * body[i + 1]
        pos = i + 3


def _pack_marker(raw_size: int, body_len: int, characteristics: int) -> bytes:
    return PACK_MAGIC + struct.pack("<III", raw_size, body_len, characteristics)


def _packed_info(sec: SectionHeader, data: bytes) -> Optional[tuple[int, int, int]]:
    if not sec.characteristics & PACKED_FLAG or data[:4] != PACK_MAGIC or len(data) < 16:
        return None
    raw_size, body_len, chars = struct.unpack_from("<III", data, 4)
    if raw_size > len(data) or 16 + body_len > raw_size:
        return None
    return raw_size, body_len, chars


def is_packed(pe: PeFile) -> bool:
    return any(_packed_info(s, d) for s, d in zip(pe.sections, pe.section_data))


# -- helpers ------------------------------------------------------------------

def _slack_params(param: int) -> tuple[int, int, int]:
    size = SLACK_SIZES[param % len(SLACK_SIZES)]
    pattern = (param // len(SLACK_SIZES)) % len(FILL_PATTERNS)
    slot = param // (len(SLACK_SIZES) * len(FILL_PATTERNS))
    return size, pattern, slot


def _cycle(pattern: bytes, n: int) -> bytes:
    return (pattern * (n // len(pattern) + 1))[:n]


def _first_raw_index(pe: PeFile) -> Optional[int]:
    for i, s in enumerate(pe.sections):
        if s.raw_size:
            return i
    return None


def _next_raw_index(pe: PeFile, index: int) -> Optional[int]:
    for j in range(index + 1, len(pe.sections)):
        if pe.sections[j].raw_size:
            return j
    return None


def _can_append_section(pe: PeFile) -> bool:
    if _first_raw_index(pe) is None or pe.header_room() < SECTION_HEADER_SIZE:
        return False
    pad = align_up(pe.sections_end, pe.file_alignment) - pe.sections_end
    cert = pe.certificate_range()
    return cert is None or cert[0] >= pad


def _next_section_va(pe: PeFile) -> int:
    end = max((s.virtual_address + max(s.virtual_size, s.raw_size) for s in pe.sections), default=0)
    return align_up(end, pe.optional.section_alignment)


def _append_section(pe: PeFile, name: bytes, payload: bytes, characteristics: int) -> tuple[PeFile, int]:
    """Add a section after the last raw section; returns (file, its RVA).

    The new header takes the first 40 bytes of header padding; the new raw
    data starts at the next file-alignment boundary and is followed by zero
    padding to the next boundary, so overlay content (and a certificate
    blob) keeps its alignment and simply moves later in the file.
    """
    if not _can_append_section(pe):
        raise LayoutConflict("no header room or certificate blocks a new section")
    fa = pe.file_alignment
    sa = pe.optional.section_alignment
    end = pe.sections_end
    offset = align_up(end, fa)
    pad = offset - end
    gap = pe.overlay[:pad].ljust(pad, b"\0")
    tail_pad = align_up(len(payload), fa) - len(payload)
    rest = pe.overlay[pad:]
    shift = len(payload) + tail_pad + max(0, pad - len(pe.overlay))

    va = _next_section_va(pe)
    header = SectionHeader(
        name=name,
        virtual_size=len(payload),
        virtual_address=va,
        raw_size=len(payload),
        raw_offset=offset,
        characteristics=characteristics,
    )
    first = _first_raw_index(pe)
    gaps = list(pe.gaps)
    gaps[first] = gaps[first][SECTION_HEADER_SIZE:]
    optional = replace(pe.optional, size_of_image=align_up(va + len(payload), sa))
    cert = pe.certificate_range()
    if cert is not None:
        off, size = optional.directory(DIR_SECURITY)
        optional = optional.with_directory(DIR_SECURITY, off + shift, size)
    coff = replace(pe.coff, section_count=pe.coff.section_count + 1)
    return (
        pe.replace(
            coff=coff,
            optional=optional,
            sections=pe.sections + (header,),
            gaps=tuple(gaps) + (gap,),
            section_data=pe.section_data + (payload,),
            overlay=b"\0" * tail_pad + rest,
        ),
        va,
    )


def _read_import_descriptors(pe: PeFile) -> Optional[list[bytes]]:
    rva, _ = pe.optional.directory(DIR_IMPORT)
    if rva == 0:
        return []
    loc = pe.rva_to_section(rva)
    if loc is None:
        return None
    idx, at = loc
    data = pe.section_data[idx]
    out = []
    while at + 20 <= len(data):
        desc = data[at:at + 20]
        if desc == b"\0" * 20:
            return out
        out.append(desc)
        at += 20
    return None


def _import_section(pe: PeFile, descriptors: list[bytes], dll: bytes, fn: bytes, base_rva: int) -> bytes:
    thunk_fmt = "<Q" if pe.optional.is_pe32_plus else "<I"
    thunk = struct.calcsize(thunk_fmt)
    desc_size = 20 * (len(descriptors) + 2)
    ilt_rva = base_rva + desc_size
    iat_rva = ilt_rva + 2 * thunk
    hint_rva = iat_rva + 2 * thunk
    hint = b"\0\0" + fn + b"\0"
    hint += b"\0" * (len(hint) % 2)
    dll_rva = hint_rva + len(hint)
    new_desc = struct.pack("<IIIII", ilt_rva, 0, 0, dll_rva, iat_rva)
    table = struct.pack(thunk_fmt, hint_rva) + b"\0" * thunk
    return b"".join(descriptors) + new_desc + b"\0" * 20 + table + table + hint + dll + b"\0"


def _patch_file_range(pe: PeFile, offset: int, blob: bytes) -> Optional[PeFile]:
    """Overwrite bytes at a file offset that lies inside one section's raw data."""
    for i, s in enumerate(pe.sections):
        if s.raw_size and s.raw_offset <= offset and offset + len(blob) <= s.raw_end:
            at = offset - s.raw_offset
            data = pe.section_data[i]
            new = data[:at] + blob + data[at + len(blob):]
            return pe.replace(section_data=pe.section_data[:i] + (new,) + pe.section_data[i + 1:])
    return None


def _debug_entries(pe: PeFile) -> Optional[list[tuple[int, int]]]:
    """(file offset, size) of the debug directory table and of each record it points to."""
    rva, size = pe.optional.directory(DIR_DEBUG)
    if size == 0:
        return None
    loc = pe.rva_to_section(rva)
    if loc is None:
        return None
    idx, at = loc
    data = pe.section_data[idx]
    if at + size > len(data):
        return None
    spans = [(pe.sections[idx].raw_offset + at, size)]
    for k in range(size // 28):
        (rec_size, _, rec_ptr) = struct.unpack_from("<III", data, at + 28 * k + 16)
        if rec_size and rec_ptr:
            spans.append((rec_ptr, rec_size))
    return spans


def _with_checksum(pe: PeFile, value: int) -> PeFile:
    return pe.replace(optional=replace(pe.optional, checksum=value))


def checksum_value(pe: PeFile, param: int) -> int:
    if param == CHECKSUM_RECOMPUTED:
        return compute_pe_checksum(serialize_pe(pe))
    return {CHECKSUM_ZERO: 0, CHECKSUM_DEADBEEF: 0xDEADBEEF, CHECKSUM_ONE: 1}[param]


def _set_section(pe: PeFile, i: int, header: SectionHeader, data: bytes) -> PeFile:
    return pe.replace(
        sections=pe.sections[:i] + (header,) + pe.sections[i + 1:],
        section_data=pe.section_data[:i] + (data,) + pe.section_data[i + 1:],
    )


# -- applicability and application -------------------------------------------

def is_applicable(pe: PeFile, kind: ActionKind, param: int) -> bool:
    """True iff :func:`apply_action` would change the file and keep it valid."""
    if not 0 <= param < kind.pool_size:
        raise ValueError(f"parameter {param} outside pool of {kind.value}")
    n = pe.section_count
    if kind is ActionKind.NOOP:
        return True
    if kind is ActionKind.ADD_IMPORT:
        return _can_append_section(pe) and not is_packed(pe) and _read_import_descriptors(pe) is not None
    if kind is ActionKind.RENAME_SECTION:
        return n > 0 and pe.sections[param % n].name != SECTION_NAME_POOL[param // NAME_SLOTS]
    if kind is ActionKind.APPEND_SECTION_SLACK:
        return n > 0 and pe.section_slack(_slack_params(param)[2] % n) > 0
    if kind is ActionKind.NEW_ENTRY_POINT:
        return _can_append_section(pe)
    if kind is ActionKind.REMOVE_SIGNATURE:
        return pe.certificate_range() is not None
    if kind is ActionKind.STRIP_DEBUG:
        return not is_packed(pe) and _debug_entries(pe) is not None
    if kind is ActionKind.PACK:
        return not is_packed(pe) and any(
            s.raw_size >= 16 and len(rle_encode(d)) + 16 <= s.raw_size
            for s, d in zip(pe.sections, pe.section_data)
        )
    if kind is ActionKind.UNPACK:
        return is_packed(pe)
    if kind is ActionKind.SET_CHECKSUM:
        return checksum_value(pe, param) != pe.optional.checksum
    if kind is ActionKind.APPEND_OVERLAY:
        return True
    raise ValueError(kind)


def _grows_section_table(pe: PeFile, kind: ActionKind) -> bool:
    if kind is ActionKind.NEW_ENTRY_POINT:
        return True
    return kind is ActionKind.ADD_IMPORT and not is_packed(pe) and _read_import_descriptors(pe) is not None


def apply_action(pe: PeFile, kind: ActionKind, param: int) -> PeFile:
    """Apply one action; an inapplicable action returns ``pe`` unchanged.

    Raises :class:`LayoutConflict` when an action that adds a section finds
    no header room for the grown section table.
    """
    if _grows_section_table(pe, kind) and not _can_append_section(pe):
        raise LayoutConflict(f"{kind.value}: section table cannot grow")
    if not is_applicable(pe, kind, param):
        return pe
    return _APPLY[kind](pe, param)


def _add_import(pe: PeFile, param: int) -> PeFile:
    dll, fn = IMPORT_POOL[param]
    descriptors = _read_import_descriptors(pe)
    payload = _import_section(pe, descriptors, dll, fn, _next_section_va(pe))
    out, va = _append_section(pe, IMPORT_SECTION_NAME, payload, 0xC0000040)
    optional = out.optional.with_directory(DIR_IMPORT, va, 20 * (len(descriptors) + 2))
    return out.replace(optional=optional)


def _rename_section(pe: PeFile, param: int) -> PeFile:
    i = param % pe.section_count
    header = replace(pe.sections[i], name=SECTION_NAME_POOL[param // NAME_SLOTS])
    return _set_section(pe, i, header, pe.section_data[i])


def _append_slack(pe: PeFile, param: int) -> PeFile:
    size, pattern, slot = _slack_params(param)
    i = slot % pe.section_count
    n = min(size, pe.section_slack(i))
    sec = pe.sections[i]
    header = replace(sec, raw_size=sec.raw_size + n)
    out = _set_section(pe, i, header, pe.section_data[i] + _cycle(FILL_PATTERNS[pattern], n))
    j = _next_raw_index(pe, i)
    if j is None:
        return out.replace(overlay=pe.overlay[n:])
    gaps = list(pe.gaps)
    gaps[j] = gaps[j][n:]
    return out.replace(gaps=tuple(gaps))


def _new_entry_point(pe: PeFile, param: int) -> PeFile:
    old = (pe.optional.image_base + pe.optional.entry_point_rva) & 0xFFFFFFFF
    # push <old entry>; ret; int3 padding
    stub = b"\x68" + struct.pack("<I", old) + b"\xc3" + b"\xcc" * 10
    out, va = _append_section(pe, STUB_SECTION_NAME, stub, 0x60000020)
    return out.replace(optional=replace(out.optional, entry_point_rva=va))


def _remove_signature(pe: PeFile, param: int) -> PeFile:
    start, end = pe.certificate_range()
    optional = pe.optional.with_directory(DIR_SECURITY, 0, 0)
    return pe.replace(optional=optional, overlay=pe.overlay[:start] + pe.overlay[end:])


def _strip_debug(pe: PeFile, param: int) -> PeFile:
    out = pe
    for offset, size in _debug_entries(pe):
        patched = _patch_file_range(out, offset, b"\0" * size)
        if patched is not None:
            out = patched
    return out.replace(optional=out.optional.with_directory(DIR_DEBUG, 0, 0))


def _pack(pe: PeFile, param: int) -> PeFile:
    out = pe
    for i, (sec, data) in enumerate(zip(pe.sections, pe.section_data)):
        if sec.raw_size < 16:
            continue
        body = rle_encode(data)
        if len(body) + 16 > sec.raw_size:
            continue
        packed = (_pack_marker(sec.raw_size, len(body), sec.characteristics) + body).ljust(sec.raw_size, b"\0")
        header = replace(sec, characteristics=sec.characteristics | PACKED_FLAG)
        out = _set_section(out, i, header, packed)
    return out


def _unpack(pe: PeFile, param: int) -> PeFile:
    out = pe
    for i, (sec, data) in enumerate(zip(pe.sections, pe.section_data)):
        info = _packed_info(sec, data)
        if info is None:
            continue
        raw_size, body_len, chars = info
        restored = rle_decode(data[16:16 + body_len])
        if len(restored) != raw_size:
            continue
        header = replace(sec, characteristics=chars)
        # bytes appended after packing (slack fills) stay behind the restored data
        out = _set_section(out, i, header, restored + data[raw_size:])
    return out


def _set_checksum(pe: PeFile, param: int) -> PeFile:
    return _with_checksum(pe, checksum_value(pe, param))


def _append_overlay(pe: PeFile, param: int) -> PeFile:
    return pe.replace(overlay=pe.overlay + _cycle(OVERLAY_PATTERN, OVERLAY_SIZES[param]))


_APPLY = {
    ActionKind.ADD_IMPORT: _add_import,
    ActionKind.RENAME_SECTION: _rename_section,
    ActionKind.APPEND_SECTION_SLACK: _append_slack,
    ActionKind.NEW_ENTRY_POINT: _new_entry_point,
    ActionKind.REMOVE_SIGNATURE: _remove_signature,
    ActionKind.STRIP_DEBUG: _strip_debug,
    ActionKind.PACK: _pack,
    ActionKind.UNPACK: _unpack,
    ActionKind.SET_CHECKSUM: _set_checksum,
    ActionKind.APPEND_OVERLAY: _append_overlay,
    ActionKind.NOOP: lambda pe, param: pe,
}


def apply_sequence(
    pe: PeFile, seq: ActionSequence | Sequence[Gene], original: Optional[bytes] = None
) -> ApplyOutcome:
    """Apply genes left to right, skipping inapplicable ones.

    ``original`` may pass the already-serialized input to save one
    serialization.  ``LayoutConflict`` propagates.
    """
    if original is None:
        original = serialize_pe(pe)
    applied = []
    irreversible = False
    current = pe
    for gene in seq:
        if _grows_section_table(current, gene.kind) and not _can_append_section(current):
            raise LayoutConflict(f"{gene.kind.value}: section table cannot grow")
        if not is_applicable(current, gene.kind, gene.param):
            applied.append(False)
            continue
        current = _APPLY[gene.kind](current, gene.param)
        applied.append(gene.kind is not ActionKind.NOOP)
        irreversible = irreversible or gene.irreversible
    data = serialize_pe(current)
    return ApplyOutcome(
        result=current,
        data=data,
        applied=tuple(applied),
        modified_bytes=byte_diff_count(original, data),
        hit_irreversible=irreversible,
    )
