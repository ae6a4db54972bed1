"""Deterministic synthetic PE corpus with planted class signal.

Both classes share one noise distribution and one neutral motif pool.
``signal_strength`` is the probability that any class-dependent choice
(payload motif, section name, signature, debug info, checksum,
section permissions) is drawn from the class-specific distribution
instead of the shared one, so ``signal_strength=0`` makes the two
classes indistinguishable.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .actions import ActionKind, apply_action
from .errors import InsufficientSamples
from .motifs import BENIGN_MOTIFS, MALWARE_MOTIFS, SHARED_MOTIFS
from .pe import (
    DIR_DEBUG,
    DIR_IMPORT,
    DIR_SECURITY,
    PE32_MAGIC,
    PE32PLUS_MAGIC,
    SECTION_HEADER_SIZE,
    align_up,
    compute_pe_checksum,
    pad_name,
    parse_pe,
    serialize_pe,
)

MALWARE = "malware"
BENIGN = "benign"
SPLITS = ("train", "validation", "holdout")

FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
E_LFANEW = 0x80

DOS_STUB = (
    b"\x0e\x1f\xba\x0e\x00\xb4\x09\xcd\x21\xb8\x01\x4c\xcd\x21"
    b"This program cannot be run in DOS mode.\r\r\n$"
).ljust(E_LFANEW - 64, b"\0")

SCN_CODE = 0x60000020
SCN_RDATA = 0x40000040
SCN_DATA = 0xC0000040
SCN_RWX = 0xE0000060

BENIGN_NAMES = (b".text", b".rdata", b".data", b".pdata", b".rsrc", b".reloc")
MALWARE_NAMES = (b"UPX0", b"UPX1", b".vmp0", b".enigma1", b".packed", b".aspack", b".petite", b"CODE")
SHARED_NAMES = (b".text", b".code", b".data", b".rdata", b"CODE", b"DATA", b".rsrc", b".tls")

BENIGN_IMPORTS = {
    b"KERNEL32.dll": (b"GetSystemTimeAsFileTime", b"GetModuleHandleW", b"HeapAlloc"),
    b"USER32.dll": (b"GetMessageW", b"DispatchMessageW", b"LoadIconW"),
    b"COMCTL32.dll": (b"InitCommonControlsEx",),
}
MALWARE_IMPORTS = {
    b"KERNEL32.dll": (b"VirtualAllocEx", b"WriteProcessMemory", b"CreateRemoteThread"),
    b"ADVAPI32.dll": (b"AdjustTokenPrivileges", b"OpenProcessToken"),
    b"WS2_32.dll": (b"connect", b"send", b"recv"),
}
SHARED_IMPORTS = {
    b"KERNEL32.dll": (b"GetProcAddress", b"LoadLibraryA", b"ExitProcess", b"CloseHandle"),
    b"MSVCRT.dll": (b"malloc", b"free", b"memcpy"),
}

_MOTIF_SLOT = 48
_MOTIF_DENSITY = 0.5

# fixed code-like byte distribution shared by both classes
_NOISE_P = (lambda w: w / w.sum())(
    np.random.default_rng(0x5EED).permutation(1.0 / np.arange(1, 257) ** 0.8)
)


@dataclass(frozen=True)
class CorpusConfig:
    n_malware: int = 400
    n_benign: int = 400
    split_ratio: float = 0.9
    holdout_malware: int = 100
    seed: int = 0
    sections_range: tuple[int, int] = (2, 6)
    size_range: tuple[int, int] = (4096, 65536)
    signal_strength: float = 0.9

    def __post_init__(self):
        if self.n_malware <= 0 or self.n_benign <= 0:
            raise ValueError("sample counts must be positive")
        if not 0 <= self.holdout_malware < self.n_malware:
            raise ValueError("holdout_malware must be below n_malware")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if not 0 <= self.signal_strength <= 1:
            raise ValueError("signal_strength must lie in [0, 1]")
        lo, hi = self.sections_range
        if not 1 <= lo <= hi:
            raise ValueError("bad sections_range")
        if not 1024 <= self.size_range[0] <= self.size_range[1]:
            raise ValueError("bad size_range")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str
    digest: str


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]
    root: Optional[Path] = None

    def select(self, split: Optional[str] = None, label: Optional[str] = None) -> list[ManifestEntry]:
        return [
            e for e in self.entries
            if (split is None or e.split == split) and (label is None or e.label == label)
        ]

    def load(self, split: Optional[str] = None, label: Optional[str] = None) -> list[tuple[bytes, int]]:
        """(bytes, label) pairs, label 1 for benign and 0 for malware."""
        if self.root is None:
            raise ValueError("manifest is not bound to a corpus directory")
        return [
            ((self.root / e.path).read_bytes(), int(e.label == BENIGN))
            for e in self.select(split, label)
        ]

    def write(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "label", "split", "digest"])
            for e in self.entries:
                writer.writerow([e.path, e.label, e.split, e.digest])

    @classmethod
    def read(cls, path: Path) -> "CorpusManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        entries = tuple(ManifestEntry(r["path"], r["label"], r["split"], r["digest"]) for r in rows)
        return cls(entries, root=path.parent)

    def verify(self) -> list[str]:
        """Paths whose on-disk digest no longer matches the manifest."""
        return [
            e.path for e in self.entries
            if hashlib.sha256((self.root / e.path).read_bytes()).hexdigest() != e.digest
        ]


# -- file synthesis ---------------------------------------------------------

@dataclass
class _Section:
    name: bytes
    payload: bytearray
    characteristics: int
    extra_virtual: int = 0


@dataclass
class BuildPlan:
    """Everything that determines one synthetic file; kept for inspection."""

    label: str
    pe32_plus: bool
    sections: list = field(default_factory=list)
    header_slots: int = 2
    imports: dict = field(default_factory=dict)
    debug: bool = False
    signature: bool = False
    checksum_mode: str = "valid"
    overlay_extra: int = 0
    packed: bool = False


def _pick(rng, strength, own, shared):
    return own if rng.random() < strength else shared


def _noise(rng, n: int, zero_bias: float = 0.0) -> bytearray:
    buf = rng.choice(256, size=n, p=_NOISE_P).astype(np.uint8)
    if zero_bias:
        buf[rng.random(n) < zero_bias] = 0
    return bytearray(buf.tobytes())


def _add_runs(rng, buf: bytearray, value: int, every: int, lengths: tuple[int, int]) -> None:
    """Function padding (int3 runs) or zero-filled data blocks."""
    for start in range(0, len(buf), every):
        n = int(rng.integers(*lengths))
        at = start + int(rng.integers(0, every))
        buf[at:at + n] = bytes([value]) * len(buf[at:at + n])


def _plant_motifs(rng, buf: bytearray, pool: tuple, strength: float) -> None:
    for start in range(0, len(buf) - _MOTIF_SLOT + 1, _MOTIF_SLOT):
        if rng.random() >= _MOTIF_DENSITY:
            continue
        motifs = pool if rng.random() < strength else SHARED_MOTIFS
        motif = motifs[rng.integers(len(motifs))]
        at = start + int(rng.integers(0, _MOTIF_SLOT - len(motif) + 1)) if len(motif) < _MOTIF_SLOT else start
        buf[at:at + len(motif)] = motif[: len(buf) - at]


def _import_blob(imports: dict, base_rva: int, pe32_plus: bool) -> bytes:
    """Descriptor array, lookup/address tables, hint/name entries and DLL names."""
    thunk = 8 if pe32_plus else 4
    dlls = list(imports.items())
    desc_size = 20 * (len(dlls) + 1)
    tables_size = sum((len(funcs) + 1) * thunk * 2 for _, funcs in dlls)
    names = bytearray()
    name_rva = {}
    for dll, funcs in dlls:
        for fn in funcs:
            name_rva[fn] = len(names)
            entry = b"\0\0" + fn + b"\0"
            names += entry + (b"\0" if len(entry) % 2 else b"")
        name_rva[dll] = len(names)
        names += dll + b"\0"
    names_base = base_rva + desc_size + tables_size
    descriptors = bytearray()
    tables = bytearray()
    fmt = "<Q" if pe32_plus else "<I"
    for dll, funcs in dlls:
        ilt_rva = base_rva + desc_size + len(tables)
        ilt = b"".join(struct.pack(fmt, names_base + name_rva[fn]) for fn in funcs) + b"\0" * thunk
        iat_rva = ilt_rva + len(ilt)
        tables += ilt + ilt
        descriptors += struct.pack("<IIIII", ilt_rva, 0, 0, names_base + name_rva[dll], iat_rva)
    descriptors += b"\0" * 20
    return bytes(descriptors + tables + names)


def _debug_blob(rng, rva: int, file_offset: int) -> bytes:
    """One CodeView IMAGE_DEBUG_DIRECTORY entry followed by its RSDS record."""
    pdb = b"C:\\build\\release\\app%d.pdb\0" % int(rng.integers(1000))
    record = b"RSDS" + rng.bytes(16) + struct.pack("<I", 1) + pdb
    entry = struct.pack(
        "<IIHHIIII", 0, int(rng.integers(2**31)), 0, 0, 2, len(record), rva + 28, file_offset + 28
    )
    return entry + record


def make_plan(label: str, index: int, cfg: CorpusConfig) -> tuple[BuildPlan, np.random.Generator]:
    rng = np.random.default_rng([cfg.seed, int(label == MALWARE), index])
    s = cfg.signal_strength
    malware = label == MALWARE
    own_names = MALWARE_NAMES if malware else BENIGN_NAMES
    plan = BuildPlan(label=label, pe32_plus=bool(rng.random() < 0.25))
    n_sec = int(rng.integers(cfg.sections_range[0], cfg.sections_range[1] + 1))
    plan.header_slots = int(rng.integers(2, 5))

    total = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
    # small first section keeps code and its slack inside the detector window
    first = int(rng.integers(700, 2400))
    rest = max(total - first - 1024, 600 * max(n_sec - 1, 1))
    cuts = np.sort(rng.integers(0, rest, size=n_sec - 2)) if n_sec > 2 else np.array([], dtype=int)
    if n_sec == 1:
        sizes = [first + rest]
    else:
        sizes = [first] + [int(x) for x in np.diff(np.concatenate(([0], cuts, [rest])))]
    sizes = [max(sz, 600) for sz in sizes]

    class_pool = MALWARE_MOTIFS if malware else BENIGN_MOTIFS
    for i, size in enumerate(sizes):
        names = _pick(rng, s, own_names, SHARED_NAMES)
        name = names[rng.integers(len(names))]
        if i == 0:
            rwx = rng.random() < _pick(rng, s, 0.7 if malware else 0.05, 0.3)
            chars = SCN_RWX if rwx else SCN_CODE
            payload = _noise(rng, size)
            _add_runs(rng, payload, 0xCC, every=160, lengths=(4, 16))
        else:
            chars = (SCN_RDATA, SCN_DATA)[i % 2]
            payload = _noise(rng, size, zero_bias=0.15)
            _add_runs(rng, payload, 0x00, every=1024, lengths=(32, 256))
        _plant_motifs(rng, payload, class_pool, s)
        plan.sections.append(_Section(pad_name(name), payload, chars, int(rng.integers(0, 0x800))))

    imports = {}
    for source in (_pick(rng, s, MALWARE_IMPORTS if malware else BENIGN_IMPORTS, SHARED_IMPORTS), SHARED_IMPORTS):
        for dll, funcs in source.items():
            have = imports.setdefault(dll, [])
            for fn in funcs:
                if fn not in have and rng.random() < 0.8:
                    have.append(fn)
    plan.imports = {dll: tuple(funcs) for dll, funcs in imports.items() if funcs}

    plan.debug = bool(rng.random() < _pick(rng, s, 0.6 if malware else 0.9, 0.75))
    plan.signature = bool(rng.random() < _pick(rng, s, 0.6 if malware else 0.9, 0.75))
    valid = rng.random() < _pick(rng, s, 0.15 if malware else 0.9, 0.5)
    plan.checksum_mode = "valid" if valid else ("zero" if rng.random() < 0.5 else "stale")
    plan.overlay_extra = int(rng.integers(64, 2048)) if rng.random() < 0.2 else 0
    plan.packed = bool(rng.random() < _pick(rng, s, 0.35 if malware else 0.03, 0.15))
    return plan, rng


def assemble(plan: BuildPlan, rng: np.random.Generator) -> bytes:
    """Lay out a plan as PE bytes: headers, aligned sections, overlay, checksum."""
    n = len(plan.sections)
    magic = PE32PLUS_MAGIC if plan.pe32_plus else PE32_MAGIC
    opt_size = (112 if plan.pe32_plus else 96) + 16 * 8
    table_off = E_LFANEW + 24 + opt_size
    size_of_headers = align_up(table_off + SECTION_HEADER_SIZE * (n + plan.header_slots), FILE_ALIGNMENT)

    # the data section closest to the middle hosts import and debug tables
    host = 1 if n > 1 else 0
    sections = plan.sections
    extra = _import_blob(plan.imports, 0, plan.pe32_plus)
    reserve = len(extra) + (160 if plan.debug else 0) + 16
    if len(sections[host].payload) < reserve + 64:
        sections[host].payload += _noise(rng, reserve + 64 - len(sections[host].payload))

    raw_offsets, vas = [], []
    cursor, va = size_of_headers, align_up(size_of_headers, SECTION_ALIGNMENT)
    for sec in sections:
        raw_offsets.append(cursor)
        vas.append(va)
        cursor = align_up(cursor + len(sec.payload), FILE_ALIGNMENT)
        va += align_up(len(sec.payload) + sec.extra_virtual, SECTION_ALIGNMENT)
    size_of_image = va

    dirs = [(0, 0)] * 16
    host_payload = sections[host].payload
    imp_at = 16
    imp_rva = vas[host] + imp_at
    imp = _import_blob(plan.imports, imp_rva, plan.pe32_plus)
    host_payload[imp_at:imp_at + len(imp)] = imp
    dirs[DIR_IMPORT] = (imp_rva, 20 * (len(plan.imports) + 1))
    if plan.debug:
        dbg_at = align_up(imp_at + len(imp), 4)
        blob = _debug_blob(rng, vas[host] + dbg_at, raw_offsets[host] + dbg_at)
        host_payload[dbg_at:dbg_at + len(blob)] = blob
        dirs[DIR_DEBUG] = (vas[host] + dbg_at, 28)

    body = bytearray()
    body += b"MZ" + b"\x90\x00\x03\x00\x00\x00\x04\x00\x00\x00\xff\xff\x00\x00\xb8" + b"\0" * 7 + b"\x40"
    body = body.ljust(0x3C, b"\0") + struct.pack("<I", E_LFANEW) + DOS_STUB
    machine = 0x8664 if plan.pe32_plus else 0x14C
    characteristics = 0x22 if plan.pe32_plus else 0x102
    body += b"PE\0\0" + struct.pack(
        "<HHIIIHH", machine, n, int(rng.integers(0x50000000, 0x60000000)), 0, 0, opt_size, characteristics
    )

    entry = vas[0] + int(rng.integers(0, 64))
    image_base = 0x140000000 if plan.pe32_plus else 0x400000
    opt = bytearray(112 if plan.pe32_plus else 96)
    code_size = align_up(len(sections[0].payload), FILE_ALIGNMENT)
    struct.pack_into("<HBBIII", opt, 0, magic, 14, 0, code_size, 0, 0)
    struct.pack_into("<II", opt, 16, entry, vas[0])
    if plan.pe32_plus:
        struct.pack_into("<Q", opt, 24, image_base)
    else:
        struct.pack_into("<II", opt, 24, vas[min(1, n - 1)], image_base)
    struct.pack_into("<IIHHHHHHI", opt, 32, SECTION_ALIGNMENT, FILE_ALIGNMENT, 6, 0, 0, 0, 6, 0, 0)
    struct.pack_into("<IIIHH", opt, 56, size_of_image, size_of_headers, 0, 2, 0x8140)
    if plan.pe32_plus:
        struct.pack_into("<QQQQII", opt, 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
    else:
        struct.pack_into("<IIIIII", opt, 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
    header_opt_at = len(body)
    body += opt + b"\0" * (16 * 8)

    for sec, raw, va_ in zip(sections, raw_offsets, vas):
        body += struct.pack(
            "<8sIIIIIIHHI", sec.name, len(sec.payload) + sec.extra_virtual, va_,
            len(sec.payload), raw, 0, 0, 0, 0, sec.characteristics,
        )
    body = body.ljust(size_of_headers, b"\0")
    for sec, raw in zip(sections, raw_offsets):
        body = body.ljust(raw, b"\0")
        body += sec.payload
    # the file ends at the last section's raw data unless something follows it
    if plan.signature or plan.overlay_extra:
        body = body.ljust(align_up(len(body), FILE_ALIGNMENT), b"\0")

    if plan.signature:
        cert_len = int(rng.integers(600, 1600)) & ~7
        cert = struct.pack("<IHH", cert_len, 0x0200, 0x0002) + b"\x30\x82" + rng.bytes(cert_len - 10)
        dirs[DIR_SECURITY] = (len(body), cert_len)
        body += cert
    if plan.overlay_extra:
        body += rng.bytes(plan.overlay_extra)

    dir_at = header_opt_at + len(opt)
    for i, (rva, size) in enumerate(dirs):
        struct.pack_into("<II", body, dir_at + 8 * i, rva, size)

    checksum_at = header_opt_at + 64
    if plan.checksum_mode == "valid":
        struct.pack_into("<I", body, checksum_at, compute_pe_checksum(bytes(body)))
    elif plan.checksum_mode == "stale":
        struct.pack_into("<I", body, checksum_at, int(rng.integers(0x10000, 0x400000)))
    return bytes(body)


def generate_file(label: str, index: int, cfg: CorpusConfig) -> bytes:
    plan, rng = make_plan(label, index, cfg)
    data = assemble(plan, rng)
    if not plan.packed:
        return data
    # packed samples go through the same in-place packer the attacker uses
    pe = apply_action(parse_pe(data), ActionKind.PACK, 0)
    out = bytearray(serialize_pe(pe))
    if plan.checksum_mode == "valid":
        struct.pack_into("<I", out, pe.checksum_offset, 0)
        struct.pack_into("<I", out, pe.checksum_offset, compute_pe_checksum(bytes(out)))
    return bytes(out)


def split_corpus(
    manifest: CorpusManifest, ratio: float, holdout_malware: int, seed: int
) -> CorpusManifest:
    """Holdout malware first, then a per-class train/validation split."""
    rng = np.random.default_rng([seed, 0x5B117])
    malware = [e for e in manifest.entries if e.label == MALWARE]
    benign = [e for e in manifest.entries if e.label == BENIGN]
    if holdout_malware >= len(malware):
        raise InsufficientSamples(
            f"{len(malware)} malware cannot supply {holdout_malware} holdout samples"
        )
    assigned = {}
    order = rng.permutation(len(malware))
    for rank, i in enumerate(order):
        if rank < holdout_malware:
            assigned[malware[i].path] = "holdout"
    for group in (
        [malware[i] for i in order[holdout_malware:]],
        [benign[i] for i in rng.permutation(len(benign))],
    ):
        n_train = int(round(len(group) * ratio))
        for rank, e in enumerate(group):
            assigned[e.path] = "train" if rank < n_train else "validation"
    return replace(
        manifest,
        entries=tuple(replace(e, split=assigned[e.path]) for e in manifest.entries),
    )


def generate_corpus(cfg: CorpusConfig, out_dir: Path) -> CorpusManifest:
    """Write every file plus ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    entries = []
    for label, count in ((MALWARE, cfg.n_malware), (BENIGN, cfg.n_benign)):
        (out_dir / label).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            data = generate_file(label, i, cfg)
            rel = f"{label}/{label}_{i:05d}.exe"
            (out_dir / rel).write_bytes(data)
            entries.append(ManifestEntry(rel, label, "train", hashlib.sha256(data).hexdigest()))
    manifest = split_corpus(
        CorpusManifest(tuple(entries), root=out_dir), cfg.split_ratio, cfg.holdout_malware, cfg.seed
    )
    manifest.write(out_dir / "manifest.csv")
    return manifest


def iter_corpus(cfg: CorpusConfig) -> Iterable[tuple[str, int, bytes]]:
    """(label, index, bytes) for every file, without touching disk."""
    for label, count in ((MALWARE, cfg.n_malware), (BENIGN, cfg.n_benign)):
        for i in range(count):
            yield label, i, generate_file(label, i, cfg)
