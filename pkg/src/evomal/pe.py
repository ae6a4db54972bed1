"""Lossless model of the parts of a PE file the action space touches.

Every byte of an accepted file is owned by exactly one field of
:class:`PeFile`: the DOS header, the DOS stub, the NT headers, the
section table, the gap preceding each section's raw data, the section
payloads and the overlay.  ``serialize_pe(parse_pe(b)) == b`` holds for
every ``b`` that :func:`parse_pe` accepts.

Layout reference: https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import LayoutConflict, MalformedPe

PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

DOS_HEADER_SIZE = 64
PE_SIGNATURE = b"PE\0\0"
COFF_FORMAT = "<HHIIIHH"
COFF_SIZE = struct.calcsize(COFF_FORMAT)
SECTION_FORMAT = "<8sIIIIIIHHI"
SECTION_HEADER_SIZE = struct.calcsize(SECTION_FORMAT)

DIR_IMPORT = 1
DIR_SECURITY = 4
DIR_DEBUG = 6

# offsets inside the optional header
_OPT_ENTRY_POINT = 16
_OPT_SECTION_ALIGNMENT = 32
_OPT_FILE_ALIGNMENT = 36
_OPT_SIZE_OF_IMAGE = 56
_OPT_SIZE_OF_HEADERS = 60
_OPT_CHECKSUM = 64


def align_up(value: int, alignment: int) -> int:
    if alignment <= 0:
        return value
    return (value + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    section_count: int
    timestamp: int
    symbol_table_offset: int
    symbol_count: int
    optional_header_size: int
    characteristics: int

    @classmethod
    def unpack(cls, data: bytes, offset: int) -> "CoffHeader":
        return cls(*struct.unpack_from(COFF_FORMAT, data, offset))

    def pack(self) -> bytes:
        return struct.pack(
            COFF_FORMAT,
            self.machine,
            self.section_count,
            self.timestamp,
            self.symbol_table_offset,
            self.symbol_count,
            self.optional_header_size,
            self.characteristics,
        )


@dataclass(frozen=True)
class OptionalHeader:
    """Interpreted optional-header fields over the raw header bytes.

    ``fixed`` holds the standard and Windows-specific fields verbatim; the
    interpreted attributes are written back over it on serialization, so
    they are authoritative.  ``tail`` is whatever follows the data
    directory table inside ``SizeOfOptionalHeader``.
    """

    magic: int
    entry_point_rva: int
    image_base: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    data_directories: tuple[tuple[int, int], ...]
    fixed: bytes
    tail: bytes = b""

    @property
    def is_pe32_plus(self) -> bool:
        return self.magic == PE32PLUS_MAGIC

    @property
    def data_directory_count(self) -> int:
        return len(self.data_directories)

    @staticmethod
    def fixed_size(magic: int) -> int:
        return 112 if magic == PE32PLUS_MAGIC else 96

    def directory(self, index: int) -> tuple[int, int]:
        if index < len(self.data_directories):
            return self.data_directories[index]
        return (0, 0)

    def with_directory(self, index: int, rva: int, size: int) -> "OptionalHeader":
        if index >= len(self.data_directories):
            raise LayoutConflict(f"data directory {index} not present")
        dirs = list(self.data_directories)
        dirs[index] = (rva, size)
        return replace(self, data_directories=tuple(dirs))

    @classmethod
    def unpack(cls, data: bytes, offset: int, size: int) -> "OptionalHeader":
        if size < 2:
            raise MalformedPe("optional header too small")
        (magic,) = struct.unpack_from("<H", data, offset)
        if magic not in (PE32_MAGIC, PE32PLUS_MAGIC):
            raise MalformedPe(f"unknown optional header magic {magic:#x}")
        fixed_len = cls.fixed_size(magic)
        if size < fixed_len:
            raise MalformedPe("optional header shorter than its fixed fields")
        fixed = bytes(data[offset:offset + fixed_len])
        if magic == PE32PLUS_MAGIC:
            (image_base,) = struct.unpack_from("<Q", fixed, 24)
        else:
            (image_base,) = struct.unpack_from("<I", fixed, 28)
        (count,) = struct.unpack_from("<I", fixed, fixed_len - 4)
        if fixed_len + 8 * count > size:
            raise MalformedPe("data directory table overruns optional header")
        dirs = tuple(
            struct.unpack_from("<II", data, offset + fixed_len + 8 * i) for i in range(count)
        )
        tail = bytes(data[offset + fixed_len + 8 * count:offset + size])
        return cls(
            magic=magic,
            entry_point_rva=struct.unpack_from("<I", fixed, _OPT_ENTRY_POINT)[0],
            image_base=image_base,
            section_alignment=struct.unpack_from("<I", fixed, _OPT_SECTION_ALIGNMENT)[0],
            file_alignment=struct.unpack_from("<I", fixed, _OPT_FILE_ALIGNMENT)[0],
            size_of_image=struct.unpack_from("<I", fixed, _OPT_SIZE_OF_IMAGE)[0],
            size_of_headers=struct.unpack_from("<I", fixed, _OPT_SIZE_OF_HEADERS)[0],
            checksum=struct.unpack_from("<I", fixed, _OPT_CHECKSUM)[0],
            data_directories=dirs,
            fixed=fixed,
            tail=tail,
        )

    def pack(self) -> bytes:
        buf = bytearray(self.fixed)
        struct.pack_into("<H", buf, 0, self.magic)
        struct.pack_into("<I", buf, _OPT_ENTRY_POINT, self.entry_point_rva)
        if self.is_pe32_plus:
            struct.pack_into("<Q", buf, 24, self.image_base)
        else:
            struct.pack_into("<I", buf, 28, self.image_base)
        struct.pack_into("<I", buf, _OPT_SECTION_ALIGNMENT, self.section_alignment)
        struct.pack_into("<I", buf, _OPT_FILE_ALIGNMENT, self.file_alignment)
        struct.pack_into("<I", buf, _OPT_SIZE_OF_IMAGE, self.size_of_image)
        struct.pack_into("<I", buf, _OPT_SIZE_OF_HEADERS, self.size_of_headers)
        struct.pack_into("<I", buf, _OPT_CHECKSUM, self.checksum)
        struct.pack_into("<I", buf, len(buf) - 4, len(self.data_directories))
        for rva, size in self.data_directories:
            buf += struct.pack("<II", rva, size)
        return bytes(buf) + self.tail


@dataclass(frozen=True)
class SectionHeader:
    name: bytes
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    relocations_offset: int = 0
    linenumbers_offset: int = 0
    relocation_count: int = 0
    linenumber_count: int = 0
    characteristics: int = 0

    def __post_init__(self):
        if len(self.name) != 8:
            raise ValueError("section name must be exactly 8 bytes")

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size

    @classmethod
    def unpack(cls, data: bytes, offset: int) -> "SectionHeader":
        return cls(*struct.unpack_from(SECTION_FORMAT, data, offset))

    def pack(self) -> bytes:
        return struct.pack(
            SECTION_FORMAT,
            self.name,
            self.virtual_size,
            self.virtual_address,
            self.raw_size,
            self.raw_offset,
            self.relocations_offset,
            self.linenumbers_offset,
            self.relocation_count,
            self.linenumber_count,
            self.characteristics,
        )


def pad_name(name: bytes) -> bytes:
    if len(name) > 8:
        raise ValueError(f"section name {name!r} longer than 8 bytes")
    return name.ljust(8, b"\0")


@dataclass(frozen=True)
class PeFile:
    """Immutable PE file split into byte-owning parts.

    ``gaps[i]`` is the filler that precedes ``section_data[i]`` in file
    order: for the first section with raw data this is the header padding,
    for later ones the previous section's alignment slack.  Sections with
    no raw data own empty gaps.
    """

    dos_header: bytes
    dos_stub: bytes
    coff: CoffHeader
    optional: OptionalHeader
    sections: tuple[SectionHeader, ...]
    gaps: tuple[bytes, ...]
    section_data: tuple[bytes, ...]
    overlay: bytes = b""

    @property
    def e_lfanew(self) -> int:
        return DOS_HEADER_SIZE + len(self.dos_stub)

    @property
    def optional_offset(self) -> int:
        return self.e_lfanew + 4 + COFF_SIZE

    @property
    def checksum_offset(self) -> int:
        return self.optional_offset + _OPT_CHECKSUM

    @property
    def section_table_offset(self) -> int:
        return self.optional_offset + self.coff.optional_header_size

    @property
    def headers_end(self) -> int:
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.sections)

    @property
    def file_alignment(self) -> int:
        return self.optional.file_alignment

    @property
    def section_count(self) -> int:
        return len(self.sections)

    @property
    def sections_end(self) -> int:
        """File offset one past the last section's raw data (start of overlay)."""
        return self.headers_end + sum(len(g) for g in self.gaps) + sum(
            len(d) for d in self.section_data
        )

    @property
    def file_length(self) -> int:
        return self.sections_end + len(self.overlay)

    def header_room(self) -> int:
        """Bytes between the end of the section table and the first raw section."""
        for gap, sec in zip(self.gaps, self.sections):
            if sec.raw_size:
                return len(gap)
        return len(self.overlay)

    def certificate_range(self) -> Optional[tuple[int, int]]:
        """Overlay-relative (start, end) of the certificate blob, if any.

        The security directory stores a file offset, not an RVA; only blobs
        that lie wholly inside the overlay are interpreted.
        """
        offset, size = self.optional.directory(DIR_SECURITY)
        if size == 0:
            return None
        start = offset - self.sections_end
        if start < 0 or start + size > len(self.overlay):
            return None
        return start, start + size

    def rva_to_section(self, rva: int) -> Optional[tuple[int, int]]:
        """Map an RVA to (section index, offset into that section's raw data)."""
        for i, sec in enumerate(self.sections):
            span = max(sec.virtual_size, sec.raw_size)
            if sec.virtual_address <= rva < sec.virtual_address + span:
                delta = rva - sec.virtual_address
                if delta < sec.raw_size:
                    return i, delta
                return None
        return None

    def section_slack(self, index: int) -> int:
        """Bytes of filler after a section's raw data up to its alignment boundary."""
        sec = self.sections[index]
        if sec.raw_size == 0:
            return 0
        room = align_up(sec.raw_size, self.file_alignment) - sec.raw_size
        following = self._following_filler(index)
        return min(room, following)

    def _following_filler(self, index: int) -> int:
        for j in range(index + 1, len(self.sections)):
            if self.sections[j].raw_size:
                return len(self.gaps[j])
        cert = self.certificate_range()
        return cert[0] if cert else len(self.overlay)

    def replace(self, **changes) -> "PeFile":
        return replace(self, **changes)


def _checksum_field_offset(data: bytes) -> int:
    if len(data) < DOS_HEADER_SIZE or data[:2] != b"MZ":
        raise MalformedPe("missing MZ magic")
    (e_lfanew,) = struct.unpack_from("<I", data, 0x3C)
    if e_lfanew < DOS_HEADER_SIZE or e_lfanew + 4 + COFF_SIZE + _OPT_CHECKSUM + 4 > len(data):
        raise MalformedPe("e_lfanew points outside the file")
    if data[e_lfanew:e_lfanew + 4] != PE_SIGNATURE:
        raise MalformedPe("missing PE signature")
    return e_lfanew + 4 + COFF_SIZE + _OPT_CHECKSUM


def parse_pe(data: bytes) -> PeFile:
    """Parse ``data`` into a :class:`PeFile`.

    Raises :class:`MalformedPe` for missing magic numbers, header or section
    tables that overrun the file, misaligned raw offsets and overlapping or
    unsorted sections.  Malformed input is rejected, never repaired.
    """
    data = bytes(data)
    if not data:
        raise MalformedPe("empty input")
    if len(data) < DOS_HEADER_SIZE or data[:2] != b"MZ":
        raise MalformedPe("missing MZ magic")
    (e_lfanew,) = struct.unpack_from("<I", data, 0x3C)
    if e_lfanew < DOS_HEADER_SIZE:
        raise MalformedPe("e_lfanew overlaps the DOS header")
    if e_lfanew + 4 + COFF_SIZE > len(data):
        raise MalformedPe("e_lfanew points past end of file")
    if data[e_lfanew:e_lfanew + 4] != PE_SIGNATURE:
        raise MalformedPe("missing PE signature")

    coff = CoffHeader.unpack(data, e_lfanew + 4)
    opt_offset = e_lfanew + 4 + COFF_SIZE
    if opt_offset + coff.optional_header_size > len(data):
        raise MalformedPe("optional header overruns file")
    optional = OptionalHeader.unpack(data, opt_offset, coff.optional_header_size)
    if optional.file_alignment == 0:
        raise MalformedPe("zero file alignment")

    table = opt_offset + coff.optional_header_size
    table_end = table + SECTION_HEADER_SIZE * coff.section_count
    if table_end > len(data):
        raise MalformedPe("section table overruns file")
    sections = tuple(
        SectionHeader.unpack(data, table + SECTION_HEADER_SIZE * i)
        for i in range(coff.section_count)
    )

    gaps = []
    payloads = []
    cursor = table_end
    for i, sec in enumerate(sections):
        if sec.raw_size == 0:
            gaps.append(b"")
            payloads.append(b"")
            continue
        if sec.raw_offset % optional.file_alignment:
            raise MalformedPe(f"section {i} raw offset {sec.raw_offset:#x} is misaligned")
        if sec.raw_offset < cursor:
            raise MalformedPe(f"section {i} overlaps the preceding structure")
        if sec.raw_end > len(data):
            raise MalformedPe(f"section {i} raw data overruns file")
        gaps.append(data[cursor:sec.raw_offset])
        payloads.append(data[sec.raw_offset:sec.raw_end])
        cursor = sec.raw_end

    return PeFile(
        dos_header=data[:DOS_HEADER_SIZE],
        dos_stub=data[DOS_HEADER_SIZE:e_lfanew],
        coff=coff,
        optional=optional,
        sections=sections,
        gaps=tuple(gaps),
        section_data=tuple(payloads),
        overlay=data[cursor:],
    )


def serialize_pe(pe: PeFile) -> bytes:
    """Emit the file in offset order; raises :class:`LayoutConflict` on bad extents."""
    n = len(pe.sections)
    if not (pe.coff.section_count == n == len(pe.gaps) == len(pe.section_data)):
        raise LayoutConflict("section count disagrees with section table and payloads")
    if len(pe.dos_header) != DOS_HEADER_SIZE:
        raise LayoutConflict("DOS header must be 64 bytes")
    if struct.unpack_from("<I", pe.dos_header, 0x3C)[0] != pe.e_lfanew:
        raise LayoutConflict("e_lfanew does not match DOS stub length")
    optional = pe.optional.pack()
    if len(optional) != pe.coff.optional_header_size:
        raise LayoutConflict("optional header size disagrees with COFF header")

    parts = [pe.dos_header, pe.dos_stub, PE_SIGNATURE, pe.coff.pack(), optional]
    parts.extend(sec.pack() for sec in pe.sections)
    cursor = pe.headers_end
    for i, (sec, gap, payload) in enumerate(zip(pe.sections, pe.gaps, pe.section_data)):
        if len(payload) != sec.raw_size:
            raise LayoutConflict(f"section {i} payload length differs from raw size")
        if sec.raw_size == 0:
            if gap:
                raise LayoutConflict(f"section {i} has no raw data but owns a gap")
            continue
        cursor += len(gap)
        if cursor != sec.raw_offset:
            raise LayoutConflict(
                f"section {i} expected at {sec.raw_offset:#x}, layout places it at {cursor:#x}"
            )
        parts.append(gap)
        parts.append(payload)
        cursor += sec.raw_size
    parts.append(pe.overlay)
    return b"".join(parts)


def compute_pe_checksum(data: bytes) -> int:
    """Standard PE image checksum.

    16-bit little-endian word sum with end-around carry, the checksum
    field itself counted as zero, plus the file length.
    """
    offset = _checksum_field_offset(data)
    buf = bytearray(data)
    buf[offset:offset + 4] = b"\0\0\0\0"
    if len(buf) % 2:
        buf.append(0)
    total = int(np.frombuffer(bytes(buf), dtype="<u2").sum(dtype=np.uint64))
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


def byte_diff_count(a: bytes, b: bytes) -> int:
    """Positions that differ over the common prefix plus the length difference."""
    n = min(len(a), len(b))
    xa = np.frombuffer(a, dtype=np.uint8, count=n)
    xb = np.frombuffer(b, dtype=np.uint8, count=n)
    return int(np.count_nonzero(xa != xb)) + abs(len(a) - len(b))
