"""PE/COFF section-table parsing and offset-to-region lookup.

Only the parts of the format needed to partition a file into named regions
are read: the DOS stub pointer, the COFF file header and the section table.
All multi-byte integers are little-endian.
"""

from __future__ import annotations

import bisect
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

from .exceptions import MalformedPe, OffsetOutOfRange

logger = logging.getLogger(__name__)

DOS_HEADER_SIZE = 64
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40
MAX_SAMPLE_SIZE = 1 << 20

HEADER_REGION = "header"
GAP_REGION = "gap"
UNNAMED_SECTION = "unnamed"

BENIGN = 0
MALWARE = 1


@dataclass(frozen=True)
class SectionEntry:
    name: str
    raw_offset: int
    raw_size: int
    virtual_address: int = 0

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size


@dataclass(frozen=True, eq=True)
class PeSample:
    """Raw bytes of one executable plus its parsed section map.

    ``label`` is ``1`` for malware, ``0`` for benign and ``None`` when unknown.
    """

    bytes: bytes
    sections: tuple = ()
    label: Optional[int] = None
    id: str = ""
    _occupied: tuple = field(default=(), init=False, repr=False, compare=False)
    _starts: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        # Lookup table over non-empty raw ranges.
        occupied = tuple(sorted((s for s in self.sections if s.raw_size > 0),
                                key=lambda s: s.raw_offset))
        object.__setattr__(self, "_occupied", occupied)
        object.__setattr__(self, "_starts", [s.raw_offset for s in occupied])

    def __len__(self) -> int:
        return len(self.bytes)

    def with_label(self, label: Optional[int], id: Optional[str] = None) -> "PeSample":
        return PeSample(self.bytes, self.sections, label, self.id if id is None else id)

    @property
    def section_names(self) -> list[str]:
        return [s.name for s in self.sections]


def _decode_name(raw: bytes) -> str:
    name = raw.split(b"\x00", 1)[0].decode("latin-1").strip()
    return name or UNNAMED_SECTION


def parse_pe(data: bytes, label: Optional[int] = None, id: str = "") -> PeSample:
    """Parse the section table of ``data``.

    Raw ranges running past the end of the file are clamped with a warning;
    anything else that is structurally off raises :class:`MalformedPe`.
    """
    data = bytes(data)
    n = len(data)
    if n < DOS_HEADER_SIZE:
        raise MalformedPe(f"{n} bytes is shorter than a DOS header")
    if data[:2] != b"MZ":
        raise MalformedPe("missing MZ magic")
    (e_lfanew,) = struct.unpack_from("<I", data, E_LFANEW_OFFSET)
    if e_lfanew + 4 + COFF_HEADER_SIZE > n:
        raise MalformedPe(f"e_lfanew {e_lfanew:#x} points beyond the file")
    if data[e_lfanew:e_lfanew + 4] != b"PE\x00\x00":
        raise MalformedPe("missing PE signature")

    coff = e_lfanew + 4
    n_sections, = struct.unpack_from("<H", data, coff + 2)
    opt_size, = struct.unpack_from("<H", data, coff + 16)
    table = coff + COFF_HEADER_SIZE + opt_size
    if table + n_sections * SECTION_HEADER_SIZE > n:
        raise MalformedPe("section table runs past the end of the file")

    entries = []
    for i in range(n_sections):
        off = table + i * SECTION_HEADER_SIZE
        name = _decode_name(data[off:off + 8])
        vaddr, raw_size, raw_ptr = struct.unpack_from("<III", data, off + 12)
        if raw_ptr >= n and raw_size:
            logger.warning("section %r starts at %#x beyond file end %#x; clamped to empty",
                           name, raw_ptr, n)
            raw_ptr, raw_size = n, 0
        elif raw_ptr + raw_size > n:
            logger.warning("section %r raw size %d clamped to file end", name, raw_size)
            raw_size = n - raw_ptr
        if raw_size == 0:
            raw_ptr = min(raw_ptr, n)
        entries.append(SectionEntry(name, raw_ptr, raw_size, vaddr))

    entries.sort(key=lambda s: s.raw_offset)
    occupied = [s for s in entries if s.raw_size > 0]
    for prev, cur in zip(occupied, occupied[1:]):
        if cur.raw_offset < prev.raw_end:
            raise MalformedPe(f"sections {prev.name!r} and {cur.name!r} overlap")
    return PeSample(data, tuple(entries), label, id)


def section_of_offset(sample: PeSample, offset: int) -> str:
    """Name of the region owning byte ``offset``.

    Ranges are half-open. Bytes before the first non-empty section belong to
    ``"header"``; bytes covered by no section are ``"gap"``.
    """
    if not 0 <= offset < len(sample.bytes):
        raise OffsetOutOfRange(f"offset {offset} outside [0, {len(sample.bytes)})")
    occupied = sample._occupied
    if not occupied or offset < occupied[0].raw_offset:
        return HEADER_REGION
    i = bisect.bisect_right(sample._starts, offset) - 1
    sec = occupied[i]
    return sec.name if offset < sec.raw_end else GAP_REGION


def region_map(sample: PeSample) -> list[tuple[int, int, str]]:
    """Partition of ``[0, len)`` into ``(start, end, region)`` triples."""
    n = len(sample.bytes)
    out = []
    pos = 0
    occupied = sample._occupied
    first = occupied[0].raw_offset if occupied else n
    if first > 0:
        out.append((0, first, HEADER_REGION))
        pos = first
    for sec in occupied:
        if sec.raw_offset > pos:
            out.append((pos, sec.raw_offset, GAP_REGION))
        out.append((sec.raw_offset, sec.raw_end, sec.name))
        pos = sec.raw_end
    if pos < n:
        out.append((pos, n, GAP_REGION))
    return out
