"""Synthetic PE corpora with planted class-correlated motifs, and ingestion.

Generated files are minimal but structurally valid PE32 images: DOS header,
``PE\\0\\0`` signature, COFF header, a 224-byte optional header and a section
table, with raw section data aligned to ``file_alignment``.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .exceptions import EmptyDataset, IoFailure, MalformedPe
from .pe_format import BENIGN, MALWARE, MAX_SAMPLE_SIZE, PeSample, SectionEntry, parse_pe

logger = logging.getLogger(__name__)

TABLE1_SECTIONS = (".text", ".data", ".rdata", ".edata", ".idata", ".debug", ".reloc", ".rsrc")
LABEL_NAMES = {BENIGN: "benign", MALWARE: "malware"}
LABEL_VALUES = {v: k for k, v in LABEL_NAMES.items()}

_OPT_HEADER_SIZE = 224
_E_LFANEW = 0x40


@dataclass(frozen=True)
class Motif:
    section: str
    pattern: bytes
    p_malware: float
    p_benign: float

    def probability(self, label: int) -> float:
        return self.p_malware if label == MALWARE else self.p_benign


@dataclass
class CorpusSpec:
    n_benign: int = 100
    n_malware: int = 100
    sections_per_sample: tuple = (3, 6)
    section_size: tuple = (512, 4096)
    motifs: list = field(default_factory=list)
    # Probability that a filler byte is uniform random rather than 0x00.
    noise: float = 0.8
    seed: int = 0
    n_synthetic_names: int = 20
    file_alignment: int = 512
    motif_alignment: int = 64
    # Sections every sample carries regardless of the random draw.
    required_sections: tuple = ()

    def __post_init__(self):
        if self.n_benign < 0 or self.n_malware < 0:
            raise ValueError("sample counts must be non-negative")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        lo, hi = self.section_size
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad section_size range {self.section_size}")
        for m in self.motifs:
            if not (0 <= m.p_malware <= 1 and 0 <= m.p_benign <= 1):
                raise ValueError(f"motif probabilities outside [0, 1]: {m}")
            if len(m.pattern) > lo:
                raise ValueError("motif longer than the smallest section")

    @property
    def name_pool(self) -> tuple:
        synth = tuple(f".s{i:03d}" for i in range(1, self.n_synthetic_names + 1))
        return TABLE1_SECTIONS + synth


@dataclass
class GeneratedSample:
    id: str
    label: int
    data: bytes
    sections: list  # SectionEntry as written
    planted: list = field(default_factory=list)  # (section, offset, motif index)


def _align(x: int, a: int) -> int:
    return -(-x // a) * a


def build_pe(sections: Sequence[tuple[str, bytes]], file_alignment: int = 512,
             section_alignment: int = 0x1000) -> tuple[bytes, list]:
    """Assemble a PE32 image from ``(name, raw bytes)`` pairs, in order.

    Returns the image and the :class:`SectionEntry` list it encodes.
    """
    n = len(sections)
    table = _E_LFANEW + 4 + 20 + _OPT_HEADER_SIZE
    headers_size = _align(table + 40 * n, file_alignment)
    entries = []
    pos = headers_size
    va = section_alignment
    for name, raw in sections:
        if len(name.encode("latin-1")) > 8:
            raise ValueError(f"section name {name!r} longer than 8 bytes")
        entries.append(SectionEntry(name, pos, len(raw), va))
        pos += _align(len(raw), file_alignment)
        va += _align(max(len(raw), 1), section_alignment)

    out = bytearray(pos)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, _E_LFANEW)
    out[_E_LFANEW:_E_LFANEW + 4] = b"PE\x00\x00"
    coff = _E_LFANEW + 4
    # Machine i386, section count, timestamp, symtab ptr, nsyms, opt size, characteristics
    struct.pack_into("<HHIIIHH", out, coff, 0x14C, n, 0, 0, 0, _OPT_HEADER_SIZE, 0x0102)
    opt = coff + 20
    struct.pack_into("<H", out, opt, 0x10B)
    struct.pack_into("<I", out, opt + 16, entries[0].virtual_address if entries else 0)
    struct.pack_into("<II", out, opt + 32, section_alignment, file_alignment)
    struct.pack_into("<I", out, opt + 56, va)  # SizeOfImage
    struct.pack_into("<I", out, opt + 60, headers_size)
    struct.pack_into("<H", out, opt + 68, 3)  # console subsystem
    struct.pack_into("<I", out, opt + 92, 16)  # NumberOfRvaAndSizes
    for i, ((name, raw), e) in enumerate(zip(sections, entries)):
        off = table + 40 * i
        out[off:off + 8] = name.encode("latin-1").ljust(8, b"\x00")
        struct.pack_into("<IIII", out, off + 8, len(raw), e.virtual_address, len(raw), e.raw_offset)
        struct.pack_into("<I", out, off + 36, 0x60000020 if name == ".text" else 0x40000040)
        out[e.raw_offset:e.raw_offset + len(raw)] = raw
    # Trailing alignment padding on the last section is dropped so every byte
    # after the headers is owned by a section or an inter-section gap.
    end = entries[-1].raw_end if entries else headers_size
    return bytes(out[:end]), entries


def _filler(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    buf = rng.integers(0, 256, size=size, dtype=np.uint8)
    if noise < 1.0:
        buf[rng.random(size) >= noise] = 0
    return buf


def generate_sample(spec: CorpusSpec, index: int, label: int) -> GeneratedSample:
    """One sample, seeded by ``(spec.seed, label, index)``."""
    rng = np.random.default_rng([spec.seed, label, index])
    pool = spec.name_pool
    k = int(rng.integers(spec.sections_per_sample[0], spec.sections_per_sample[1] + 1))
    names = list(spec.required_sections)
    candidates = [p for p in pool if p not in names]
    extra = max(k - len(names), 0)
    picks = rng.choice(len(candidates), size=min(extra, len(candidates)), replace=False)
    names += [candidates[i] for i in sorted(picks)]

    planted_motifs = [(j, m) for j, m in enumerate(spec.motifs) if rng.random() < m.probability(label)]
    for _, m in planted_motifs:
        if m.section not in names:
            names.append(m.section)
    order = rng.permutation(len(names))
    names = [names[i] for i in order]

    lo, hi = spec.section_size
    bodies = {}
    for name in names:
        size = int(rng.integers(lo, hi + 1))
        bodies[name] = _filler(rng, size, spec.noise)
    planted = []
    for j, m in planted_motifs:
        body = bodies[m.section]
        slots = (len(body) - len(m.pattern)) // spec.motif_alignment + 1
        off = int(rng.integers(0, slots)) * spec.motif_alignment
        body[off:off + len(m.pattern)] = np.frombuffer(m.pattern, dtype=np.uint8)
        planted.append((m.section, off, j))
    data, entries = build_pe([(n, bodies[n].tobytes()) for n in names], spec.file_alignment)
    prefix = "m" if label == MALWARE else "b"
    sid = f"{prefix}{index:06d}"
    starts = {e.name: e.raw_offset for e in entries}
    planted = [(s, starts[s] + off, j) for s, off, j in planted]
    return GeneratedSample(sid, label, data, entries, planted)


def iter_samples(spec: CorpusSpec) -> Iterator[GeneratedSample]:
    for i in range(spec.n_benign):
        yield generate_sample(spec, i, BENIGN)
    for i in range(spec.n_malware):
        yield generate_sample(spec, i, MALWARE)


def generate_dataset(spec: CorpusSpec) -> list[PeSample]:
    """The corpus as parsed, labelled samples without touching disk, sorted by id."""
    out = [parse_pe(g.data, g.label, g.id) for g in iter_samples(spec)]
    return sorted(out, key=lambda s: s.id)


def generate(spec: CorpusSpec, out_dir) -> list[dict]:
    """Write the corpus under ``out_dir/{benign,malware}/`` plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    rows = []
    try:
        for name in LABEL_NAMES.values():
            (out_dir / name).mkdir(parents=True, exist_ok=True)
        for g in iter_samples(spec):
            rel = f"{LABEL_NAMES[g.label]}/{g.id}.exe"
            (out_dir / rel).write_bytes(g.data)
            rows.append({"id": g.id, "path": rel, "label": LABEL_NAMES[g.label],
                         "size": len(g.data),
                         "sections": ";".join(f"{e.name}@{e.raw_offset}+{e.raw_size}"
                                              for e in g.sections)})
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "path", "label", "size", "sections"])
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write corpus to {out_dir}: {exc}") from exc
    return rows


@dataclass
class Dataset:
    samples: list
    skipped: list = field(default_factory=list)  # (path, reason)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])


def _load_one(path: Path, label: Optional[int], sid: str, max_size: int, skipped: list):
    try:
        size = path.stat().st_size
    except OSError as exc:
        skipped.append((str(path), f"unreadable: {exc}"))
        return None
    if size > max_size:
        skipped.append((str(path), f"size {size} exceeds {max_size}"))
        return None
    try:
        return parse_pe(path.read_bytes(), label, sid)
    except MalformedPe as exc:
        logger.warning("skipping %s: %s", path, exc)
        skipped.append((str(path), str(exc)))
        return None


def ingest(source, max_size: int = MAX_SAMPLE_SIZE) -> Dataset:
    """Load labelled samples from a manifest CSV or a ``benign/`` + ``malware/`` tree.

    Oversized and unparseable files are skipped and recorded in ``skipped``.
    """
    source = Path(source)
    samples, skipped = [], []
    if source.is_file():
        base = source.parent
        with open(source, newline="") as fh:
            for row in csv.DictReader(fh):
                label = row.get("label", "")
                lab = LABEL_VALUES.get(label, int(label) if label.isdigit() else None)
                s = _load_one(base / row["path"], lab, row["id"], max_size, skipped)
                if s is not None:
                    samples.append(s)
    elif source.is_dir():
        for name, lab in LABEL_VALUES.items():
            sub = source / name
            if not sub.is_dir():
                continue
            for path in sorted(sub.iterdir()):
                if path.is_file():
                    s = _load_one(path, lab, path.stem, max_size, skipped)
                    if s is not None:
                        samples.append(s)
    else:
        raise EmptyDataset(f"{source} does not exist")
    if not samples:
        raise EmptyDataset(f"no usable samples under {source}")
    samples.sort(key=lambda s: s.id)
    return Dataset(samples, skipped)


def load_unlabeled(paths: Sequence) -> tuple[list, list]:
    """Parse loose files for prediction; returns ``(samples, errors)``."""
    samples, errors = [], []
    for p in paths:
        p = Path(p)
        try:
            samples.append(parse_pe(p.read_bytes(), None, p.stem))
        except (OSError, MalformedPe) as exc:
            errors.append((str(p), str(exc)))
    return samples, errors


def reference_spec(n_benign: int = 2000, n_malware: int = 2000, seed: int = 0) -> CorpusSpec:
    """The desk-scale reference corpus used by the end-to-end experiment."""
    return CorpusSpec(
        n_benign=n_benign,
        n_malware=n_malware,
        sections_per_sample=(4, 7),
        section_size=(512, 2048),
        motifs=reference_motifs(seed),
        noise=1.0,
        seed=seed,
        required_sections=(".text", ".data", ".rsrc"),
    )


def reference_motifs(seed: int = 0, decoy: float = 0.5) -> list:
    """Malware motifs at 0.9/0.05 plus benign-side decoys reusing two of the patterns.

    The decoys put the same bytes into a different section, so only a model
    that knows which section a window came from can tell them apart.
    """
    rng = np.random.default_rng([seed, 7919])
    code, rdata, data, imports = (rng.integers(0, 256, size=64, dtype=np.uint8).tobytes()
                                  for _ in range(4))
    return [
        Motif(".text", code, 0.9, 0.05),
        Motif(".rsrc", code, 0.05, decoy),
        Motif(".rdata", rdata, 0.9, 0.05),
        Motif(".reloc", rdata, 0.05, decoy),
        Motif(".data", data, 0.9, 0.05),
        Motif(".idata", imports, 0.9, 0.05),
    ]
