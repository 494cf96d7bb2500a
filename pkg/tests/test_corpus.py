import csv

import numpy as np
import pytest

from echelon import corpus
from echelon.corpus import CorpusSpec, Motif, generate, generate_sample, ingest
from echelon.exceptions import DegenerateClass, EmptyDataset
from echelon.pe_format import BENIGN, MALWARE, MAX_SAMPLE_SIZE, parse_pe
from echelon.pipeline import split


def test_motif_frequencies():
    pattern = bytes(range(64))
    spec = CorpusSpec(1000, 1000, motifs=[Motif(".evil", pattern, 0.95, 0.02)],
                      section_size=(128, 256), seed=1)
    freq = {}
    for label in (BENIGN, MALWARE):
        hits = sum(pattern in generate_sample(spec, i, label).data for i in range(1000))
        freq[label] = hits / 1000
    assert abs(freq[MALWARE] - 0.95) <= 0.03
    assert abs(freq[BENIGN] - 0.02) <= 0.03


def test_planted_offsets_hold_the_pattern():
    pattern = b"\xde\xad" * 32
    spec = CorpusSpec(0, 30, motifs=[Motif(".text", pattern, 1.0, 0.0)], seed=2)
    for i in range(30):
        g = generate_sample(spec, i, MALWARE)
        (sec, off, j), = g.planted
        assert g.data[off:off + 64] == pattern
        assert parse_pe(g.data).sections and sec == ".text"


def test_malware_only_corpus(tmp_path):
    rows = generate(CorpusSpec(0, 5, seed=0), tmp_path)
    assert {r["label"] for r in rows} == {"malware"}
    ds = ingest(tmp_path / "manifest.csv")
    with pytest.raises(DegenerateClass):
        split(ds.samples)


def test_same_seed_same_bytes(tmp_path):
    spec = corpus.reference_spec(20, 20, seed=9)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_generator_intent_matches_parse():
    spec = corpus.reference_spec(50, 50, seed=4)
    for g in corpus.iter_samples(spec):
        parsed = parse_pe(g.data, g.label, g.id)
        assert parsed.sections == tuple(sorted(g.sections, key=lambda e: e.raw_offset))


def test_skips_corrupt_files(tmp_path):
    generate(CorpusSpec(2, 1, seed=0), tmp_path)
    (tmp_path / "benign" / "broken.exe").write_bytes(b"MZ" + bytes(100))
    ds = ingest(tmp_path)
    assert len(ds) == 3 and len(ds.skipped) == 1


def test_size_boundary(tmp_path):
    generate(CorpusSpec(1, 1, seed=0), tmp_path)
    exact, _ = corpus.build_pe([(".text", bytes(MAX_SAMPLE_SIZE - 512))])
    over, _ = corpus.build_pe([(".text", bytes(MAX_SAMPLE_SIZE - 511))])
    assert len(exact) == MAX_SAMPLE_SIZE and len(over) == MAX_SAMPLE_SIZE + 1
    (tmp_path / "benign" / "exact.exe").write_bytes(exact)
    (tmp_path / "malware" / "over.exe").write_bytes(over)
    ds = ingest(tmp_path)
    assert "exact" in {s.id for s in ds} and "over" not in {s.id for s in ds}
    assert [r for _, r in ds.skipped] == [f"size {MAX_SAMPLE_SIZE + 1} exceeds {MAX_SAMPLE_SIZE}"]


def test_manifest_and_directory_agree(tmp_path):
    generate(corpus.reference_spec(15, 15, seed=3), tmp_path)
    a = ingest(tmp_path / "manifest.csv").samples
    b = ingest(tmp_path).samples
    assert [(s.id, s.label, s.bytes) for s in a] == [(s.id, s.label, s.bytes) for s in b]


def test_manifest_columns(tmp_path):
    generate(CorpusSpec(1, 1, seed=0), tmp_path)
    with open(tmp_path / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"id", "path", "label", "size", "sections"}


def test_missing_source():
    with pytest.raises(EmptyDataset):
        ingest("/nonexistent/corpus")


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(-1, 1)
    with pytest.raises(ValueError):
        CorpusSpec(1, 1, motifs=[Motif(".x", b"a", 1.5, 0)])


def test_unlabeled_loading(tmp_path):
    generate(CorpusSpec(1, 1, seed=0), tmp_path)
    (tmp_path / "junk.bin").write_bytes(b"nope")
    files = sorted(tmp_path.rglob("*.exe")) + [tmp_path / "junk.bin"]
    samples, errors = corpus.load_unlabeled(files)
    assert len(samples) == 2 and samples[0].label is None
    assert errors and errors[0][0].endswith("junk.bin")
