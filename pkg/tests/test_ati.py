import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echelon import ati, nn_engine as nn
from echelon.ati import ActivationTrace, compute_stats, cutoff_grid, select_bias
from echelon.corpus import build_pe
from echelon.exceptions import DegenerateClass
from echelon.pe_format import HEADER_REGION, PeSample, parse_pe, section_of_offset

from conftest import random_model


def trace(sid, section, f=0):
    return ActivationTrace(sid, f, 0, (0, 1), section, 1.0)


def stats_from_ar(ar):
    names = sorted(ar)
    return ati.SectionStats({n: 0.0 for n in names}, {n: 0.0 for n in names}, dict(ar), 1, 1)


def motif_model(pattern: bytes, W: int) -> nn.ConvNetModel:
    """Filter 0 responds to ``pattern``; filter 1 is flat."""
    hp = nn.Hyper(window=W, n_filters=2, embed_dim=1, hidden=2)
    m = nn.ConvNetModel.zeros(hp, dtype=np.float64)
    m.embedding[:, 0] = np.linspace(-1, 1, nn.VOCAB)
    m.conv_filters[0, :, 0] = m.embedding[np.frombuffer(pattern, np.uint8), 0]
    m.gate_bias[:] = 5.0
    return m


def test_motif_filter_points_at_its_section():
    W = 16
    rng = np.random.default_rng(0)
    pattern = rng.integers(0, 256, W, dtype=np.uint8).tobytes()
    body = bytearray(rng.integers(0, 256, 512, dtype=np.uint8).tobytes())
    body[128:128 + W] = pattern
    data, _ = build_pe([(".data", bytes(512)), (".text", bytes(body)), (".rsrc", bytes(256))])
    sample = parse_pe(data, 1, "x")
    m = motif_model(pattern, W)
    traces = ati.trace_sample(m, sample)
    assert len(traces) == 2
    t0 = traces[0]
    assert t0.section == ".text"
    assert data[t0.byte_range[0]:t0.byte_range[1]] == pattern
    # brute force: the pattern window scores highest for filter 0
    toks = nn.pad_tokens(data, W)
    scores = [(m.embedding[toks[k * W:(k + 1) * W], 0] * m.conv_filters[0, :, 0]).sum()
              for k in range(len(toks) // W)]
    assert t0.window == int(np.argmax(scores))


def test_empty_sample_traces_to_header():
    m = nn.ConvNetModel.init(nn.Hyper(4, 3, 2, 2), seed=0)
    traces = ati.trace_sample(m, PeSample(b"", (), 0, "e"))
    assert len(traces) == 3
    assert {t.section for t in traces} == {HEADER_REGION}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_traces_agree_with_brute_force(seed):
    from echelon import corpus
    rng = np.random.default_rng(seed)
    m = random_model(rng, semantic=False)
    spec = corpus.CorpusSpec(2, 2, section_size=(64, 200), seed=seed % 1000)
    sample = corpus.generate_dataset(spec)[int(rng.integers(4))]
    W = m.hyper.window
    toks = nn.pad_tokens(sample.bytes, W)
    emb = m.embedding[toks].reshape(-1, W * m.hyper.embed_dim)
    a = emb @ m.conv_filters.reshape(m.hyper.n_filters, -1).T + m.conv_bias
    g = emb @ m.gate_filters.reshape(m.hyper.n_filters, -1).T + m.gate_bias
    act = a / (1 + np.exp(-g))
    traces = ati.trace_sample(m, sample)
    assert len(traces) == m.hyper.n_filters
    for t in traces:
        col = act[:, t.filter]
        assert t.window == int(np.flatnonzero(col == col.max())[0])
        assert t.value == pytest.approx(col.max(), rel=1e-9)
        start = min(t.window * W, len(sample.bytes) - 1)
        assert t.section == section_of_offset(sample, start)


def test_batched_tracing_matches_single(small_corpus):
    m = nn.ConvNetModel.init(nn.Hyper(32, 4, 2, 4), seed=0)
    few = small_corpus[:5]
    many = ati.trace_samples(m, few, batch_size=2)
    for s in few:
        assert [(t.window, t.section) for t in many[s.id]] == \
               [(t.window, t.section) for t in ati.trace_sample(m, s)]


def test_trend_arithmetic():
    traces = {"a": [trace("a", ".text"), trace("a", ".text")],
              "b": [trace("b", ".text")] * 4,
              "m": [trace("m", ".text")] * 6}
    st_ = compute_stats(traces, {"a": 0, "b": 0, "m": 1})
    assert st_.t_minus[".text"] == 3
    assert st_.t_plus[".text"] == 6
    assert st_.ar[".text"] == pytest.approx(2.0, rel=1e-6)


def test_malware_only_section_has_large_finite_ratio():
    traces = {"b": [trace("b", ".data")], "m": [trace("m", ".evil")] * 2}
    st_ = compute_stats(traces, {"b": 0, "m": 1})
    assert st_.t_minus[".evil"] == 0
    assert st_.ar[".evil"] == pytest.approx((2 + 1e-6) / 1e-6)
    assert np.isfinite(st_.ar[".evil"])


def test_stats_need_both_classes():
    with pytest.raises(DegenerateClass):
        compute_stats({"m": [trace("m", ".x")]}, {"m": 1})


def test_select_extremes():
    s = stats_from_ar({"a": 0.1, "b": 0.9, "c": 1.0, "d": 1.1, "e": 10})
    sel = select_bias(s, 1)
    assert set(sel.s_bias) == {"a", "e"}
    assert sel.benign_side == ("a",) and sel.malware_side == ("e",)


def test_select_saturates():
    s = stats_from_ar({"a": 0.1, "b": 0.9, "c": 1.0, "d": 1.1, "e": 10})
    assert set(select_bias(s, 3).s_bias) == set("abcde")


def test_ties_break_by_name():
    s = stats_from_ar({"z": 1.0, "y": 1.0, "x": 1.0, "w": 5.0})
    assert select_bias(s, 1).s_bias == ("x", "w")
    assert s.ranked() == ["x", "y", "z", "w"]


def test_cutoff_grid():
    assert cutoff_grid(29, 0.1, 0.5) == [3, 6, 9, 12, 15]
    assert cutoff_grid(4, 0.02, 0.5) == [1, 2]
    assert cutoff_grid(50, 0.02, 0.5) == list(range(1, 26))


def test_csv_and_histogram():
    traces = {"b": [trace("b", ".rsrc"), trace("b", ".text")], "m": [trace("m", ".text")] * 2}
    st_ = compute_stats(traces, {"b": 0, "m": 1})
    lines = st_.to_csv().splitlines()
    assert lines[0].split(",") == list(ati.CSV_COLUMNS)
    assert [ln.split(",")[0] for ln in lines[1:]] == st_.ranked()
    hist = st_.histogram()
    assert ".rsrc" in hist and "-" in hist.splitlines()[0] and "+" in hist.splitlines()[-1]
