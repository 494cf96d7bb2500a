"""Activation Trend Identification.

Every filter of a max-pooled model keeps exactly one activation per sample.
Tracing that survivor back to its input window, and the window to the PE
section containing its first byte, gives each sample ``F`` section votes.
Averaging the votes per class yields the activation trends, whose ratio
ranks sections from benign-biased to malware-biased.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nn_engine as nn
from .exceptions import DegenerateClass
from .pe_format import BENIGN, HEADER_REGION, MALWARE, PeSample, section_of_offset

AR_EPS = 1e-6
CSV_COLUMNS = ("section", "t_plus", "t_minus", "ar", "n_benign_samples", "n_malware_samples")


@dataclass(frozen=True)
class ActivationTrace:
    sample_id: str
    filter: int
    window: int
    byte_range: tuple
    section: str
    value: float


def window_region(sample: PeSample, window: int, width: int) -> str:
    start = window * width
    if start < len(sample.bytes):
        return section_of_offset(sample, start)
    # Only an empty sample has a window starting past its data.
    return HEADER_REGION if not sample.bytes else section_of_offset(sample, len(sample.bytes) - 1)


def _traces_from_record(sample: PeSample, rec: nn.ForwardRecord, width: int) -> list:
    regions = {}
    out = []
    for f, (k, v) in enumerate(zip(rec.argmax_window.tolist(), rec.pooled.tolist())):
        if k not in regions:
            regions[k] = window_region(sample, k, width)
        out.append(ActivationTrace(sample.id, f, k, (k * width, (k + 1) * width), regions[k], v))
    return out


def trace_sample(model: nn.ConvNetModel, sample: PeSample, max_len: Optional[int] = None) -> list:
    """One trace per filter: the window that won max pooling and its region."""
    W = model.hyper.window
    rec = nn.forward(model, nn.pad_tokens(sample.bytes, W, max_len))
    return _traces_from_record(sample, rec, W)


def trace_samples(model: nn.ConvNetModel, samples: Sequence[PeSample],
                  max_len: Optional[int] = None, batch_size: int = 64) -> dict:
    """``{sample.id: traces}`` for many samples, batching the forward passes."""
    W = model.hyper.window
    out = {}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        recs = nn.forward_batch(model, [nn.pad_tokens(s.bytes, W, max_len) for s in chunk])
        for s, rec in zip(chunk, recs):
            out[s.id] = _traces_from_record(s, rec, W)
    return out


@dataclass
class SectionStats:
    t_plus: dict
    t_minus: dict
    ar: dict
    n_benign: int
    n_malware: int

    @property
    def names(self) -> list:
        return sorted(self.ar)

    def ranked(self) -> list:
        """Names by increasing AR; equal ratios fall back to name order."""
        return sorted(self.ar, key=lambda s: (self.ar[s], s))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in self.ranked():
            w.writerow([s, repr(self.t_plus[s]), repr(self.t_minus[s]), repr(self.ar[s]),
                        self.n_benign, self.n_malware])
        return buf.getvalue()

    def histogram(self, width: int = 40) -> str:
        """Plain-text bar chart of log AR; ``-`` bars lean benign, ``+`` malware."""
        ranked = self.ranked()
        if not ranked:
            return ""
        logs = {s: math.log10(self.ar[s]) for s in ranked}
        top = max(abs(v) for v in logs.values()) or 1.0
        pad = max(len(s) for s in ranked)
        lines = []
        for s in ranked:
            n = int(round(abs(logs[s]) / top * width))
            bar = ("-" if logs[s] < 0 else "+") * n
            lines.append(f"{s:<{pad}}  {self.ar[s]:>12.4g}  {bar}")
        return "\n".join(lines)


def compute_stats(traces_by_sample: Mapping[str, Sequence[ActivationTrace]],
                  labels: Mapping[str, int]) -> SectionStats:
    """Per-section mean top-activation counts for each class and their ratio."""
    ids = sorted(traces_by_sample)
    n_benign = sum(1 for i in ids if labels[i] == BENIGN)
    n_malware = sum(1 for i in ids if labels[i] == MALWARE)
    if n_malware == 0 or n_benign == 0:
        missing = "malware" if n_malware == 0 else "benign"
        raise DegenerateClass(f"no {missing} samples among the traced set")
    totals = {BENIGN: Counter(), MALWARE: Counter()}
    for i in ids:
        totals[labels[i]].update(t.section for t in traces_by_sample[i])
    names = sorted(set(totals[BENIGN]) | set(totals[MALWARE]))
    t_minus = {s: totals[BENIGN][s] / n_benign for s in names}
    t_plus = {s: totals[MALWARE][s] / n_malware for s in names}
    ar = {s: (t_plus[s] + AR_EPS) / (t_minus[s] + AR_EPS) for s in names}
    return SectionStats(t_plus, t_minus, ar, n_benign, n_malware)


@dataclass(frozen=True)
class BiasSelection:
    s_bias: tuple  # ordered by increasing AR
    cutoff: int
    benign_side: tuple = ()
    malware_side: tuple = ()

    def __contains__(self, name) -> bool:
        return name in self.s_bias

    def __len__(self) -> int:
        return len(self.s_bias)


def select_bias(stats: SectionStats, cutoff: int) -> BiasSelection:
    """``cutoff`` names from each end of the AR ranking (all names if they overlap)."""
    if cutoff < 1:
        raise ValueError("cutoff must be at least 1")
    ranked = stats.ranked()
    if 2 * cutoff >= len(ranked):
        half = len(ranked) // 2
        return BiasSelection(tuple(ranked), cutoff, tuple(ranked[:half]), tuple(ranked[half:]))
    low, high = ranked[:cutoff], ranked[-cutoff:]
    return BiasSelection(tuple(low + high), cutoff, tuple(low), tuple(high))


def cutoff_grid(n_names: int, step: float = 0.02, top: float = 0.5) -> list:
    """Distinct per-side name counts for fractions ``step, 2*step, ..., top`` of ``n_names``."""
    fracs = np.arange(1, int(round(top / step)) + 1) * step
    counts = sorted({max(1, math.ceil(f * n_names - 1e-9)) for f in fracs})
    return counts


def activation_counts(traces: Sequence[ActivationTrace]) -> Counter:
    return Counter(t.section for t in traces)
