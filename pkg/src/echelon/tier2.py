"""Tier-2: biased-section inputs, the locked second threshold and the cascade model."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import ati, nn_engine as nn
from .config import MODES, STAGE_TIER2, RunConfig, derive_seed
from .exceptions import DegenerateClass, ModelFormatError, NoMalwareInValidation
from .pe_format import BENIGN, MALWARE, PeSample
from .tier1 import NEVER, hyper_from_config, lock_threshold, score_samples

logger = logging.getLogger(__name__)

ECHELON_SCHEMA = "echelon.model/1"


@dataclass
class Tier2Input:
    sample_id: str
    tokens: np.ndarray
    label: Optional[int] = None
    section_ids: Optional[np.ndarray] = None

    def example(self) -> nn.Example:
        return nn.Example(self.tokens, int(self.label or 0), self.section_ids)


def _pad_block(chunk: bytes, width: int) -> np.ndarray:
    return nn.pad_tokens(chunk, width)


def transform_section(sample: PeSample, s_bias, window: int) -> Tier2Input:
    """Raw bytes of every ``s_bias`` section in file order, each padded to a window multiple."""
    parts = [_pad_block(sample.bytes[s.raw_offset:s.raw_end], window)
             for s in sorted(sample.sections, key=lambda s: s.raw_offset)
             if s.name in s_bias and s.raw_size > 0]
    tokens = np.concatenate(parts) if parts else np.full(window, nn.PAD, dtype=np.uint16)
    return Tier2Input(sample.id, tokens, sample.label)


def _selected_windows(traces: Sequence[ati.ActivationTrace], s_bias) -> list:
    return sorted({(t.window, t.section) for t in traces if t.section in s_bias})


def transform_block(sample: PeSample, s_bias, window: int,
                    traces: Sequence[ati.ActivationTrace]) -> Tier2Input:
    """The distinct top-activation windows lying in ``s_bias`` sections, by offset."""
    wins = _selected_windows(traces, s_bias)
    if not wins:
        return Tier2Input(sample.id, np.full(window, nn.PAD, dtype=np.uint16), sample.label)
    data = sample.bytes
    tokens = np.concatenate([_pad_block(data[k * window:(k + 1) * window], window) for k, _ in wins])
    return Tier2Input(sample.id, tokens, sample.label)


def section_vocab(selection: ati.BiasSelection) -> dict:
    """Ids ``1..|s_bias|`` in AR order; 0 is reserved for PAD and unknown regions."""
    return {name: i + 1 for i, name in enumerate(selection.s_bias)}


def transform_semantic(sample: PeSample, s_bias, window: int,
                       traces: Sequence[ati.ActivationTrace], vocab: Mapping[str, int]) -> Tier2Input:
    """Block tokens plus the owning section's id for every emitted window."""
    out = transform_block(sample, s_bias, window, traces)
    wins = _selected_windows(traces, s_bias)
    ids = np.array([vocab.get(sec, 0) for _, sec in wins] or [0], dtype=np.int64)
    out.section_ids = ids
    return out


def transform(mode: str, sample: PeSample, selection: ati.BiasSelection, window: int,
              traces=None, vocab=None) -> Tier2Input:
    if mode == "section":
        return transform_section(sample, selection.s_bias, window)
    if traces is None:
        raise ValueError(f"{mode} mode needs tier-1 traces")
    if mode == "block":
        return transform_block(sample, selection.s_bias, window, traces)
    if mode == "semantic":
        return transform_semantic(sample, selection.s_bias, window, traces,
                                  vocab if vocab is not None else section_vocab(selection))
    raise ValueError(f"unknown tier-2 mode {mode!r}")


def compute_boosting_bound(malware_val_scores) -> float:
    """Lowest tier-1 score of any validation malware sample."""
    scores = np.asarray(malware_val_scores, dtype=np.float64)
    if scores.size == 0:
        raise NoMalwareInValidation("boosting bound needs validation malware scores")
    return float(scores.min())


def select_thd2(scores, labels, target_fpr: float, fp1: int, n_negatives: int) -> float:
    """Smallest tier-2 threshold keeping the two-tier validation FPR within target.

    ``scores``/``labels`` cover the B1 validation samples Tier-2 is consulted
    on; ``fp1`` is Tier-1's false-positive count and ``n_negatives`` the number
    of benign validation samples overall.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return NEVER
    return lock_threshold(scores, labels, target_fpr, base_fp=fp1, n_negatives=n_negatives)


# ------------------------------------------------------------------ the cascade


@dataclass
class Decision:
    sample_id: str
    label: int
    tier1_score: float
    tier2_score: Optional[float]
    tier: str  # "tier1", "boost-bound" or "tier2"

    @property
    def boost_short_circuit(self) -> bool:
        return self.tier == "boost-bound"


@dataclass
class EchelonModel:
    tier1: nn.ConvNetModel
    thd1: float
    target_fpr: float
    selection: Optional[ati.BiasSelection] = None
    mode: str = "semantic"
    tier2: Optional[nn.ConvNetModel] = None
    thd2: float = NEVER
    boosting_bound: Optional[float] = None
    section_vocab: dict = field(default_factory=dict)
    max_len: int = 1 << 20

    def __post_init__(self):
        if self.boosting_bound is not None and self.boosting_bound > self.thd1:
            self.boosting_bound = self.thd1

    @property
    def window(self) -> int:
        return self.tier1.hyper.window

    @property
    def has_tier2(self) -> bool:
        return self.tier2 is not None and self.selection is not None

    def tier2_inputs(self, samples: Sequence[PeSample], traces: Optional[Mapping] = None) -> list:
        if not self.has_tier2:
            return []
        W = self.tier2.hyper.window
        if traces is None and self.mode != "section":
            traces = ati.trace_samples(self.tier1, samples, self.max_len)
        return [transform(self.mode, s, self.selection, W,
                          None if traces is None else traces[s.id], self.section_vocab)
                for s in samples]

    def tier2_scores(self, samples: Sequence[PeSample], traces: Optional[Mapping] = None) -> np.ndarray:
        inputs = self.tier2_inputs(samples, traces)
        return nn.predict_scores(self.tier2, [x.example() for x in inputs])

    def decide(self, samples: Sequence[PeSample], tier1_scores=None) -> list:
        """Cascade decisions: Tier-1 positives are final, then the bound, then Tier-2."""
        if tier1_scores is None:
            tier1_scores = score_samples(self.tier1, samples, self.max_len)
        tier1_scores = np.asarray(tier1_scores, dtype=np.float64)
        out = [None] * len(samples)
        consult = []
        for i, (s, sc) in enumerate(zip(samples, tier1_scores)):
            if sc >= self.thd1:
                out[i] = Decision(s.id, MALWARE, float(sc), None, "tier1")
            elif self.boosting_bound is not None and sc < self.boosting_bound:
                out[i] = Decision(s.id, BENIGN, float(sc), None, "boost-bound")
            elif not self.has_tier2:
                out[i] = Decision(s.id, BENIGN, float(sc), None, "tier1")
            else:
                consult.append(i)
        if consult:
            sub = [samples[i] for i in consult]
            s2 = self.tier2_scores(sub)
            for i, sc2 in zip(consult, s2):
                lab = MALWARE if sc2 >= self.thd2 else BENIGN
                out[i] = Decision(samples[i].id, lab, float(tier1_scores[i]), float(sc2), "tier2")
        return out

    def predict(self, samples: Sequence[PeSample]) -> np.ndarray:
        return np.array([d.label for d in self.decide(samples)], dtype=int)

    # serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        sel = self.selection
        return {
            "schema": ECHELON_SCHEMA,
            "target_fpr": self.target_fpr,
            "max_len": self.max_len,
            "tier1": nn.model_to_dict(self.tier1),
            "thd1": self.thd1,
            "mode": self.mode,
            "s_bias": None if sel is None else {
                "names": list(sel.s_bias), "cutoff": sel.cutoff,
                "benign_side": list(sel.benign_side), "malware_side": list(sel.malware_side)},
            "section_vocab": dict(sorted(self.section_vocab.items())),
            "tier2": None if self.tier2 is None else nn.model_to_dict(self.tier2),
            "thd2": self.thd2,
            "boosting_bound": self.boosting_bound,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EchelonModel":
        if doc.get("schema") != ECHELON_SCHEMA:
            raise ModelFormatError(f"unknown model schema {doc.get('schema')!r}")
        if doc["mode"] not in MODES:
            raise ModelFormatError(f"unknown tier-2 mode {doc['mode']!r}")
        sb = doc.get("s_bias")
        sel = None if sb is None else ati.BiasSelection(
            tuple(sb["names"]), sb["cutoff"], tuple(sb["benign_side"]), tuple(sb["malware_side"]))
        return cls(
            tier1=nn.model_from_dict(doc["tier1"]),
            thd1=float(doc["thd1"]),
            target_fpr=float(doc["target_fpr"]),
            selection=sel,
            mode=doc["mode"],
            tier2=None if doc["tier2"] is None else nn.model_from_dict(doc["tier2"]),
            thd2=float(doc["thd2"]),
            boosting_bound=None if doc["boosting_bound"] is None else float(doc["boosting_bound"]),
            section_vocab={k: int(v) for k, v in doc["section_vocab"].items()},
            max_len=int(doc.get("max_len", 1 << 20)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def loads(cls, text: str) -> "EchelonModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "EchelonModel":
        with open(path, encoding="ascii") as fh:
            return cls.loads(fh.read())


# -------------------------------------------------------------- grid training


@dataclass
class Tier2Context:
    """Everything Tier-2 training needs from the Tier-1 stage."""

    b1_train: list  # PeSample
    b1_val: list
    train_scores: np.ndarray  # tier-1 scores aligned with b1_train
    val_scores: np.ndarray
    train_traces: dict
    val_traces: dict
    fp1_val: int
    n_neg_val: int
    boosting_bound: Optional[float] = None


@dataclass
class GridPoint:
    cutoff: int
    s_bias_size: int
    thd2: float
    val_tpr: float
    val_fpr: float
    new_tp: int
    new_fp: int
    model: Optional[nn.ConvNetModel] = field(default=None, repr=False)
    selection: Optional[ati.BiasSelection] = field(default=None, repr=False)
    vocab: dict = field(default_factory=dict, repr=False)


@dataclass
class Tier2Result:
    best: Optional[GridPoint]
    grid: list
    stats: Optional[ati.SectionStats]
    n_names: int


def boosting_enabled(setting: str, b1_labels) -> bool:
    if setting == "on":
        return True
    if setting == "off":
        return False
    labels = np.asarray(b1_labels)
    n_pos = int((labels == MALWARE).sum())
    n_neg = int((labels == BENIGN).sum())
    return max(n_pos, n_neg) > 3 * max(min(n_pos, n_neg), 1) if n_pos and n_neg else True


def _val_outcome(scores, labels, thd2, fp1, n_neg, n_pos_val, tp1):
    labels = np.asarray(labels)
    pos = np.asarray(scores) >= thd2
    new_tp = int((pos & (labels == MALWARE)).sum())
    new_fp = int((pos & (labels == BENIGN)).sum())
    tpr = (tp1 + new_tp) / n_pos_val if n_pos_val else 0.0
    fpr = (fp1 + new_fp) / n_neg if n_neg else 0.0
    return new_tp, new_fp, tpr, fpr


def train_tier2(ctx: Tier2Context, target_fpr: float, mode: str, config: RunConfig,
                tp1_val: int = 0, n_pos_val: Optional[int] = None,
                cutoffs: Optional[Sequence[int]] = None) -> Tier2Result:
    """Grid search over S_bias cut-offs; best overall validation TPR wins.

    Raises :class:`DegenerateClass` when the (bound-filtered) B1 training set
    lacks a class.
    """
    if mode not in MODES:
        raise ValueError(f"unknown tier-2 mode {mode!r}")
    keep = np.ones(len(ctx.b1_train), dtype=bool)
    if ctx.boosting_bound is not None:
        keep = np.asarray(ctx.train_scores) >= ctx.boosting_bound
    train_set = [s for s, k in zip(ctx.b1_train, keep) if k]
    labels = {s.id: s.label for s in train_set}
    stats = ati.compute_stats({s.id: ctx.train_traces[s.id] for s in train_set}, labels)

    if ctx.boosting_bound is not None:
        consulted = [i for i, sc in enumerate(ctx.val_scores) if sc >= ctx.boosting_bound]
    else:
        consulted = list(range(len(ctx.b1_val)))
    val_set = [ctx.b1_val[i] for i in consulted]
    val_labels = np.array([s.label for s in val_set], dtype=int)
    if n_pos_val is None:
        n_pos_val = tp1_val + int(sum(s.label == MALWARE for s in ctx.b1_val))

    n_names = len(stats.ar)
    if cutoffs is None:
        cutoffs = ati.cutoff_grid(n_names, config.cutoff_step, config.cutoff_max)
    grid = []
    W = config.window
    for gi, cutoff in enumerate(cutoffs):
        sel = ati.select_bias(stats, cutoff)
        vocab = section_vocab(sel)
        tr_in = [transform(mode, s, sel, W, ctx.train_traces.get(s.id), vocab) for s in train_set]
        va_in = [transform(mode, s, sel, W, ctx.val_traces.get(s.id), vocab) for s in val_set]
        hyper = hyper_from_config(config, semantic=(mode == "semantic"), n_sections=len(sel))
        model = nn.ConvNetModel.init(hyper, derive_seed(config.seed, STAGE_TIER2, gi, 0))
        tr_ex = [x.example() for x in tr_in]
        # Early stopping needs a validation signal; B1_val may lack a class, the loss still works.
        va_ex = [x.example() for x in va_in] or tr_ex
        cw = None
        if config.tier2_class_weight == "balanced":
            y = np.array([e.label for e in tr_ex])
            cw = {c: len(y) / (2.0 * max((y == c).sum(), 1)) for c in (BENIGN, MALWARE)}
        model, hist = nn.train(model, tr_ex, va_ex, batch_size=config.batch_size,
                               max_epochs=config.max_epochs, patience=config.patience,
                               lr=config.lr, seed=derive_seed(config.seed, STAGE_TIER2, gi, 1),
                               class_weight=cw)
        scores = nn.predict_scores(model, [x.example() for x in va_in]) if va_in else np.empty(0)
        thd2 = select_thd2(scores, val_labels, target_fpr, ctx.fp1_val, ctx.n_neg_val)
        new_tp, new_fp, tpr, fpr = _val_outcome(scores, val_labels, thd2, ctx.fp1_val,
                                                ctx.n_neg_val, n_pos_val, tp1_val)
        logger.info("cutoff %d |S_bias|=%d thd2=%.6g val TPR %.4f FPR %.4f (+%d TP, +%d FP, %d epochs)",
                    cutoff, len(sel), thd2, tpr, fpr, new_tp, new_fp, hist.epochs_run)
        grid.append(GridPoint(cutoff, len(sel), thd2, tpr, fpr, new_tp, new_fp, model, sel, vocab))
    best = None
    for g in grid:  # ascending cutoff, so ties keep the smaller one
        if best is None or g.val_tpr > best.val_tpr:
            best = g
    return Tier2Result(best, grid, stats, n_names)


def mean_input_size(inputs: Sequence[Tier2Input]) -> float:
    return float(np.mean([len(x.tokens) for x in inputs])) if inputs else math.nan
