"""Tier-1: full-sample model, FPR-locked threshold and the B1/M1 split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn_engine as nn
from .config import STAGE_TIER1, RunConfig, derive_seed
from .exceptions import DegenerateDataset
from .pe_format import BENIGN, MALWARE, PeSample

logger = logging.getLogger(__name__)

# Above every probability a sigmoid can emit: "never predict malware".
NEVER = float(np.nextafter(1.0, 2.0))


def sentinel_for(scores) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    top = float(np.nextafter(scores.max(), np.inf)) if scores.size else NEVER
    return max(NEVER, top)


def lock_threshold(scores, labels, target_fpr: float, *, base_fp: int = 0,
                   n_negatives: Optional[int] = None, strict: bool = False) -> float:
    """Smallest threshold ``t`` with ``(base_fp + FP(t)) / n_negatives <= target_fpr``.

    ``FP(t)`` counts benign entries of ``scores`` with ``score >= t``. The
    candidates are the distinct scores plus a sentinel above every score, so a
    feasible answer exists whenever ``base_fp`` alone respects the target; if
    it does not, the sentinel is returned. ``strict`` returns the smallest
    threshold admitting no new false positive at all.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    benign = np.sort(scores[labels == BENIGN])
    if n_negatives is None:
        n_negatives = base_fp + len(benign)
    sentinel = sentinel_for(scores)
    if n_negatives <= 0:
        raise DegenerateDataset("no benign samples to lock the FPR on")
    cands = np.append(np.unique(scores), sentinel)
    fp = base_fp + len(benign) - np.searchsorted(benign, cands, side="left")
    if strict:
        feasible = fp == base_fp
    else:
        feasible = fp / n_negatives <= target_fpr
    if not feasible.any():
        return sentinel
    return float(cands[np.argmax(feasible)])


def select_threshold_for_fpr(scores, labels, target_fpr: float, strict: bool = False) -> float:
    """Tier-1 threshold: maximise TPR subject to ``FPR <= target_fpr``."""
    labels = np.asarray(labels)
    if len(labels) == 0 or not (labels == BENIGN).any():
        raise DegenerateDataset("threshold selection needs at least one benign score")
    return lock_threshold(scores, labels, target_fpr, strict=strict)


def rates_at(scores, labels, threshold: float) -> tuple[float, float]:
    """``(tpr, fpr)`` with malware predicted when ``score >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores >= threshold
    n_pos = (labels == MALWARE).sum()
    n_neg = (labels == BENIGN).sum()
    tpr = float((pos & (labels == MALWARE)).sum() / n_pos) if n_pos else 0.0
    fpr = float((pos & (labels == BENIGN)).sum() / n_neg) if n_neg else 0.0
    return tpr, fpr


def full_examples(samples: Sequence[PeSample], window: int, max_len: Optional[int] = None):
    return [nn.Example(nn.pad_tokens(s.bytes, window, max_len), int(s.label or 0)) for s in samples]


def hyper_from_config(config: RunConfig, semantic: bool = False, n_sections: int = 0) -> nn.Hyper:
    return nn.Hyper(window=config.window, n_filters=config.n_filters, embed_dim=config.embed_dim,
                    hidden=config.hidden, semantic_aware=semantic, n_sections=n_sections)


def score_samples(model: nn.ConvNetModel, samples: Sequence[PeSample],
                  max_len: Optional[int] = None, batch_size: int = 64) -> np.ndarray:
    return nn.predict_scores(model, full_examples(samples, model.hyper.window, max_len), batch_size)


@dataclass
class TierOneResult:
    model: nn.ConvNetModel
    thd1: float
    train_scores: np.ndarray
    val_scores: np.ndarray
    b1_train: list
    m1_train: list
    b1_val: list
    m1_val: list
    tier1_tpr: float
    tier1_fpr: float
    history: Optional[nn.TrainHistory] = field(default=None, repr=False)


def partition(samples: Sequence[PeSample], scores, threshold: float) -> tuple[list, list]:
    """Ids predicted benign (score below threshold) and malware."""
    b1 = [s.id for s, sc in zip(samples, scores) if sc < threshold]
    m1 = [s.id for s, sc in zip(samples, scores) if sc >= threshold]
    return b1, m1


def run_tier1(train: Sequence[PeSample], val: Sequence[PeSample], target_fpr: float,
              config: RunConfig, model: Optional[nn.ConvNetModel] = None) -> TierOneResult:
    for name, part in (("training", train), ("validation", val)):
        labs = {s.label for s in part}
        if not part or labs != {BENIGN, MALWARE}:
            raise DegenerateDataset(f"{name} set must contain both classes")
    if model is None:
        model = nn.ConvNetModel.init(hyper_from_config(config), derive_seed(config.seed, STAGE_TIER1, 0))
        train_ex = full_examples(train, config.window, config.max_len)
        val_ex = full_examples(val, config.window, config.max_len)
        model, history = nn.train(model, train_ex, val_ex, batch_size=config.batch_size,
                                  max_epochs=config.max_epochs, patience=config.patience,
                                  lr=config.lr, seed=derive_seed(config.seed, STAGE_TIER1, 1))
        logger.info("tier-1 trained for %d epochs (best %d)", history.epochs_run, history.best_epoch)
    else:
        history = None
    train_scores = score_samples(model, train, config.max_len, config.batch_size)
    val_scores = score_samples(model, val, config.max_len, config.batch_size)
    val_labels = np.array([s.label for s in val])
    thd1 = select_threshold_for_fpr(val_scores, val_labels, target_fpr, strict=config.strict_threshold)
    tpr, fpr = rates_at(val_scores, val_labels, thd1)
    b1_train, m1_train = partition(train, train_scores, thd1)
    b1_val, m1_val = partition(val, val_scores, thd1)
    return TierOneResult(model, thd1, train_scores, val_scores, b1_train, m1_train,
                         b1_val, m1_val, tpr, fpr, history)
