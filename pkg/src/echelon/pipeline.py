"""End-to-end orchestration: split, Tier-1, ATI, Tier-2 grid, evaluation, persistence."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold

from . import ati, evaluation as ev
from .config import STAGE_SPLIT, RunConfig, derive_seed
from .corpus import load_unlabeled
from .exceptions import DegenerateClass
from .pe_format import BENIGN, MALWARE, PeSample
from .tier1 import TierOneResult, run_tier1, score_samples
from .tier2 import EchelonModel, Tier2Context, Tier2Result, boosting_enabled, compute_boosting_bound, train_tier2

logger = logging.getLogger(__name__)

DETERMINISTIC_COLUMNS = tuple(c for c in ev.REPORT_COLUMNS if not c.endswith("_seconds"))


def split(dataset: Sequence[PeSample], ratios=(0.64, 0.16, 0.20), seed: int = 0):
    """Stratified ``(train, val, test)`` split; each part keeps the input order."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if abs(ratios.sum() - 1) > 1e-9:
        raise ValueError("ratios must sum to 1")
    labels = np.array([s.label for s in dataset])
    if not ((labels == BENIGN).any() and (labels == MALWARE).any()):
        raise DegenerateClass("split needs both classes")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(dataset), dtype=int)
    for cls in (BENIGN, MALWARE):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_train = int(round(ratios[0] * n))
        n_val = int(round((ratios[0] + ratios[1]) * n)) - n_train
        assign[idx[:n_train]] = 0
        assign[idx[n_train:n_train + n_val]] = 1
        assign[idx[n_train + n_val:]] = 2
    parts = tuple([s for s, a in zip(dataset, assign) if a == k] for k in range(3))
    return parts


@dataclass
class FitInfo:
    tier1: TierOneResult
    tier2: Optional[Tier2Result]
    degenerate: bool
    tier1_seconds: float
    tier2_seconds: float
    boosting_bound: Optional[float] = None


def fit_echelon(train: Sequence[PeSample], val: Sequence[PeSample], config: RunConfig):
    """Train both tiers; falls back to a Tier-1-only model when B1 lacks a class."""
    t0 = time.perf_counter()
    t1 = run_tier1(train, val, config.target_fpr, config)
    tier1_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    by_id_train = {s.id: s for s in train}
    by_id_val = {s.id: s for s in val}
    b1_train = [by_id_train[i] for i in t1.b1_train]
    b1_val = [by_id_val[i] for i in t1.b1_val]
    train_score = dict(zip((s.id for s in train), t1.train_scores))
    val_score = dict(zip((s.id for s in val), t1.val_scores))
    val_labels = np.array([s.label for s in val])
    m1_val = set(t1.m1_val)
    fp1_val = sum(1 for s in val if s.id in m1_val and s.label == BENIGN)
    tp1_val = sum(1 for s in val if s.id in m1_val and s.label == MALWARE)
    n_neg_val = int((val_labels == BENIGN).sum())
    n_pos_val = int((val_labels == MALWARE).sum())

    bound = None
    if boosting_enabled(config.boosting, [s.label for s in b1_train]):
        bound = min(compute_boosting_bound(t1.val_scores[val_labels == MALWARE]), t1.thd1)

    model = EchelonModel(t1.model, t1.thd1, config.target_fpr, mode=config.mode,
                         boosting_bound=bound, max_len=config.max_len)
    degenerate = False
    t2 = None
    try:
        traces_train = ati.trace_samples(t1.model, b1_train, config.max_len, config.batch_size)
        traces_val = ati.trace_samples(t1.model, b1_val, config.max_len, config.batch_size)
        ctx = Tier2Context(b1_train, b1_val,
                           np.array([train_score[s.id] for s in b1_train]),
                           np.array([val_score[s.id] for s in b1_val]),
                           traces_train, traces_val, fp1_val, n_neg_val, bound)
        t2 = train_tier2(ctx, config.target_fpr, config.mode, config, tp1_val, n_pos_val)
        best = t2.best
        model.selection = best.selection
        model.tier2 = best.model
        model.thd2 = best.thd2
        model.section_vocab = dict(best.vocab)
    except DegenerateClass as exc:
        logger.warning("tier-2 unavailable (%s); keeping the tier-1-only model", exc)
        degenerate = True
    tier2_seconds = time.perf_counter() - t0
    return model, FitInfo(t1, t2, degenerate, tier1_seconds, tier2_seconds, bound)


@dataclass
class RunResult:
    model: EchelonModel
    rows: list
    evaluation: ev.EvaluationResult
    info: FitInfo
    fold_results: list = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return self.info.degenerate or any(f.info.degenerate for f in self.fold_results)


def _row(run: str, model: EchelonModel, info: FitInfo, result: ev.EvaluationResult) -> dict:
    n_names = info.tier2.n_names if info.tier2 is not None else 0
    s_bias = len(model.selection) if model.selection is not None else 0
    return ev.report_row(run, result.confusion, s_bias, n_names, info.tier1_seconds, info.tier2_seconds)


def _run_single(config: RunConfig, train, val, test, run: str) -> RunResult:
    model, info = fit_echelon(train, val, config)
    result = ev.evaluate(model, test)
    return RunResult(model, [_row(run, model, info, result)], result, info)


def run_full(config: RunConfig, dataset: Sequence[PeSample], out_dir=None) -> RunResult:
    """Train and evaluate the cascade on a (train:val):test split, optionally with k-fold refolding.

    With ``folds > 1`` the test part stays fixed and train+val is refolded; the
    returned model is the first fold's, the rows hold every fold plus mean/std.
    """
    train, val, test = split(dataset, config.ratios, derive_seed(config.seed, STAGE_SPLIT))
    if config.folds == 1:
        res = _run_single(config, train, val, test, "run")
    else:
        pool = sorted(train + val, key=lambda s: s.id)
        y = np.array([s.label for s in pool])
        skf = StratifiedKFold(config.folds, shuffle=True,
                              random_state=derive_seed(config.seed, STAGE_SPLIT, 1) % (2 ** 31))
        folds = []
        for k, (tr_idx, va_idx) in enumerate(skf.split(np.zeros(len(y)), y)):
            fold_cfg = config.replace(seed=derive_seed(config.seed, STAGE_SPLIT, 2, k) % (2 ** 31))
            folds.append(_run_single(fold_cfg, [pool[i] for i in tr_idx], [pool[i] for i in va_idx],
                                     test, f"fold{k}"))
        rows = [f.rows[0] for f in folds]
        rows += ev.aggregate_rows(rows)
        res = RunResult(folds[0].model, rows, folds[0].evaluation, folds[0].info, folds)
    if out_dir is not None:
        write_outputs(res, out_dir)
    return res


def write_outputs(res: RunResult, out_dir) -> None:
    """model.json, report.csv/.txt and confusion.json are seed-deterministic; timings.csv is not."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.model.save(out / "model.json")
    (out / "report.csv").write_text(ev.rows_to_csv(res.rows, DETERMINISTIC_COLUMNS))
    (out / "report.txt").write_text(ev.rows_to_table(res.rows, DETERMINISTIC_COLUMNS) + "\n")
    (out / "timings.csv").write_text(ev.rows_to_csv(res.rows, ("run", "tier1_seconds", "tier2_seconds")))
    runs = res.fold_results or [res]
    doc = {f.rows[0]["run"]: f.evaluation.confusion.to_dict() for f in runs}
    (out / "confusion.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    if res.info.tier2 is not None and res.info.tier2.stats is not None:
        (out / "ati.csv").write_text(res.info.tier2.stats.to_csv())


def decisions_to_rows(decisions) -> list:
    return [{
        "id": d.sample_id,
        "label": "malware" if d.label == MALWARE else "benign",
        "tier1_score": d.tier1_score,
        "tier2_score": d.tier2_score,
        "tier": d.tier,
        "boost_short_circuit": d.boost_short_circuit,
    } for d in decisions]


def predict(model_file, sample_files: Sequence) -> tuple[list, list]:
    """Score loose files with a saved model; returns ``(rows, errors)``."""
    model = EchelonModel.load(model_file)
    samples, errors = load_unlabeled(sample_files)
    return decisions_to_rows(model.decide(samples)) if samples else [], errors


def sweep_filter_width(config: RunConfig, dataset: Sequence[PeSample], widths: Sequence[int]) -> list:
    """One ``run_full`` per window width; failures are recorded, not raised."""
    rows = []
    for w in widths:
        if w <= 0:
            raise ValueError("widths must be positive")
        t0 = time.perf_counter()
        try:
            res = run_full(config.replace(window=int(w)), dataset)
        except Exception as exc:  # isolate per-width failures
            logger.error("width %d failed: %s", w, exc)
            rows.append({"width": int(w), "error": str(exc)})
            continue
        row = dict(res.rows[0] if config.folds == 1 else res.rows[-2])
        row.update(width=int(w), seconds=time.perf_counter() - t0,
                   mean_windows=float(np.mean([-(-len(s) // w) for s in dataset])), error="")
        rows.append(row)
    return rows


SWEEP_COLUMNS = ("width", "mean_windows", "new_tp_tier2", "new_fp_tier2", "s_bias_size",
                 "tier1_tpr", "overall_tpr", "overall_fpr", "seconds", "error")


def probe_scores(model: EchelonModel, samples: Sequence[PeSample]) -> list:
    """Tier-1 scores plus decisions; handy for round-trip checks."""
    s1 = score_samples(model.tier1, samples, model.max_len)
    return [(d.label, d.tier, d.tier1_score, d.tier2_score) for d in model.decide(samples, s1)]
