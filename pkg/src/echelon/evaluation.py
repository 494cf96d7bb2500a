"""Two-tier confusion bookkeeping and the overall TPR/FPR."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .exceptions import NoNegatives, NoPositives
from .pe_format import BENIGN, MALWARE, PeSample


@dataclass
class TwoTierConfusion:
    """Outcome counts of a cascade.

    Tier-1 only ever finalises positives, so it contributes ``fp1``/``tp1``;
    everything else is settled downstream (``tn2``, ``fn2``, ``fp2``, ``tp2``),
    including samples short-circuited by the boosting bound. Counts may be
    fractional when they are means over folds.
    """

    fp1: float = 0
    tp1: float = 0
    tn2: float = 0
    fn2: float = 0
    fp2: float = 0
    tp2: float = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @property
    def negatives(self):
        return self.fp1 + self.fp2 + self.tn2

    @property
    def positives(self):
        return self.tp1 + self.tp2 + self.fn2

    def to_dict(self) -> dict:
        return asdict(self)


def overall_fpr(c: TwoTierConfusion) -> float:
    """Share of negatives flagged by either tier."""
    if c.negatives <= 0:
        raise NoNegatives("overall FPR undefined without negatives")
    return (c.fp1 + c.fp2) / (c.fp1 + c.fp2 + c.tn2)


def overall_tpr(c: TwoTierConfusion) -> float:
    if c.positives <= 0:
        raise NoPositives("overall TPR undefined without positives")
    return (c.tp1 + c.tp2) / (c.tp1 + c.tp2 + c.fn2)


def tier1_rates(c: TwoTierConfusion) -> tuple[float, float]:
    """TPR and FPR of Tier-1 alone on the same samples."""
    return c.tp1 / c.positives, c.fp1 / c.negatives


def ratio_sensitive_metrics(c: TwoTierConfusion) -> dict:
    """Accuracy and precision, which unlike TPR/FPR move with the class ratio."""
    tp, fp = c.tp1 + c.tp2, c.fp1 + c.fp2
    total = c.positives + c.negatives
    return {
        "accuracy": (tp + c.tn2) / total if total else float("nan"),
        "precision": tp / (tp + fp) if tp + fp else float("nan"),
        "warning": "depends on the benign/malware ratio of the evaluated set",
    }


def confusion_from_decisions(decisions: Sequence, labels: Sequence[int]) -> TwoTierConfusion:
    c = TwoTierConfusion()
    for d, y in zip(decisions, labels):
        if d.tier == "tier1" and d.label == MALWARE:
            if y == MALWARE:
                c.tp1 += 1
            else:
                c.fp1 += 1
        elif d.label == MALWARE:
            if y == MALWARE:
                c.tp2 += 1
            else:
                c.fp2 += 1
        elif y == MALWARE:
            c.fn2 += 1
        else:
            c.tn2 += 1
    return c


@dataclass
class EvaluationResult:
    confusion: TwoTierConfusion
    decisions: list
    errors: list  # (id or path, reason) for samples that could not be scored

    @property
    def overall_fpr(self) -> float:
        return overall_fpr(self.confusion)

    @property
    def overall_tpr(self) -> float:
        return overall_tpr(self.confusion)


def evaluate(model, dataset: Sequence[PeSample], tier1_scores=None) -> EvaluationResult:
    """Run the cascade over labelled samples and tally the confusion counts."""
    samples = [s for s in dataset if s.label in (BENIGN, MALWARE)]
    errors = [(s.id, "unlabelled") for s in dataset if s.label not in (BENIGN, MALWARE)]
    decisions = model.decide(samples, tier1_scores)
    return EvaluationResult(confusion_from_decisions(decisions, [s.label for s in samples]),
                            decisions, errors)


REPORT_COLUMNS = ("run", "tier1_tpr", "tier1_fpr", "overall_tpr", "overall_fpr",
                  "new_tp_tier2", "new_fp_tier2", "s_bias_size", "n_sections",
                  "tier1_seconds", "tier2_seconds")


def report_row(run: str, c: TwoTierConfusion, s_bias_size: int, n_sections: int,
               tier1_seconds: float = float("nan"), tier2_seconds: float = float("nan")) -> dict:
    t1_tpr, t1_fpr = tier1_rates(c)
    return {
        "run": run,
        "tier1_tpr": t1_tpr,
        "tier1_fpr": t1_fpr,
        "overall_tpr": overall_tpr(c),
        "overall_fpr": overall_fpr(c),
        "new_tp_tier2": c.tp2,
        "new_fp_tier2": c.fp2,
        "s_bias_size": s_bias_size,
        "n_sections": n_sections,
        "tier1_seconds": tier1_seconds,
        "tier2_seconds": tier2_seconds,
    }


def aggregate_rows(rows: Sequence[dict]) -> list:
    """Mean and standard deviation rows over folds (numeric columns only)."""
    out = []
    for name, fn in (("mean", np.mean), ("std", np.std)):
        agg = {"run": name}
        for col in REPORT_COLUMNS[1:]:
            agg[col] = float(fn([r[col] for r in rows]))
        out.append(agg)
    return out


def rows_to_csv(rows: Sequence[dict], columns=REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def rows_to_table(rows: Sequence[dict], columns=REPORT_COLUMNS) -> str:
    """Fixed-width text table; rates in percent."""
    pct = {"tier1_tpr", "tier1_fpr", "overall_tpr", "overall_fpr"}
    header = [c.replace("_", " ") for c in columns]
    body = []
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c, "")
            if c in pct:
                cells.append(f"{100 * v:.2f}")
            elif isinstance(v, float):
                cells.append(f"{v:.2f}")
            else:
                cells.append(str(v))
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(x.rjust(w) for x, w in zip(cells, widths))
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(b) for b in body])
