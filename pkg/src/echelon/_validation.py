"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .exceptions import DegenerateDataset
from .pe_format import BENIGN, MALWARE, PeSample, parse_pe


def check_samples(X, parse: bool = True) -> list:
    """Coerce ``X`` to a list of :class:`PeSample`.

    Raw ``bytes`` entries are parsed (ids become their position) when
    ``parse`` is true.
    """
    if isinstance(X, (bytes, bytearray, PeSample)):
        raise TypeError("expected a sequence of samples, got a single sample")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, PeSample):
            out.append(x)
        elif parse and isinstance(x, (bytes, bytearray)):
            out.append(parse_pe(x, None, str(i)))
        else:
            raise TypeError(f"element {i} is {type(x).__name__}, not a PeSample")
    if not out:
        raise ValueError("empty sample list")
    return out


def check_labels(samples: Sequence[PeSample], y=None) -> np.ndarray:
    """Binary labels from ``y`` or, failing that, from the samples themselves."""
    if y is None:
        y = [s.label for s in samples]
        if any(v is None for v in y):
            raise ValueError("samples are unlabelled and no y was given")
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(samples):
        raise ValueError(f"y has shape {y.shape}, expected ({len(samples)},)")
    if not np.isin(y, (BENIGN, MALWARE)).all():
        raise ValueError("labels must be 0 (benign) or 1 (malware)")
    return y.astype(int)


def attach_labels(samples: Sequence[PeSample], y: np.ndarray) -> list:
    return [s if s.label == int(v) else s.with_label(int(v)) for s, v in zip(samples, y)]


def check_both_classes(y, what: str = "training set") -> None:
    if len(np.unique(y)) < 2:
        raise DegenerateDataset(f"{what} contains a single class")


def unique_ids(samples: Sequence[PeSample]) -> list:
    """Samples with duplicate or empty ids renamed by position."""
    seen = set()
    if all(s.id and s.id not in seen and not seen.add(s.id) for s in samples):
        return list(samples)
    return [s.with_label(s.label, f"{i:06d}:{s.id}") for i, s in enumerate(samples)]


def check_fraction(value: float, name: str, low: float = 0.0, high: float = 1.0,
                   closed_low: bool = False) -> Optional[float]:
    ok = (low <= value if closed_low else low < value) and value <= high
    if not ok:
        raise ValueError(f"{name}={value} outside the allowed range")
    return value
