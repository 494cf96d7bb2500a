"""Run configuration, presets and seed derivation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

MODES = ("section", "block", "semantic")


def derive_seed(master: int, *path: int) -> int:
    """Child seed for stage ``path`` (e.g. ``(2, grid_index)``) of a run.

    ``SeedSequence([master, *path])`` hashes the index path, so sibling stages
    get independent streams no matter in which order they execute.
    """
    return int(np.random.SeedSequence([master, *path]).generate_state(1, dtype=np.uint32)[0])


# Stage indices for derive_seed.
STAGE_SPLIT, STAGE_TIER1, STAGE_TIER2 = 0, 1, 2


@dataclass
class RunConfig:
    target_fpr: float = 0.001
    window: int = 64
    n_filters: int = 32
    embed_dim: int = 8
    hidden: int = 128
    batch_size: int = 64
    lr: float = 0.001
    max_epochs: int = 200
    patience: int = 5
    cutoff_step: float = 0.02
    cutoff_max: float = 0.5
    mode: str = "semantic"
    # "auto" enables the boosting bound when B1_train is more imbalanced than 3:1.
    boosting: str = "auto"
    train_frac: float = 0.64
    val_frac: float = 0.16
    test_frac: float = 0.20
    folds: int = 1
    seed: int = 0
    max_len: int = 1 << 20
    strict_threshold: bool = False
    tier2_class_weight: Optional[str] = None

    def __post_init__(self):
        # YAML 1.1 reads bare on/off as booleans
        if isinstance(self.boosting, bool):
            self.boosting = "on" if self.boosting else "off"
        self.validate()

    def validate(self) -> None:
        if not 0 < self.target_fpr <= 1:
            raise ValueError(f"target_fpr must lie in (0, 1], got {self.target_fpr}")
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if min(self.train_frac, self.val_frac, self.test_frac) <= 0:
            raise ValueError("split fractions must be positive")
        for name in ("window", "n_filters", "embed_dim", "hidden", "batch_size",
                     "max_epochs", "folds", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.boosting not in ("auto", "on", "off"):
            raise ValueError("boosting must be auto, on or off")
        if not 0 < self.cutoff_step <= self.cutoff_max <= 0.5:
            raise ValueError("need 0 < cutoff_step <= cutoff_max <= 0.5")
        if self.tier2_class_weight not in (None, "balanced"):
            raise ValueError("tier2_class_weight must be null or 'balanced'")

    @property
    def ratios(self) -> tuple:
        return self.train_frac, self.val_frac, self.test_frac

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known - {"preset"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = PRESETS[doc.get("preset", "desk")]
        return base.replace(**{k: v for k, v in doc.items() if k != "preset"})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(doc)


PRESETS = {
    "desk": RunConfig(target_fpr=0.01, window=64, n_filters=32, max_epochs=50, patience=5,
                      cutoff_step=0.1),
    "full": RunConfig(target_fpr=0.001, window=500, n_filters=128, embed_dim=8, hidden=128,
                       batch_size=64, lr=0.001, max_epochs=200, patience=5, cutoff_step=0.02,
                       folds=5),
}
