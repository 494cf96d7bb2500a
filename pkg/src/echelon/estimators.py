"""scikit-learn compatible front ends.

``ConvNetClassifier`` wraps the gated-conv network on its own;
``EchelonClassifier`` runs the whole two-tier training; ``Tier2Transformer``
turns samples into Tier-2 inputs for a fixed S_bias.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import ati, nn_engine as nn
from ._validation import (attach_labels, check_both_classes, check_fraction, check_labels,
                          check_samples, unique_ids)
from .config import RunConfig
from .pe_format import MALWARE, PeSample
from .pipeline import fit_echelon, split
from .tier1 import select_threshold_for_fpr
from .tier2 import EchelonModel, Tier2Input, section_vocab, transform


def _to_example(x, window: int, label: int = 0) -> nn.Example:
    if isinstance(x, Tier2Input):
        return nn.Example(x.tokens, label, x.section_ids)
    if isinstance(x, PeSample):
        return nn.Example(nn.pad_tokens(x.bytes, window), label)
    if isinstance(x, (bytes, bytearray)):
        return nn.Example(nn.pad_tokens(x, window), label)
    arr = np.asarray(x)
    if arr.dtype.kind in "iu" and arr.ndim == 1:
        if len(arr) % window:
            arr = np.concatenate([arr, np.full(-len(arr) % window, nn.PAD, dtype=arr.dtype)])
        return nn.Example(arr.astype(np.uint16), label)
    raise TypeError(f"cannot turn {type(x).__name__} into a token sequence")


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Gated-conv byte classifier with early stopping.

    ``X`` may hold :class:`PeSample`, raw ``bytes``, integer token arrays or
    :class:`Tier2Input`. When no explicit validation set is passed to
    :meth:`fit`, ``validation_fraction`` of the data is held out for early
    stopping.
    """

    def __init__(self, window=64, n_filters=32, embed_dim=8, hidden=128, semantic_aware=False,
                 n_sections=0, batch_size=64, lr=1e-3, max_epochs=50, patience=5,
                 validation_fraction=0.2, target_fpr=None, random_state=0):
        self.window = window
        self.n_filters = n_filters
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.semantic_aware = semantic_aware
        self.n_sections = n_sections
        self.batch_size = batch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.target_fpr = target_fpr
        self.random_state = random_state

    def _examples(self, X, y=None):
        y = np.zeros(len(X), dtype=int) if y is None else y
        return [_to_example(x, self.window, int(v)) for x, v in zip(X, y)]

    def fit(self, X, y, X_val=None, y_val=None):
        y = np.asarray(y).astype(int)
        check_both_classes(y)
        seed = int(self.random_state or 0)
        if X_val is None:
            check_fraction(self.validation_fraction, "validation_fraction", 0.0, 0.5)
            rng = np.random.default_rng(seed)
            idx = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val_idx, tr_idx = np.sort(idx[:n_val]), np.sort(idx[n_val:])
            X_val, y_val = [X[i] for i in val_idx], y[val_idx]
            X, y = [X[i] for i in tr_idx], y[tr_idx]
        hyper = nn.Hyper(self.window, self.n_filters, self.embed_dim, self.hidden,
                         self.semantic_aware, self.n_sections)
        model = nn.ConvNetModel.init(hyper, seed)
        self.model_, self.history_ = nn.train(
            model, self._examples(X, y), self._examples(X_val, np.asarray(y_val).astype(int)),
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            lr=self.lr, seed=seed + 1)
        self.classes_ = np.array([0, 1])
        self.threshold_ = 0.5
        if self.target_fpr is not None:
            self.threshold_ = select_threshold_for_fpr(
                self.predict_proba(X_val)[:, 1], np.asarray(y_val).astype(int), self.target_fpr)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = nn.predict_scores(self.model_, self._examples(X), self.batch_size)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold_).astype(int)


class Tier2Transformer(TransformerMixin, BaseEstimator):
    """Samples to Tier-2 inputs for one S_bias selection.

    ``block`` and ``semantic`` need the Tier-1 model to trace top activations.
    """

    def __init__(self, selection=None, mode="section", window=64, tier1=None, max_len=None):
        self.selection = selection
        self.mode = mode
        self.window = window
        self.tier1 = tier1
        self.max_len = max_len

    def fit(self, X=None, y=None):
        if self.selection is None:
            raise ValueError("selection is required")
        if self.mode != "section" and self.tier1 is None:
            raise ValueError(f"{self.mode} mode needs the tier-1 model")
        self.vocab_ = section_vocab(self.selection)
        return self

    def transform(self, X) -> list:
        check_is_fitted(self, "vocab_")
        samples = check_samples(X)
        traces = None
        if self.mode != "section":
            traces = ati.trace_samples(self.tier1, samples, self.max_len)
        return [transform(self.mode, s, self.selection, self.window,
                          None if traces is None else traces[s.id], self.vocab_)
                for s in samples]


class EchelonClassifier(ClassifierMixin, BaseEstimator):
    """Two-tier malware classifier with a locked false-positive rate.

    ``fit`` holds out ``validation_fraction`` of the samples (stratified) to
    pick both thresholds unless ``X_val`` is given. Positive predictions of
    Tier-1 are final; Tier-2 re-examines what Tier-1 called benign.
    """

    def __init__(self, target_fpr=0.01, window=64, n_filters=32, embed_dim=8, hidden=128,
                 batch_size=64, lr=1e-3, max_epochs=50, patience=5, mode="semantic",
                 cutoff_step=0.1, cutoff_max=0.5, boosting="auto", validation_fraction=0.2,
                 strict_threshold=False, tier2_class_weight=None, max_len=1 << 20, random_state=0):
        self.target_fpr = target_fpr
        self.window = window
        self.n_filters = n_filters
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.batch_size = batch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.mode = mode
        self.cutoff_step = cutoff_step
        self.cutoff_max = cutoff_max
        self.boosting = boosting
        self.validation_fraction = validation_fraction
        self.strict_threshold = strict_threshold
        self.tier2_class_weight = tier2_class_weight
        self.max_len = max_len
        self.random_state = random_state

    def _config(self) -> RunConfig:
        vf = check_fraction(self.validation_fraction, "validation_fraction", 0.0, 0.5)
        return RunConfig(
            target_fpr=self.target_fpr, window=self.window, n_filters=self.n_filters,
            embed_dim=self.embed_dim, hidden=self.hidden, batch_size=self.batch_size,
            lr=self.lr, max_epochs=self.max_epochs, patience=self.patience,
            cutoff_step=self.cutoff_step, cutoff_max=self.cutoff_max, mode=self.mode,
            boosting=self.boosting, train_frac=1 - vf, val_frac=vf / 2, test_frac=vf / 2,
            seed=int(self.random_state or 0), max_len=self.max_len,
            strict_threshold=self.strict_threshold, tier2_class_weight=self.tier2_class_weight)

    def fit(self, X, y=None, X_val=None, y_val=None):
        config = self._config()
        samples = unique_ids(check_samples(X))
        y = check_labels(samples, y)
        check_both_classes(y)
        samples = attach_labels(samples, y)
        if X_val is None:
            vf = self.validation_fraction
            train, val, _ = split(samples, (1 - vf, vf, 0.0), config.seed)
        else:
            val = unique_ids(check_samples(X_val))
            val = attach_labels(val, check_labels(val, y_val))
            train = samples
        self.model_, self.fit_info_ = fit_echelon(train, val, config)
        self.classes_ = np.array([0, 1])
        return self

    @classmethod
    def from_model(cls, model: EchelonModel) -> "EchelonClassifier":
        est = cls(target_fpr=model.target_fpr, window=model.window, mode=model.mode)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est

    def decide(self, X) -> list:
        check_is_fitted(self, "model_")
        return self.model_.decide(check_samples(X))

    def predict(self, X):
        return np.array([d.label for d in self.decide(X)], dtype=int)

    def decision_function(self, X):
        """Score of the deciding tier (Tier-2 score when it was consulted)."""
        return np.array([d.tier2_score if d.tier2_score is not None else d.tier1_score
                         for d in self.decide(X)])

    @property
    def thresholds_(self) -> tuple:
        check_is_fitted(self, "model_")
        return self.model_.thd1, self.model_.thd2

    def tier_of(self, X) -> list:
        return [d.tier for d in self.decide(X)]

    def malware_mask(self, X) -> np.ndarray:
        return self.predict(X) == MALWARE
