"""Scikit-learn style estimator facade over the fusion network.

`ForgeryLocalizer` wraps model construction, training and prediction behind
the familiar ``fit`` / ``predict`` / ``get_params`` surface so the network
drops into sklearn-flavored tooling (grid search, cloning, pipelines that
pass through sample records). X is a list of
:class:`~forgefuse.data.SampleRecord` or a dataset directory path; ground
truth travels inside the records, so ``y`` is always None.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import SampleRecord, load_dataset
from .errors import DimensionError
from .metrics import evaluate, pixel_f1
from .model import FusionModel, ModelConfig
from .train import (AugmentConfig, TrainRunConfig, predict_records, train_run)


def _as_records(X) -> list[SampleRecord]:
    if isinstance(X, (str, Path)):
        return load_dataset(X)
    records = list(X)
    if not records:
        raise ValueError("X must contain at least one sample")
    for r in records:
        if not isinstance(r, SampleRecord):
            raise TypeError(f"expected SampleRecord items, got {type(r).__name__}")
    return records


class ForgeryLocalizer(BaseEstimator):
    """Forgery localization/detection estimator with a fit/predict surface.

    Parameters mirror the desk preset; ``fit`` trains the underlying
    network on labeled sample records, ``predict`` returns binary masks,
    ``predict_proba`` per-pixel tampering probabilities, and
    ``decision_function`` image-level detection scores.
    """

    def __init__(self, signal_names=("a", "b", "c"), height=64, width=64,
                 patch=8, dim=64, heads=4, depth=2, det_depth=2,
                 p_drop=0.2, epochs=30, batch_size=32, lr_max=1e-3,
                 seed=0, augment=True, threshold=0.5):
        self.signal_names = signal_names
        self.height = height
        self.width = width
        self.patch = patch
        self.dim = dim
        self.heads = heads
        self.depth = depth
        self.det_depth = det_depth
        self.p_drop = p_drop
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.seed = seed
        self.augment = augment
        self.threshold = threshold

    # -- sklearn plumbing ---------------------------------------------------

    def _build_config(self) -> ModelConfig:
        return ModelConfig(
            height=self.height, width=self.width, patch=self.patch,
            signal_names=tuple(self.signal_names), dim=self.dim,
            heads=self.heads, stream_depth=self.depth, fusion_depth=self.depth,
            context_depth=self.depth, det_depth=self.det_depth,
            p_drop=self.p_drop)

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this ForgeryLocalizer is not fitted yet; call fit first")

    def _validate_records(self, records: list[SampleRecord]) -> None:
        for r in records:
            if (r.height, r.width) != (self.height, self.width):
                raise DimensionError(
                    f"sample {r.name} is {(r.height, r.width)}, estimator "
                    f"expects {(self.height, self.width)}")
            missing = [n for n in self.signal_names if n not in r.signals]
            if missing:
                raise KeyError(f"sample {r.name} is missing signals {missing}")

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y=None) -> "ForgeryLocalizer":
        records = _as_records(X)
        self._validate_records(records)
        cfg = self._build_config()
        self.model_ = FusionModel(cfg, seed=self.seed)
        run_cfg = TrainRunConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            lr_max=self.lr_max,
            augment=AugmentConfig() if self.augment else AugmentConfig.none())
        result = train_run(records, self.model_, run_cfg)
        result.restore_best(self.model_)
        self.history_ = result.history
        self.best_val_f1_ = result.best_val_f1
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel tampering probabilities, shape (n, H, W)."""
        self._check_fitted()
        records = _as_records(X)
        self._validate_records(records)
        preds = predict_records(self.model_, records, self.batch_size)
        return np.stack([loc for loc, _ in preds])

    def predict(self, X) -> np.ndarray:
        """Binary localization masks, shape (n, H, W), uint8."""
        proba = self.predict_proba(X)
        return (proba >= self.threshold).astype(np.uint8)

    def decision_function(self, X) -> np.ndarray:
        """Image-level detection scores in (0, 1), shape (n,)."""
        self._check_fitted()
        records = _as_records(X)
        self._validate_records(records)
        preds = predict_records(self.model_, records, self.batch_size)
        return np.asarray([det for _, det in preds])

    def score(self, X, y=None) -> float:
        """Mean pixel F1 at the configured threshold."""
        records = _as_records(X)
        proba = self.predict_proba(records)
        return float(np.mean([
            pixel_f1(p, r.loc_mask, self.threshold)
            for p, r in zip(proba, records)]))

    def evaluate(self, X):
        """Full metric report (pixel/image F1 and AUC, best-threshold F1)."""
        self._check_fitted()
        records = _as_records(X)
        self._validate_records(records)
        preds = predict_records(self.model_, sorted(records, key=lambda r: r.name),
                                self.batch_size)
        it = iter(preds)
        return evaluate(lambda rec: next(it), records)
