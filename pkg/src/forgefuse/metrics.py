"""Localization and detection metrics, the averaging baseline, and the
evaluation harness.

Conventions: F1 is computed for the tampered class with ``pred >= threshold``;
an all-negative prediction against an all-negative ground truth scores 1
(authentic images correctly left unmarked). AUC uses the rank (Mann-Whitney)
formulation with midranks for ties and is undefined for single-class inputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, PreconditionError


def pixel_f1(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """F1 of the tampered class after thresholding the prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    p = pred >= threshold
    t = gt > 0.5
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 1.0


def auc(scores, labels) -> float | None:
    """P(score+ > score-) + 0.5 P(tie) via midrank sums.

    Returns None when only one class is present (undefined).
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1) > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def best_threshold_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    """Max F1 over thresholds at every distinct prediction value.

    The sweep also includes the empty-prediction threshold, so the result
    is never below the fixed-threshold F1.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1)
    gt = np.asarray(gt).reshape(-1) > 0.5
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    n_pos_total = int(gt.sum())
    order = np.argsort(-pred, kind="stable")
    sorted_pred = pred[order]
    tp_cum = np.cumsum(gt[order])
    idx = np.flatnonzero(np.diff(sorted_pred, append=-np.inf))  # last of each value
    tp = tp_cum[idx]
    pred_pos = idx + 1.0
    denom = pred_pos + n_pos_total
    with np.errstate(invalid="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / denom, 1.0)
    best = float(f1.max()) if f1.size else 0.0
    empty_f1 = 1.0 if n_pos_total == 0 else 0.0
    return max(best, empty_f1)


def avg_fusion(signals: list[np.ndarray]) -> np.ndarray:
    """Pixel-wise arithmetic mean of single-channel score maps."""
    if not signals:
        raise PreconditionError("avg_fusion needs at least one signal")
    ref = np.asarray(signals[0], dtype=np.float64)
    acc = ref.copy()
    for s in signals[1:]:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != ref.shape:
            raise DimensionError(f"signal shape {s.shape} != {ref.shape}")
        acc += s
    return (acc / len(signals)).astype(np.float32)


@dataclass
class EvalReport:
    """Aggregate metrics plus one row per sample."""

    pixel_f1: float
    pixel_auc: float | None
    image_f1: float
    image_auc: float | None
    pixel_f1_best: float
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "pixel_f1": self.pixel_f1,
            "pixel_auc": self.pixel_auc,
            "image_f1": self.image_f1,
            "image_auc": self.image_auc,
            "pixel_f1_best": self.pixel_f1_best,
            "n_samples": len(self.rows),
        }, indent=2, sort_keys=True)

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        if self.rows:
            with open(out / f"{stem}.csv", "w", newline="") as fp:
                writer = csv.DictWriter(fp, fieldnames=list(self.rows[0].keys()))
                writer.writeheader()
                writer.writerows(self.rows)


def evaluate(predict, samples, threshold: float = 0.5) -> EvalReport:
    """Score a predictor over a dataset.

    ``predict(record) -> (loc_map, det_score_or_None)``; when the detection
    score is None (methods without a detection head) the max of the
    localization map is used. Pixel AUC is computed per image and averaged
    over the images where it is defined.
    """
    samples = list(samples)
    if not samples:
        raise PreconditionError("cannot evaluate on an empty dataset")
    rows = []
    det_scores = []
    det_labels = []
    for rec in sorted(samples, key=lambda r: r.name):
        loc, det = predict(rec)
        loc = np.asarray(loc, dtype=float)
        if det is None:
            det = float(loc.max())
        gt = rec.loc_mask
        row = {
            "sample": rec.name,
            "det_label": int(rec.det_label),
            "det_score": float(det),
            "pixel_f1": pixel_f1(loc, gt, threshold),
            "pixel_f1_best": best_threshold_f1(loc, gt),
            "pixel_auc": auc(loc.reshape(-1), gt.reshape(-1)),
        }
        rows.append(row)
        det_scores.append(float(det))
        det_labels.append(int(rec.det_label))
    pix_f1 = float(np.mean([r["pixel_f1"] for r in rows]))
    pix_best = float(np.mean([r["pixel_f1_best"] for r in rows]))
    aucs = [r["pixel_auc"] for r in rows if r["pixel_auc"] is not None]
    pix_auc = float(np.mean(aucs)) if aucs else None
    img_pred = np.asarray(det_scores) >= threshold
    img_true = np.asarray(det_labels) > 0
    tp = int(np.count_nonzero(img_pred & img_true))
    fp = int(np.count_nonzero(img_pred & ~img_true))
    fn = int(np.count_nonzero(~img_pred & img_true))
    img_f1 = 1.0 if (tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
    return EvalReport(
        pixel_f1=pix_f1,
        pixel_auc=pix_auc,
        image_f1=float(img_f1),
        image_auc=auc(det_scores, det_labels),
        pixel_f1_best=pix_best,
        rows=rows,
    )


def overall_report(reports: dict[str, EvalReport]) -> dict[str, float | None]:
    """Unweighted mean of each aggregate metric across datasets."""
    if not reports:
        raise PreconditionError("no reports to combine")

    def mean_of(attr):
        vals = [getattr(r, attr) for r in reports.values()
                if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return {k: mean_of(k) for k in
            ("pixel_f1", "pixel_auc", "image_f1", "image_auc", "pixel_f1_best")}


def avg_fusion_predict(signal_names: list[str] | None = None):
    """Baseline predictor: mean of the sample's signals, max as detection."""
    from .data import signal_scores

    def predict(rec):
        names = signal_names if signal_names is not None else sorted(rec.signals)
        maps = [signal_scores(rec, n)[0] for n in names]
        fused = avg_fusion(maps)
        return fused, None

    return predict


def single_signal_predict(name: str):
    """Baseline predictor: one signal as-is, max as detection."""
    from .data import signal_scores

    def predict(rec):
        return signal_scores(rec, name)[0], None

    return predict
