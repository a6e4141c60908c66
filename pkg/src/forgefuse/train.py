"""Training loop, augmentations, validation, and stream expansion.

Every source of randomness in a run derives from the run seed: the train/val
split, each epoch's shuffle, the augmentation draws and the stream-drop
draws. Two runs with the same seed and data produce identical logs and
checkpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, PreconditionError
from . import tensor as T
from .checkpoint import Checkpoint, load_into_model, save_checkpoint
from .data import SampleRecord, image_planes, signal_scores
from .losses import LossWeights, total_loss
from .metrics import auc, pixel_f1
from .model import FusionModel, ModelConfig
from .objects import mask_for_image
from .optim import SgdMomentum, lr_schedule


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    crop: bool = True
    resize: bool = True
    crop_scale: tuple[float, float] = (0.7, 1.0)
    resize_scale: tuple[float, float] = (0.75, 1.25)

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(flip=False, rotate=False, crop=False, resize=False)


@dataclass
class TrainRunConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_epochs: float = 5.0
    momentum: float = 0.9
    val_fraction: float = 0.1
    p_drop: float | None = None          # None = model config value
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0            # extra epoch checkpoints; 0 = off

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


# -- augmentation --------------------------------------------------------------


def _resize_nearest(plane: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = plane.shape[:2]
    yi = np.minimum((np.arange(oh) * (h / oh)).astype(int), h - 1)
    xi = np.minimum((np.arange(ow) * (w / ow)).astype(int), w - 1)
    return plane[yi][:, xi]


def _pad_to(plane: np.ndarray, oh: int, ow: int, edge: bool) -> np.ndarray:
    h, w = plane.shape[:2]
    pads = [(0, oh - h), (0, ow - w)] + [(0, 0)] * (plane.ndim - 2)
    return np.pad(plane, pads, mode="edge" if edge else "constant")


def augment_record(rec: SampleRecord, rng: np.random.Generator,
                   cfg: AugmentConfig) -> SampleRecord:
    """Apply one random draw of the configured augmentations.

    The same geometric transform hits the image, every signal, the ground
    truth and the segmentation maps; the detection label is recomputed from
    the transformed mask (a crop can remove the tampered region entirely).
    """
    h, w = rec.height, rec.width
    planes: dict[str, np.ndarray] = {"image": rec.image, "loc": rec.loc_mask}
    for name, arr in rec.signals.items():
        planes["sig:" + name] = arr if arr.ndim == 2 else arr.transpose(1, 2, 0)
    seg_hw = [rec.seg.maps[i] for i in range(rec.seg.count)]

    def apply_all(fn):
        for key in planes:
            planes[key] = fn(planes[key])
        for i in range(len(seg_hw)):
            seg_hw[i] = fn(seg_hw[i])

    if cfg.flip:
        if rng.random() < 0.5:
            apply_all(lambda p: p[:, ::-1])
        if rng.random() < 0.5:
            apply_all(lambda p: p[::-1])
    if cfg.rotate:
        k = int(rng.integers(0, 4))
        if k:
            apply_all(lambda p: np.rot90(p, k, axes=(0, 1)))
    if cfg.crop:
        area = rng.uniform(*cfg.crop_scale)
        side_h = max(1, round(h * math.sqrt(area)))
        side_w = max(1, round(w * math.sqrt(area)))
        top = int(rng.integers(0, h - side_h + 1))
        left = int(rng.integers(0, w - side_w + 1))
        apply_all(lambda p: _resize_nearest(
            p[top:top + side_h, left:left + side_w], h, w))
    if cfg.resize:
        f = rng.uniform(*cfg.resize_scale)
        nh, nw = max(1, round(h * f)), max(1, round(w * f))
        if (nh, nw) != (h, w):
            scaled = {k: _resize_nearest(p, nh, nw) for k, p in planes.items()}
            seg_scaled = [_resize_nearest(p, nh, nw) for p in seg_hw]
            if nh >= h:
                top = int(rng.integers(0, nh - h + 1))
                left = int(rng.integers(0, nw - w + 1))
                for k in planes:
                    planes[k] = scaled[k][top:top + h, left:left + w]
                seg_hw = [p[top:top + h, left:left + w] for p in seg_scaled]
            else:
                for k in planes:
                    planes[k] = _pad_to(scaled[k], h, w,
                                        edge=not k.startswith("loc"))
                seg_hw = [_pad_to(p, h, w, edge=False) for p in seg_scaled]

    signals = {}
    for name, arr in rec.signals.items():
        p = planes["sig:" + name]
        signals[name] = p if arr.ndim == 2 else p.transpose(2, 0, 1)
    loc = np.ascontiguousarray(planes["loc"]).astype(np.uint8)
    from .objects import SegmentationMaps
    seg = SegmentationMaps(h, w, np.stack(seg_hw) if seg_hw else
                           np.zeros((0, h, w), dtype=bool))
    return SampleRecord(
        name=rec.name,
        image=np.ascontiguousarray(planes["image"]),
        signals=signals,
        seg=seg,
        loc_mask=loc,
        det_label=int(loc.any()),
        kind=rec.kind,
    )


# -- batching -------------------------------------------------------------------


def build_batch(records: list[SampleRecord], cfg: ModelConfig
                ) -> tuple[np.ndarray, dict[str, np.ndarray], np.ndarray,
                           np.ndarray, np.ndarray]:
    """Stack records into model inputs plus targets.

    Returns (image, signals, attention masks, loc targets, det labels); the
    object attention mask is built once per sample here and shared by every
    stream downstream.
    """
    images = np.stack([image_planes(r) for r in records])
    signals = {}
    for name in cfg.signal_names:
        planes = []
        for r in records:
            if name not in r.signals:
                raise KeyError(f"sample {r.name} is missing signal {name!r}")
            planes.append(signal_scores(r, name))
        signals[name] = np.stack(planes)
    masks = np.stack([mask_for_image(r.seg, cfg.patch) for r in records])
    loc = np.stack([r.loc_mask for r in records]).astype(np.float32)
    det = np.asarray([r.det_label for r in records], dtype=np.float32)
    return images, signals, masks, loc, det


def predict_records(model: FusionModel, records: list[SampleRecord],
                    batch_size: int = 32) -> list[tuple[np.ndarray, float]]:
    """Eval-mode forward over records; returns (loc map, det score) pairs."""
    out = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        images, signals, masks, _, _ = build_batch(chunk, model.cfg)
        with T.no_grad():
            loc, det = model.forward(images, signals, masks, training=False)
        for i in range(len(chunk)):
            out.append((loc.data[i].copy(), float(det.data[i])))
    return out


# -- the loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_f1: float
    best_params: dict[str, np.ndarray]
    best_buffers: dict[str, np.ndarray]

    def restore_best(self, model: FusionModel) -> None:
        for name, p in model.named_parameters().items():
            p.data = self.best_params[name].copy()
            p.grad = None
        for name in model.named_buffers():
            model.set_buffer(name, self.best_buffers[name])


def split_train_val(n: int, val_fraction: float, seed: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if val_fraction > 0 else 0
    return order[n_val:], order[:n_val]


LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_bbce", "loss_dice",
               "loss_det", "val_pixel_f1", "val_auc")


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1000 + epoch]))


def validate(model: FusionModel, records: list[SampleRecord],
             batch_size: int) -> tuple[float, float]:
    """Mean pixel F1 at 0.5 and mean per-image pixel AUC over records."""
    preds = predict_records(model, records, batch_size)
    f1s, aucs = [], []
    for (loc, _), rec in zip(preds, records):
        f1s.append(pixel_f1(loc, rec.loc_mask))
        a = auc(loc.reshape(-1), rec.loc_mask.reshape(-1))
        if a is not None:
            aucs.append(a)
    return float(np.mean(f1s)), float(np.mean(aucs)) if aucs else float("nan")


def train_run(records: list[SampleRecord], model: FusionModel,
              config: TrainRunConfig, out_dir: str | Path | None = None,
              trainable_prefixes: tuple[str, ...] | None = None,
              bn_frozen: bool = False, start_epoch: int = 0,
              resume: Checkpoint | None = None,
              log=None) -> TrainResult:
    """Run the optimization loop and return per-epoch history.

    ``trainable_prefixes`` restricts the optimizer to parameters whose
    dotted name starts with one of the prefixes (stream-only expansion);
    everything else stays bitwise untouched. ``bn_frozen`` keeps batch-norm
    layers on their running statistics even in training mode.
    """
    if not records:
        raise PreconditionError("training needs a non-empty dataset")
    cfg = model.cfg
    if config.p_drop is not None:
        cfg.p_drop = config.p_drop
    weights = config.loss_weights
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_idx, val_idx = split_train_val(len(records), config.val_fraction,
                                         config.seed)
    train_recs = [records[i] for i in train_idx]
    val_recs = [records[i] for i in val_idx]

    params = model.named_parameters()
    if trainable_prefixes is not None:
        params = {k: v for k, v in params.items()
                  if any(k.startswith(p) for p in trainable_prefixes)}
        if not params:
            raise ConfigError(f"no parameters match prefixes {trainable_prefixes}")
    opt = SgdMomentum(params, momentum=config.momentum)
    best_meta = {}
    if resume is not None:
        if resume.velocity is not None:
            opt.load_state(resume.velocity, resume.step_count)
        best_meta = resume.meta.get("training", {})

    history: list[dict] = []
    best_f1 = float(best_meta.get("best_val_f1", -1.0))
    best_epoch = int(best_meta.get("best_epoch", -1))
    best_params = {k: v.data.copy() for k, v in model.named_parameters().items()}
    best_buffers = {k: v.copy() for k, v in model.named_buffers().items()}
    steps_per_epoch = max(1, math.ceil(len(train_recs) / config.batch_size))
    # Short runs shrink the warm-up so the schedule precondition holds.
    warmup = min(config.warmup_epochs, 0.25 * config.epochs)

    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(len(train_recs))
        sums = {"total": 0.0, "bbce": 0.0, "dice": 0.0, "det": 0.0}
        seen = 0
        lr = config.lr_min
        for step in range(steps_per_epoch):
            sel = order[step * config.batch_size:(step + 1) * config.batch_size]
            if sel.size == 0:
                continue
            batch = [train_recs[i] for i in sel]
            if any([config.augment.flip, config.augment.rotate,
                    config.augment.crop, config.augment.resize]):
                batch = [augment_record(r, rng, config.augment) for r in batch]
            images, signals, masks, loc_t, det_t = build_batch(batch, cfg)
            loc, det = model.forward(images, signals, masks, training=True,
                                     drop_rng=rng,
                                     bn_training=not bn_frozen)
            loss, parts = total_loss(loc, det, loc_t, det_t, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch} step {step}; "
                    f"components={parts}")
            opt.zero_grad()
            loss.backward()
            t_progress = epoch + step / steps_per_epoch
            lr = lr_schedule(t_progress, config.epochs, warmup,
                             config.lr_max, config.lr_min)
            opt.step(lr)
            n = len(batch)
            seen += n
            sums["total"] += value * n
            for k in ("bbce", "dice", "det"):
                sums[k] += parts[k] * n

        if val_recs:
            val_f1, val_auc = validate(model, val_recs, config.batch_size)
        else:
            val_f1, val_auc = float("nan"), float("nan")
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": sums["total"] / max(seen, 1),
            "loss_bbce": sums["bbce"] / max(seen, 1),
            "loss_dice": sums["dice"] / max(seen, 1),
            "loss_det": sums["det"] / max(seen, 1),
            "val_pixel_f1": val_f1,
            "val_auc": val_auc,
        }
        history.append(row)
        if log is not None:
            log(row)

        improved = val_recs and (val_f1 > best_f1)
        if improved or not val_recs:
            best_f1 = val_f1 if val_recs else float("nan")
            best_epoch = epoch
            best_params = {k: v.data.copy()
                           for k, v in model.named_parameters().items()}
            best_buffers = {k: v.copy() for k, v in model.named_buffers().items()}
        if out is not None:
            meta = {"epochs_trained": epoch + 1, "base_epochs": config.epochs,
                    "seed": config.seed, "best_val_f1": best_f1,
                    "best_epoch": best_epoch}
            save_checkpoint(out / "last.ckpt", model, meta,
                            velocity=opt.state_arrays(),
                            step_count=opt.step_count)
            if improved:
                save_checkpoint(out / "best.ckpt", model, meta)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch + 1:04d}.ckpt", model, meta)

    if out is not None:
        write_history(out / "metrics.csv", history)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_f1=best_f1, best_params=best_params,
                       best_buffers=best_buffers)


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=list(LOG_COLUMNS))
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


# -- stream expansion ------------------------------------------------------------


def expand_model(base: FusionModel, new_name: str, new_channels: int = 1,
                 seed: int = 1) -> FusionModel:
    """Grow the network by one named signal stream.

    Shared parameters are copied by name from the base model; only the new
    stream (embedder, transformer, positional and identity embeddings) is
    freshly initialized.
    """
    cfg = base.cfg
    if new_name in cfg.stream_names:
        raise ConfigError(f"stream name collision: {new_name!r} already exists")
    new_cfg = replace(cfg, signal_names=cfg.signal_names + (new_name,),
                      signal_channels=cfg.signal_channels + (new_channels,))
    grown = FusionModel(new_cfg, seed=seed, dtype=base.np_dtype)
    base_params = base.named_parameters()
    for name, p in grown.named_parameters().items():
        if name in base_params:
            p.data = base_params[name].data.copy()
    base_buffers = base.named_buffers()
    for name in grown.named_buffers():
        if name in base_buffers:
            grown.set_buffer(name, base_buffers[name])
    return grown


def expansion_epochs(base_epochs: int, fraction: float = 0.15) -> int:
    return max(1, math.ceil(fraction * base_epochs))


def expand_stream(base: FusionModel, records: list[SampleRecord],
                  new_name: str, mode: str, config: TrainRunConfig,
                  base_epochs: int | None = None, new_channels: int = 1,
                  out_dir: str | Path | None = None, log=None
                  ) -> tuple[FusionModel, TrainResult]:
    """Expansion entry point: stream_only, fine_tune, or from_scratch.

    stream_only trains only the new stream's parameters (batch norms frozen,
    every pre-existing parameter bitwise preserved); fine_tune trains all
    parameters for 15% of the base epoch budget; from_scratch reinitializes
    and runs the full budget.
    """
    if mode not in ("stream_only", "fine_tune", "from_scratch"):
        raise ConfigError(f"unknown expansion mode {mode!r}")
    base_epochs = base_epochs or config.epochs
    if mode == "from_scratch":
        cfg = replace(base.cfg, signal_names=base.cfg.signal_names + (new_name,),
                      signal_channels=base.cfg.signal_channels + (new_channels,))
        model = FusionModel(cfg, seed=config.seed, dtype=base.np_dtype)
        result = train_run(records, model, config, out_dir=out_dir, log=log)
        return model, result

    model = expand_model(base, new_name, new_channels, seed=config.seed + 1)
    short = replace(config, epochs=expansion_epochs(base_epochs))
    if mode == "stream_only":
        result = train_run(records, model, short, out_dir=out_dir,
                           trainable_prefixes=(f"streams.{new_name}.",),
                           bn_frozen=True, log=log)
    else:
        result = train_run(records, model, short, out_dir=out_dir, log=log)
    return model, result
