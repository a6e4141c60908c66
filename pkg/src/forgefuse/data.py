"""Synthetic forgery benchmark generation and dataset I/O.

Scenes composite textured geometric objects over a textured background and
come with oracle instance maps. Forgeries are splices (object pasted from an
independent scene), copy-moves (object duplicated within the scene) and
inpaintings (object removed and refilled with background texture); the
ground-truth mask marks exactly the altered pixels. Synthetic forensic
signals corrupt the ground truth under a reliability parameter that targets
a pixel-F1 regime.

On-disk layout, one directory per sample:

    image.png            8-bit RGB
    mask.png             8-bit gray, 0/255
    label.json           {"det": 0|1, "kind": "<splice|copy_move|inpaint|none>"}
    seg/inst_###.png     binary instance maps (or seg_labels.png, 16-bit)
    signals/<name>.png   8-bit gray, value/255 = score
    signals/<name>.f32   multi-channel raw alternative (magic, C, H, W, LE data)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import DimensionError, PreconditionError
from .objects import SegmentationMaps

FORGERY_KINDS = ("splice", "copy_move", "inpaint")
_SIG_MAGIC = b"FSIG"

# Nominal tampered-pixel prevalence the false-positive budget is scaled to.
_NOMINAL_PREVALENCE = 0.10


@dataclass
class SignalProfile:
    """Controls how strongly a synthetic signal agrees with the ground truth.

    ``reliability`` targets the mean pixel F1 (threshold 0.5) of the signal
    against the true mask. Noise is structured: boundary erosion up to the
    false-negative budget, uniformly placed false-positive blobs, an
    occasional whole-region miss, then blur and additive noise.
    """

    name: str
    reliability: float
    miss_rate: float | None = None
    blur_sigma: float | None = None
    noise_std: float | None = None
    channels: int = 1

    def __post_init__(self):
        if not 0.0 <= self.reliability <= 1.0:
            raise PreconditionError(
                f"reliability must be in [0, 1], got {self.reliability}")
        if self.miss_rate is None:
            self.miss_rate = round(0.3 * (1.0 - self.reliability) ** 2, 4)
        if self.blur_sigma is None:
            self.blur_sigma = round(0.5 * (1.0 - self.reliability), 4)
        if self.noise_std is None:
            self.noise_std = round(0.02 + 0.08 * (1.0 - self.reliability), 4)


@dataclass
class SampleRecord:
    """One dataset item; images and signals are uint8, /255 gives scores."""

    name: str
    image: np.ndarray                      # (H, W, 3) uint8
    signals: dict[str, np.ndarray]         # (H, W) uint8 or (C, H, W) float32
    seg: SegmentationMaps
    loc_mask: np.ndarray                   # (H, W) uint8 in {0, 1}
    det_label: int
    kind: str = "none"

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class Scene:
    image: np.ndarray                      # (H, W, 3) float32 in [0, 1]
    seg: SegmentationMaps
    bg_params: dict = field(default_factory=dict)


# -- scene synthesis ---------------------------------------------------------


def _texture(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, dict]:
    """Random smooth texture: base color + oriented stripes + grain."""
    params = {
        "base": rng.uniform(0.15, 0.85, 3),
        "amp": rng.uniform(0.03, 0.18),
        "freq": rng.uniform(0.05, 0.45),
        "angle": rng.uniform(0, np.pi),
        "phase": rng.uniform(0, 2 * np.pi),
        "grain": rng.uniform(0.01, 0.05),
        "seed": int(rng.integers(0, 2 ** 31)),
    }
    return _render_texture(params, h, w), params


def _render_texture(params: dict, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = xx * np.cos(params["angle"]) + yy * np.sin(params["angle"])
    stripes = params["amp"] * np.sin(params["freq"] * u + params["phase"])
    grain_rng = np.random.default_rng(params["seed"])
    grain = grain_rng.normal(0.0, params["grain"], (h, w))
    tex = params["base"][None, None, :] + (stripes + grain)[:, :, None]
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def _object_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Random filled ellipse or convex polygon as a boolean mask."""
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    cy = rng.uniform(0.2 * h, 0.8 * h)
    rx = rng.uniform(0.08 * w, 0.22 * w)
    ry = rng.uniform(0.08 * h, 0.22 * h)
    if rng.random() < 0.5:
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.55, 1.0, n)
        pts = [(cx + rx * r * np.cos(a), cy + ry * r * np.sin(a))
               for a, r in zip(angles, radii)]
        draw.polygon(pts, fill=255)
    return np.asarray(img) > 127


def gen_scene(rng: np.random.Generator, height: int = 64, width: int = 64,
              min_objects: int = 2, max_objects: int = 6) -> Scene:
    """Composite 2..6 textured objects over a textured background."""
    image, bg_params = _texture(rng, height, width)
    k = int(rng.integers(min_objects, max_objects + 1))
    maps = []
    for _ in range(k):
        mask = _object_mask(rng, height, width)
        tex, _ = _texture(rng, height, width)
        image = np.where(mask[:, :, None], tex, image)
        maps.append(mask)
    seg = SegmentationMaps(height, width, np.stack(maps))
    return Scene(image=image, seg=seg, bg_params=bg_params)


# -- forgeries ---------------------------------------------------------------


def _shift_mask(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] = src
    return out


def apply_forgery(scene: Scene, kind: str, rng: np.random.Generator
                  ) -> tuple[np.ndarray, SegmentationMaps, np.ndarray, int]:
    """Alter the scene; returns (image, seg maps, loc mask, det label).

    The returned segmentation set mirrors what a class-agnostic segmenter
    would produce on the forged image: pasted objects appear as new
    instances, removed objects disappear.
    """
    h, w = scene.seg.height, scene.seg.width
    image = scene.image.copy()
    maps = list(scene.seg.maps)
    if kind == "none":
        return image, scene.seg, np.zeros((h, w), dtype=np.uint8), 0
    if kind not in FORGERY_KINDS:
        raise PreconditionError(f"unknown forgery kind {kind!r}")
    if kind in ("copy_move", "inpaint") and not maps:
        raise PreconditionError(f"{kind} needs at least one object in the scene")

    if kind == "splice":
        donor = gen_scene(np.random.default_rng(rng.integers(0, 2 ** 31)),
                          h, w, 1, 3)
        src_mask = donor.seg.maps[int(rng.integers(0, donor.seg.count))]
        dy, dx = int(rng.integers(-h // 4, h // 4)), int(rng.integers(-w // 4, w // 4))
        placed = _shift_mask(src_mask, dy, dx)
        if not placed.any():
            placed = src_mask
            dy = dx = 0
        src_vals = np.roll(donor.image, (dy, dx), axis=(0, 1))
        image = np.where(placed[:, :, None], src_vals, image)
        maps.append(placed)
        loc = placed
    elif kind == "copy_move":
        src_mask = maps[int(rng.integers(0, len(maps)))]
        min_shift = max(2, h // 16)
        for _ in range(16):
            dy = int(rng.integers(-h // 3, h // 3))
            dx = int(rng.integers(-w // 3, w // 3))
            if (abs(dy) >= min_shift or abs(dx) >= min_shift):
                placed = _shift_mask(src_mask, dy, dx)
                if placed.sum() >= 0.4 * src_mask.sum():
                    break
        else:
            dy, dx = min_shift, min_shift
            placed = _shift_mask(src_mask, dy, dx)
        src_vals = np.roll(scene.image, (dy, dx), axis=(0, 1))
        image = np.where(placed[:, :, None], src_vals, image)
        maps.append(placed)
        loc = placed
    else:  # inpaint
        idx = int(rng.integers(0, len(maps)))
        target = maps.pop(idx)
        fill, _ = _texture(rng, h, w)
        # Reuse the background palette so the fill blends in.
        fill = 0.5 * fill + 0.5 * _render_texture(scene.bg_params, h, w)
        image = np.where(target[:, :, None], fill.astype(np.float32), image)
        loc = target

    seg = SegmentationMaps(h, w, np.stack(maps) if maps else
                           np.zeros((0, h, w), dtype=bool))
    return image, seg, loc.astype(np.uint8), 1


# -- synthetic signals --------------------------------------------------------


def gen_signal(loc_mask: np.ndarray, profile: SignalProfile,
               rng: np.random.Generator) -> np.ndarray:
    """Corrupt the ground-truth mask into a score map in [0, 1]^(H, W)."""
    loc = np.asarray(loc_mask) > 0
    h, w = loc.shape
    rho = profile.reliability
    n_pos = int(loc.sum())

    # A full miss scores 0, so non-missed samples target rho / (1 - miss
    # rate) to keep the mean on target.
    rho_hit = min(1.0, rho / (1.0 - profile.miss_rate)) if profile.miss_rate < 1 else rho
    detected = loc.copy()
    missed = bool(n_pos) and rng.random() < profile.miss_rate
    if missed:
        detected[:] = False
    elif n_pos:
        n_drop = int(round((1.0 - rho_hit) * n_pos))
        if n_drop:
            dist = ndimage.distance_transform_edt(detected)
            order = np.argsort(dist[detected] + rng.normal(0, 0.75, n_pos))
            ys, xs = np.nonzero(detected)
            drop = order[:n_drop]
            detected[ys[drop], xs[drop]] = False

    # Balanced error masses (false positives ~ false negatives) put the
    # expected F1 at the reliability target; authentic images fall back to
    # a nominal-prevalence budget so they still carry plausible noise.
    if n_pos:
        fp_budget = int(round((1.0 - rho_hit) * n_pos))
    else:
        fp_budget = int(round((1.0 - rho) * _NOMINAL_PREVALENCE * h * w))
    blob_canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(blob_canvas)
    remaining = fp_budget
    while remaining >= 3:
        r_cap = min(0.06 * min(h, w), np.sqrt(remaining / np.pi))
        r = float(rng.uniform(min(1.0, r_cap), max(1.0, r_cap)))
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        remaining -= int(np.pi * r * r)
    blobs = np.asarray(blob_canvas) > 127

    signal = (detected | blobs).astype(np.float32)
    if profile.blur_sigma > 0:
        signal = ndimage.gaussian_filter(signal, profile.blur_sigma)
    signal += rng.normal(0.0, profile.noise_std, (h, w)).astype(np.float32)
    return np.clip(signal, 0.0, 1.0).astype(np.float32)


# -- sample assembly and dataset I/O ------------------------------------------


def gen_sample(index: int, kind: str, profiles: list[SignalProfile],
               rng: np.random.Generator, height: int = 64, width: int = 64
               ) -> SampleRecord:
    scene = gen_scene(rng, height, width)
    image, seg, loc, det = apply_forgery(scene, kind, rng)
    signals = {p.name: _quantize(gen_signal(loc, p, rng)) for p in profiles}
    return SampleRecord(
        name=f"sample_{index:05d}",
        image=_quantize_rgb(image),
        signals=signals,
        seg=seg,
        loc_mask=loc,
        det_label=det,
        kind=kind,
    )


def _quantize(score: np.ndarray) -> np.ndarray:
    return np.clip(np.round(score * 255), 0, 255).astype(np.uint8)


def _quantize_rgb(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def plan_kinds(count: int, forged_ratio: float, seed: int) -> list[str]:
    """Deterministic forged/authentic allocation and forgery-kind cycle."""
    n_forged = int(round(count * forged_ratio))
    kinds = [FORGERY_KINDS[i % len(FORGERY_KINDS)] for i in range(n_forged)]
    kinds += ["none"] * (count - n_forged)
    order = np.random.default_rng(seed).permutation(count)
    return [kinds[i] for i in order]


def gen_dataset(out_dir: str | Path, count: int, profiles: list[SignalProfile],
                forged_ratio: float = 0.55, seed: int = 0,
                height: int = 64, width: int = 64) -> Path:
    """Write ``count`` samples under ``out_dir``; byte-deterministic in seed.

    Per-sample RNGs are derived from (seed, index), so the output does not
    depend on generation order or worker count.
    """
    if count < 1:
        raise PreconditionError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = plan_kinds(count, forged_ratio, seed)
    for i, kind in enumerate(kinds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        rec = gen_sample(i, kind, profiles, rng, height, width)
        write_sample(out / rec.name, rec)
    meta = {
        "count": count,
        "forged_ratio": forged_ratio,
        "seed": seed,
        "height": height,
        "width": width,
        "profiles": [{"name": p.name, "reliability": p.reliability,
                      "channels": p.channels} for p in profiles],
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def write_sample(path: Path, rec: SampleRecord) -> None:
    path.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rec.image, mode="RGB").save(path / "image.png")
    Image.fromarray(rec.loc_mask * 255, mode="L").save(path / "mask.png")
    (path / "label.json").write_text(json.dumps(
        {"det": int(rec.det_label), "kind": rec.kind}, sort_keys=True))
    rec.seg.write_instance_dir(path / "seg")
    sig_dir = path / "signals"
    sig_dir.mkdir(exist_ok=True)
    for name, arr in rec.signals.items():
        if arr.ndim == 2 and arr.dtype == np.uint8:
            Image.fromarray(arr, mode="L").save(sig_dir / f"{name}.png")
        else:
            write_signal_f32(sig_dir / f"{name}.f32", arr)


def write_signal_f32(path: Path, arr: np.ndarray) -> None:
    """Multi-channel signal file: magic, C, H, W (u32 LE), then raw <f4."""
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    with open(path, "wb") as fp:
        fp.write(_SIG_MAGIC)
        fp.write(struct.pack("<III", c, h, w))
        fp.write(np.ascontiguousarray(arr).tobytes())


def read_signal_f32(path: Path) -> np.ndarray:
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != _SIG_MAGIC:
            raise PreconditionError(f"bad signal magic {magic!r} in {path}")
        c, h, w = struct.unpack("<III", fp.read(12))
        data = np.frombuffer(fp.read(4 * c * h * w), dtype="<f4")
    return data.reshape(c, h, w).copy()


def load_sample(path: str | Path) -> SampleRecord:
    path = Path(path)
    image = np.asarray(Image.open(path / "image.png").convert("RGB"))
    loc = (np.asarray(Image.open(path / "mask.png").convert("L")) > 127
           ).astype(np.uint8)
    label = json.loads((path / "label.json").read_text())
    seg_dir = path / "seg"
    label_map = path / "seg_labels.png"
    if seg_dir.is_dir() and any(seg_dir.iterdir()):
        seg = SegmentationMaps.from_instance_dir(seg_dir)
    elif label_map.exists():
        seg = SegmentationMaps.from_label_map(label_map)
    else:
        seg = SegmentationMaps(image.shape[0], image.shape[1],
                               np.zeros((0,) + image.shape[:2], dtype=bool))
    signals: dict[str, np.ndarray] = {}
    sig_dir = path / "signals"
    if sig_dir.is_dir():
        for f in sorted(sig_dir.iterdir()):
            if f.suffix == ".png":
                signals[f.stem] = np.asarray(Image.open(f).convert("L"))
            elif f.suffix == ".f32":
                signals[f.stem] = read_signal_f32(f)
    return SampleRecord(
        name=path.name, image=image, signals=signals, seg=seg,
        loc_mask=loc, det_label=int(label["det"]), kind=label.get("kind", "none"))


def load_dataset(root: str | Path) -> list[SampleRecord]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise PreconditionError(f"no sample directories under {root}")
    return [load_sample(p) for p in dirs]


def signal_scores(rec: SampleRecord, name: str) -> np.ndarray:
    """Signal as float scores in [0, 1], shape (C, H, W)."""
    arr = rec.signals[name]
    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 255.0
        return out[None] if out.ndim == 2 else out
    return arr.astype(np.float32)


def image_planes(rec: SampleRecord) -> np.ndarray:
    """Image as float (3, H, W) in [0, 1]."""
    return (rec.image.astype(np.float32) / 255.0).transpose(2, 0, 1)
