"""Instance segmentation maps and the object-guided attention mask.

An image comes with K binary instance maps (possibly overlapping). Pixels
covered by no map belong to an implicit background object. Each patch of a
p x p grid collects the ids of every object touching at least one of its
pixels; two patches may attend to each other iff their id sets intersect.
The resulting L x L additive mask holds 0 for permitted pairs and the
finite :data:`~forgefuse.tensor.BLOCKED` sentinel otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, PreconditionError
from .tensor import BLOCKED


@dataclass
class SegmentationMaps:
    """K binary instance maps plus the implicit background object."""

    height: int
    width: int
    maps: np.ndarray  # (K, H, W) bool; K may be 0
    include_background: bool = True

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=bool)
        if self.maps.ndim != 3:
            self.maps = self.maps.reshape((-1, self.height, self.width))
        if self.maps.shape[1:] != (self.height, self.width):
            raise DimensionError(
                f"segmentation maps {self.maps.shape} do not match "
                f"image extents {(self.height, self.width)}")

    @property
    def count(self) -> int:
        return self.maps.shape[0]

    @classmethod
    def from_instance_dir(cls, path: str | Path, include_background: bool = True
                          ) -> "SegmentationMaps":
        """Load one binary PNG per instance from a directory (sorted by name)."""
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        arrays = [np.asarray(Image.open(p).convert("L")) > 127 for p in files]
        if not arrays:
            raise PreconditionError(f"no instance PNGs found in {path}")
        h, w = arrays[0].shape
        return cls(h, w, np.stack(arrays), include_background)

    @classmethod
    def from_label_map(cls, source, include_background: bool = True
                       ) -> "SegmentationMaps":
        """Load a single-channel label map: 0 = unannotated, k >= 1 = instance k.

        Convenience format; it cannot express overlapping instances.
        """
        if isinstance(source, (str, Path)):
            labels = np.asarray(Image.open(source))
        else:
            labels = np.asarray(source)
        if labels.ndim != 2:
            raise DimensionError(f"label map must be 2-d, got shape {labels.shape}")
        ids = np.unique(labels)
        ids = ids[ids > 0]
        maps = np.stack([labels == k for k in ids]) if len(ids) else \
            np.zeros((0,) + labels.shape, dtype=bool)
        return cls(labels.shape[0], labels.shape[1], maps, include_background)

    def to_label_map(self) -> np.ndarray:
        """Flatten to a uint16 label map (later instances win on overlap)."""
        labels = np.zeros((self.height, self.width), dtype=np.uint16)
        for k in range(self.count):
            labels[self.maps[k]] = k + 1
        return labels

    def write_instance_dir(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for k in range(self.count):
            img = Image.fromarray((self.maps[k] * 255).astype(np.uint8), mode="L")
            img.save(path / f"inst_{k:03d}.png")


@dataclass
class PatchObjectSets:
    """Per-patch object-id sets over an H' x W' patch grid.

    Ids 0..K-1 are instances; id K is the background object. ``member`` is
    the (L, K+1) boolean membership matrix; ``sets`` gives the same content
    as frozensets, in patch row-major order.
    """

    grid_h: int
    grid_w: int
    patch: int
    member: np.ndarray
    sets: list = field(init=False)

    def __post_init__(self):
        self.sets = [frozenset(np.flatnonzero(row).tolist()) for row in self.member]

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def background_id(self) -> int:
        return self.member.shape[1] - 1


def patch_object_sets(seg: SegmentationMaps, patch: int) -> PatchObjectSets:
    """Collect, for each patch, every object with >= 1 pixel inside it.

    Pixels covered by no instance map count as the background object (when
    the background policy is on), so every patch set is non-empty.
    """
    h, w = seg.height, seg.width
    if h % patch or w % patch:
        raise DimensionError(
            f"patch size {patch} does not divide image extents {(h, w)}")
    gh, gw = h // patch, w // patch
    k = seg.count
    if k:
        pooled = seg.maps.reshape(k, gh, patch, gw, patch).any(axis=(2, 4))
    else:
        pooled = np.zeros((0, gh, gw), dtype=bool)
    covered = seg.maps.any(axis=0) if k else np.zeros((h, w), dtype=bool)
    if seg.include_background:
        bg = (~covered).reshape(gh, patch, gw, patch).any(axis=(1, 3))
    else:
        bg = np.zeros((gh, gw), dtype=bool)
    member = np.concatenate([pooled, bg[None]], axis=0)
    member = member.reshape(k + 1, gh * gw).T.copy()
    return PatchObjectSets(gh, gw, patch, member)


def object_mask(sets: PatchObjectSets) -> np.ndarray:
    """Build the L x L additive attention mask from patch object sets.

    Entry (u, v) is 0 iff the sets of patches u and v intersect, else
    :data:`BLOCKED`. Symmetric with an all-zero diagonal by construction.
    """
    member = sets.member
    if not member.any(axis=1).all():
        empty = int(np.flatnonzero(~member.any(axis=1))[0])
        raise PreconditionError(
            f"patch {empty} has an empty object set; enable the background "
            "policy or cover every pixel")
    shared = member.astype(np.int16) @ member.astype(np.int16).T
    mask = np.where(shared > 0, 0.0, BLOCKED).astype(np.float32)
    return mask


def mask_for_image(seg: SegmentationMaps, patch: int) -> np.ndarray:
    """Convenience: segmentation maps straight to the attention mask."""
    return object_mask(patch_object_sets(seg, patch))
