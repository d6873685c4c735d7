"""Occluder rasterization, per-patch coverage and mask-ratio patch selection.

Everything here is integer exact.  A patch is dropped when its count of
occluder pixels satisfies ``covered * 100 >= mask_ratio * patch**2``, so the
comparison never touches floating point and ``mask_ratio=100`` selects exactly
the fully covered patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detections import DetectionSet
from .imagecore import BinaryMask

DEFAULT_MASK_RATIO = 70


@dataclass(frozen=True)
class PatchGrid:
    image_w: int
    image_h: int
    patch: int

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError(f"patch size must be >= 1, got {self.patch}")
        if self.image_w % self.patch or self.image_h % self.patch:
            raise ValueError(
                f"patch {self.patch} does not divide image {self.image_w}x{self.image_h}"
            )
        if self.image_w < self.patch or self.image_h < self.patch:
            raise ValueError("grid must contain at least one patch")

    @property
    def rows(self) -> int:
        return self.image_h // self.patch

    @property
    def cols(self) -> int:
        return self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def patch_area(self) -> int:
        return self.patch * self.patch


@dataclass(frozen=True, eq=False)
class CoverageMap:
    grid: PatchGrid
    covered: np.ndarray  # int64, (num_patches,), row-major patch order

    def __post_init__(self):
        cov = np.array(self.covered, dtype=np.int64).reshape(-1)
        if cov.shape[0] != self.grid.num_patches:
            raise ValueError("coverage length does not match grid")
        if cov.size and (cov.min() < 0 or cov.max() > self.grid.patch_area):
            raise ValueError("coverage counts outside [0, patch**2]")
        cov.flags.writeable = False
        object.__setattr__(self, "covered", cov)

    def __eq__(self, other):
        if not isinstance(other, CoverageMap):
            return NotImplemented
        return self.grid == other.grid and bool(np.array_equal(self.covered, other.covered))

    def as_grid(self) -> np.ndarray:
        return self.covered.reshape(self.grid.rows, self.grid.cols)


@dataclass(frozen=True)
class MaskSet:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("mask indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, i):
        return i in set(self.indices)

    def issubset(self, other: "MaskSet") -> bool:
        return set(self.indices) <= set(other.indices)

    def keep(self, num_patches: int) -> tuple[int, ...]:
        """Complement in ``[0, num_patches)``: the patches that stay in the sequence."""
        dropped = set(self.indices)
        return tuple(i for i in range(num_patches) if i not in dropped)


def box_pixel_bounds(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel span ``[x0, x1) x [y0, y1)`` touched by a real-valued box, clipped."""
    x, y, w, h = box
    x0 = max(math.floor(x), 0)
    y0 = max(math.floor(y), 0)
    x1 = min(math.ceil(x + w), width)
    y1 = min(math.ceil(y + h), height)
    return x0, y0, max(x1, x0), max(y1, y0)


def rasterize_occupancy(ds: DetectionSet, grid: PatchGrid, use_masks: bool = True) -> BinaryMask:
    """Union of occluder pixels over all detections in grid space."""
    if (ds.source_width, ds.source_height) != (grid.image_w, grid.image_h):
        raise ValueError(
            f"detections are in {ds.source_width}x{ds.source_height} space; "
            f"rescale to {grid.image_w}x{grid.image_h} first"
        )
    occ = np.zeros((grid.image_h, grid.image_w), dtype=bool)
    masks = ds.masks() if use_masks else [None] * len(ds.items)
    for det, mask in zip(ds.items, masks):
        if mask is not None:
            occ |= mask.bits
        else:
            x0, y0, x1, y1 = box_pixel_bounds(det.box, grid.image_w, grid.image_h)
            occ[y0:y1, x0:x1] = True
    return BinaryMask(occ)


def patch_coverage(occ: BinaryMask, grid: PatchGrid) -> CoverageMap:
    if (occ.width, occ.height) != (grid.image_w, grid.image_h):
        raise ValueError(
            f"occupancy is {occ.width}x{occ.height}, grid expects {grid.image_w}x{grid.image_h}"
        )
    p = grid.patch
    blocks = occ.bits.reshape(grid.rows, p, grid.cols, p)
    counts = blocks.sum(axis=(1, 3), dtype=np.int64)
    return CoverageMap(grid, counts.reshape(-1))


def check_mask_ratio(mask_ratio) -> int:
    if isinstance(mask_ratio, bool) or int(mask_ratio) != mask_ratio:
        raise ValueError(f"mask_ratio must be an integer percent, got {mask_ratio!r}")
    mask_ratio = int(mask_ratio)
    if not 0 < mask_ratio <= 100:
        raise ValueError(f"mask_ratio must be in (0, 100], got {mask_ratio}")
    return mask_ratio


def select_masked(cov: CoverageMap, mask_ratio: int = DEFAULT_MASK_RATIO) -> MaskSet:
    mask_ratio = check_mask_ratio(mask_ratio)
    hit = cov.covered * 100 >= mask_ratio * cov.grid.patch_area
    return MaskSet(tuple(np.flatnonzero(hit).tolist()))


def mask_for(
    ds: DetectionSet, grid: PatchGrid, mask_ratio: int = DEFAULT_MASK_RATIO,
    use_masks: bool = True,
) -> tuple[CoverageMap, MaskSet]:
    """Rasterize, count and threshold in one call (detections already in grid space)."""
    cov = patch_coverage(rasterize_occupancy(ds, grid, use_masks), grid)
    return cov, select_masked(cov, mask_ratio)
