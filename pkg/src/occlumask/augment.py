"""Occluded test-set generation by compositing person sprites onto base images.

Each base image yields exactly :data:`VARIANTS_PER_IMAGE` variants; variant
``i`` composites sprite ``i`` using the random stream
``stream(master_seed, hash64(base_id), i)``, so the output for a base image
never depends on which other images are processed or in what order.

Placement draws are taken from that stream in the order scale, x, y.  The
ground-truth occluder for a variant is the set of frame pixels covered by
sprite pixels with alpha >= 128, recorded as a ``person`` detection with score
1.0, its tight bounding box and the exact mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .detections import Detection, DetectionSet
from .imagecore import MASK_THRESHOLD, BinaryMask, Image, Sprite, composite, overlap, resize_array
from .imagecore import nearest_index
from .rng import hash64, stream

logger = logging.getLogger(__name__)

VARIANTS_PER_IMAGE = 20


@dataclass(frozen=True)
class PlacementPolicy:
    """Where and how large a sprite is placed.

    ``scale_range`` is the sprite's target height as a fraction of the image
    height.  With ``x_mode="left"`` the sprite's left edge is uniform such
    that the sprite spans inside ``x_range`` (fractions of the width); with
    ``x_mode="center"`` its horizontal centre is uniform in ``x_range``.  The
    sprite's bottom edge is uniform in ``bottom_range`` (fractions of height).
    """

    name: str
    scale_range: tuple[float, float]
    x_mode: str = "left"
    x_range: tuple[float, float] = (0.0, 1.0)
    bottom_range: tuple[float, float] = (0.4, 1.0)
    sprite_kind: str = "activity"

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"scale_range must satisfy 0 < min <= max <= 1, got {self.scale_range}")
        if self.x_mode not in ("left", "center"):
            raise ValueError(f"x_mode must be 'left' or 'center', got {self.x_mode!r}")
        for name in ("x_range", "bottom_range"):
            a, b = getattr(self, name)
            if not 0 <= a <= b <= 1:
                raise ValueError(f"{name} must satisfy 0 <= min <= max <= 1")

    def with_overrides(self, **kw) -> "PlacementPolicy":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}
        return replace(self, **kw)


POLICIES = {
    "augmented1": PlacementPolicy("augmented1", (0.15, 0.45), "left", (0.0, 1.0), (0.4, 1.0),
                                  "activity"),
    "augmented2": PlacementPolicy("augmented2", (0.50, 0.80), "center", (1 / 3, 2 / 3),
                                  (0.9, 1.0), "portrait"),
}


def get_policy(name: str, **overrides) -> PlacementPolicy:
    try:
        policy = POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown placement policy {name!r}; choose from {sorted(POLICIES)}") from None
    return policy.with_overrides(**overrides) if overrides else policy


@dataclass(frozen=True)
class AugmentRecord:
    image_id: str
    base_image_id: str
    variant_index: int
    sprite_id: str
    placement: tuple[int, int, float]
    groundtruth: DetectionSet = field(compare=False)
    label: int | None = None


def scaled_dims(sprite: Sprite, scale: float) -> tuple[int, int]:
    return int(round(sprite.width * scale)), int(round(sprite.height * scale))


def sprite_scaled(sprite: Sprite, scale: float) -> Sprite:
    """Bilinear RGB resize with nearest-neighbour alpha."""
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    new_w, new_h = scaled_dims(sprite, scale)
    if new_w < 1 or new_h < 1:
        raise ValueError(f"scaling {sprite.width}x{sprite.height} by {scale} leaves no pixels")
    if (new_w, new_h) == (sprite.width, sprite.height):
        return sprite
    out = np.empty((new_h, new_w, 4), dtype=np.uint8)
    out[..., :3] = resize_array(sprite.pixels[..., :3], new_w, new_h)
    ys = nearest_index(sprite.height, new_h)
    xs = nearest_index(sprite.width, new_w)
    out[..., 3] = sprite.alpha[ys][:, xs]
    return Sprite(out)


def _uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    """One uniform draw mapped to an integer in [lo, hi] (lo when hi < lo)."""
    u = rng.random()
    if hi < lo:
        return lo
    return lo + min(int(math.floor(u * (hi - lo + 1))), hi - lo)


def sample_placement(policy: PlacementPolicy, image_w: int, image_h: int, sprite: Sprite,
                     rng: np.random.Generator) -> tuple[int, int, float]:
    """Draw ``(x, y, scale)`` for ``sprite``; (x, y) is its top-left corner."""
    lo, hi = policy.scale_range
    frac = lo + rng.random() * (hi - lo)
    scale = frac * image_h / sprite.height
    sw, sh = scaled_dims(sprite, scale)
    if sw > image_w or sh > image_h:
        clamped = min(image_w / sprite.width, image_h / sprite.height)
        logger.warning("sprite %dx%d at scale %.3f exceeds frame %dx%d; clamping scale to %.3f",
                       sprite.width, sprite.height, scale, image_w, image_h, clamped)
        scale = clamped
        sw, sh = scaled_dims(sprite, scale)
        sw, sh = min(sw, image_w), min(sh, image_h)

    x0, x1 = policy.x_range
    if policy.x_mode == "left":
        x = _uniform_int(rng, math.ceil(x0 * image_w), math.floor(x1 * image_w) - sw)
    else:
        x = _uniform_int(rng, math.ceil(x0 * image_w - sw / 2), math.floor(x1 * image_w - sw / 2))
    b0, b1 = policy.bottom_range
    bottom = _uniform_int(rng, math.ceil(b0 * image_h), math.floor(b1 * image_h))
    return x, bottom - sh, scale


def occluder_mask(image_w: int, image_h: int, sprite: Sprite, x: int, y: int) -> BinaryMask:
    """Frame pixels covered by sprite pixels with alpha >= 128."""
    bits = np.zeros((image_h, image_w), dtype=bool)
    clip = overlap(image_w, image_h, sprite.width, sprite.height, x, y)
    if clip is not None:
        base_sl, spr_sl = clip
        bits[base_sl] = sprite.alpha[spr_sl] >= MASK_THRESHOLD
    return BinaryMask(bits)


def tight_box(mask: BinaryMask) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(mask.bits.any(axis=1))
    if rows.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    cols = np.flatnonzero(mask.bits.any(axis=0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1 - cols[0]), float(rows[-1] + 1 - rows[0]))


def variant_id(base_id: str, policy: PlacementPolicy, index: int) -> str:
    return f"{base_id}__{policy.name}_{index:02d}"


def generate_variants(base: Image, base_id: str, sprites, policy: PlacementPolicy,
                      master_seed: int, label: int | None = None,
                      sprite_ids=None) -> list[tuple[Image, AugmentRecord]]:
    sprites = list(sprites)
    if len(sprites) != VARIANTS_PER_IMAGE:
        raise ValueError(f"need exactly {VARIANTS_PER_IMAGE} sprites, got {len(sprites)}")
    if sprite_ids is None:
        sprite_ids = [f"{policy.sprite_kind}_{i:02d}" for i in range(len(sprites))]
    base_key = hash64(base_id)
    out = []
    for i, sprite in enumerate(sprites):
        rng = stream(master_seed, base_key, i)
        x, y, scale = sample_placement(policy, base.width, base.height, sprite, rng)
        placed = sprite_scaled(sprite, scale)
        image = composite(base, placed, x, y)
        mask = occluder_mask(base.width, base.height, placed, x, y)
        det = Detection("person", 1.0, tight_box(mask), mask=mask)
        gt = DetectionSet(base.width, base.height, (det,))
        record = AugmentRecord(variant_id(base_id, policy, i), base_id, i, sprite_ids[i],
                               (int(x), int(y), float(scale)), gt, label)
        out.append((image, record))
    return out
