"""Occluder detections: JSON ingest, category/score filtering, rescaling.

Detection files are UTF-8 JSON, a top-level list of records::

    [{"image_id": "a", "width": 100, "height": 50,
      "detections": [{"category": "person", "score": 0.9,
                      "bbox": [x, y, w, h], "mask_path": "masks/a_0.pgm"}]}]

``bbox`` is top-left origin, y down, in source pixels.  ``mask_path`` is
optional and points at a P5 file with the source image dimensions; relative
paths are resolved against the detection file's directory and decoded only
when the mask is first needed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Mapping

from .imagecore import BinaryMask, load_raster, resize_mask

DEFAULT_CATEGORIES = frozenset({"person", "car"})
DEFAULT_MIN_SCORE = 0.5


class DetectionParseError(ValueError):
    """Schema violation in a detection file; ``path`` is a JSON path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@lru_cache(maxsize=4096)
def _load_mask_file(path: str) -> BinaryMask:
    mask = load_raster(path)
    if not isinstance(mask, BinaryMask):
        raise DetectionParseError(path, "mask file is not a P5 greymap")
    return mask


@dataclass(frozen=True)
class Detection:
    category: str
    score: float
    box: tuple[float, float, float, float]
    mask: BinaryMask | None = field(default=None, compare=False)
    mask_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if self.box[2] < 0 or self.box[3] < 0:
            raise ValueError(f"negative box size: {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")

    def get_mask(self) -> BinaryMask | None:
        """The instance mask, decoding it from ``mask_path`` on first use."""
        if self.mask is not None:
            return self.mask
        if self.mask_path is not None:
            return _load_mask_file(self.mask_path)
        return None

    @property
    def has_mask(self) -> bool:
        return self.mask is not None or self.mask_path is not None


@dataclass(frozen=True)
class DetectionSet:
    source_width: int
    source_height: int
    items: tuple[Detection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.source_width < 1 or self.source_height < 1:
            raise ValueError("source dimensions must be >= 1")
        for det in self.items:
            if det.mask is not None:
                self._check_mask(det.mask)

    def _check_mask(self, mask: BinaryMask):
        if (mask.width, mask.height) != (self.source_width, self.source_height):
            raise ValueError(
                f"mask is {mask.width}x{mask.height}, expected "
                f"{self.source_width}x{self.source_height}"
            )

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def masks(self) -> list[BinaryMask | None]:
        """Resolve every instance mask, checking its dimensions."""
        out = []
        for det in self.items:
            m = det.get_mask()
            if m is not None:
                self._check_mask(m)
            out.append(m)
        return out


# --------------------------------------------------------------------------
# Parsing / serialization
# --------------------------------------------------------------------------


def _require(obj: Mapping, key: str, kind, path: str):
    if key not in obj:
        raise DetectionParseError(f"{path}.{key}", "missing field")
    value = obj[key]
    ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
    if not ok:
        raise DetectionParseError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


_NUMBER = (int, float)


def _parse_detection(obj, path: str, base_dir: str | None) -> Detection:
    if not isinstance(obj, dict):
        raise DetectionParseError(path, "expected object")
    category = _require(obj, "category", str, path)
    score = _require(obj, "score", _NUMBER, path)
    if not 0.0 <= score <= 1.0:
        raise DetectionParseError(f"{path}.score", f"outside [0, 1]: {score}")
    bbox = _require(obj, "bbox", list, path)
    if len(bbox) != 4:
        raise DetectionParseError(f"{path}.bbox", "expected 4 numbers")
    for i, v in enumerate(bbox):
        if not isinstance(v, _NUMBER) or isinstance(v, bool):
            raise DetectionParseError(f"{path}.bbox[{i}]", "expected number")
    if bbox[2] < 0:
        raise DetectionParseError(f"{path}.bbox[2]", f"negative width {bbox[2]}")
    if bbox[3] < 0:
        raise DetectionParseError(f"{path}.bbox[3]", f"negative height {bbox[3]}")
    mask_path = obj.get("mask_path")
    if mask_path is not None:
        if not isinstance(mask_path, str):
            raise DetectionParseError(f"{path}.mask_path", "expected string")
        if base_dir is not None and not os.path.isabs(mask_path):
            mask_path = os.path.join(base_dir, mask_path)
    return Detection(category, float(score), tuple(bbox), mask_path=mask_path)


def parse_detections(data: bytes | str, base_dir: str | None = None) -> dict[str, DetectionSet]:
    """Parse a detection file into ``{image_id: DetectionSet}``."""
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise DetectionParseError("$", f"invalid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise DetectionParseError("$", "top level must be a list")
    result: dict[str, DetectionSet] = {}
    for i, rec in enumerate(doc):
        path = f"$[{i}]"
        if not isinstance(rec, dict):
            raise DetectionParseError(path, "expected object")
        image_id = _require(rec, "image_id", str, path)
        width = _require(rec, "width", int, path)
        height = _require(rec, "height", int, path)
        if width < 1:
            raise DetectionParseError(f"{path}.width", f"must be >= 1, got {width}")
        if height < 1:
            raise DetectionParseError(f"{path}.height", f"must be >= 1, got {height}")
        dets = _require(rec, "detections", list, path)
        items = tuple(
            _parse_detection(d, f"{path}.detections[{j}]", base_dir) for j, d in enumerate(dets)
        )
        if image_id in result:
            raise DetectionParseError(f"{path}.image_id", f"duplicate id {image_id!r}")
        result[image_id] = DetectionSet(width, height, items)
    return result


def load_detections(path) -> dict[str, DetectionSet]:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        return parse_detections(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def to_records(sets: Mapping[str, DetectionSet], relative_to: str | None = None) -> list[dict]:
    records = []
    for image_id, ds in sets.items():
        dets = []
        for det in ds.items:
            d = {"category": det.category, "score": det.score, "bbox": list(det.box)}
            if det.mask_path is not None:
                mp = det.mask_path
                if relative_to is not None and os.path.isabs(mp):
                    mp = os.path.relpath(mp, relative_to)
                d["mask_path"] = mp
            dets.append(d)
        records.append(
            {"image_id": image_id, "width": ds.source_width, "height": ds.source_height,
             "detections": dets}
        )
    return records


def serialize_detections(sets: Mapping[str, DetectionSet], relative_to: str | None = None) -> bytes:
    """Canonical JSON form; inline masks without a ``mask_path`` are not written."""
    return json.dumps(to_records(sets, relative_to), indent=1).encode("utf-8") + b"\n"


# --------------------------------------------------------------------------
# Filtering / rescaling
# --------------------------------------------------------------------------


def filter_occluders(
    ds: DetectionSet,
    categories: Iterable[str] = DEFAULT_CATEGORIES,
    min_score: float = DEFAULT_MIN_SCORE,
) -> DetectionSet:
    cats = frozenset(categories)
    kept = tuple(d for d in ds.items if d.category in cats and d.score >= min_score)
    return replace(ds, items=kept)


def rescale(ds: DetectionSet, target_w: int, target_h: int) -> DetectionSet:
    """Map boxes and masks from source-pixel space to a ``target_w x target_h`` frame."""
    if (target_w, target_h) == (ds.source_width, ds.source_height):
        return ds
    sx = target_w / ds.source_width
    sy = target_h / ds.source_height
    items = []
    for det, mask in zip(ds.items, ds.masks()):
        x, y, w, h = det.box
        new_mask = resize_mask(mask, target_w, target_h) if mask is not None else None
        items.append(Detection(det.category, det.score, (x * sx, y * sy, w * sx, h * sy), new_mask))
    return DetectionSet(target_w, target_h, tuple(items))
