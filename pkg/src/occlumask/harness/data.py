"""In-memory samples, on-disk dataset trees and manifests.

A dataset directory holds ``manifest.jsonl`` (one JSON object per image) and
the rasters it references, with paths relative to the directory:

* base sets: ``{image_id, label, split, image_path}``
* augmented sets additionally carry ``base_image_id, variant_index,
  sprite_id, placement, groundtruth_detections_path``; masks live under
  ``masks/`` and per-image detection files under ``detections/``.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..augment import AugmentRecord, PlacementPolicy, generate_variants
from ..detections import Detection, DetectionSet, load_detections, serialize_detections
from ..imagecore import Image, encode_image, encode_mask, load_raster


@dataclass(frozen=True)
class Sample:
    image_id: str
    label: int
    split: str
    image: Image = field(compare=False, repr=False)
    groundtruth: DetectionSet | None = field(default=None, compare=False, repr=False)
    base_image_id: str | None = None
    variant_index: int | None = None
    sprite_id: str | None = None
    placement: tuple | None = None


@dataclass
class DatasetManifest:
    records: list[dict]

    def to_jsonl(self) -> bytes:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    @classmethod
    def from_jsonl(cls, data: bytes | str) -> "DatasetManifest":
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return cls([json.loads(line) for line in data.splitlines() if line.strip()])

    def count(self, split: str) -> int:
        return sum(1 for r in self.records if r.get("split") == split)


def augment_samples(samples, sprites, policy: PlacementPolicy, master_seed: int,
                    threads: int = 1) -> list[Sample]:
    """Twenty occluded variants per input sample, in input order."""

    def one(s: Sample):
        return generate_variants(s.image, s.image_id, sprites, policy, master_seed, label=s.label)

    samples = list(samples)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            batches = list(pool.map(one, samples))
    else:
        batches = [one(s) for s in samples]
    out = []
    for base, batch in zip(samples, batches):
        for image, rec in batch:
            out.append(_from_record(image, rec, base.split))
    return out


def _from_record(image: Image, rec: AugmentRecord, split: str) -> Sample:
    return Sample(rec.image_id, rec.label, split, image, rec.groundtruth, rec.base_image_id,
                  rec.variant_index, rec.sprite_id, rec.placement)


# --------------------------------------------------------------------------
# Disk I/O
# --------------------------------------------------------------------------


def write_dataset(out_dir, samples) -> DatasetManifest:
    """Write rasters (and ground truth, for augmented samples) plus the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        image_path = f"images/{s.image_id}.ppm"
        (out / image_path).write_bytes(encode_image(s.image))
        rec = {"image_id": s.image_id, "label": s.label, "split": s.split, "image_path": image_path}
        if s.base_image_id is not None:
            (out / "masks").mkdir(exist_ok=True)
            (out / "detections").mkdir(exist_ok=True)
            dets = []
            for j, det in enumerate(s.groundtruth.items if s.groundtruth else ()):
                mask_rel = None
                if det.mask is not None:
                    mask_rel = f"masks/{s.image_id}_{j}.pgm"
                    (out / mask_rel).write_bytes(encode_mask(det.mask))
                dets.append(Detection(det.category, det.score, det.box,
                                      mask_path=os.path.join("..", mask_rel) if mask_rel else None))
            gt = DetectionSet(s.image.width, s.image.height, tuple(dets))
            det_rel = f"detections/{s.image_id}.json"
            (out / det_rel).write_bytes(serialize_detections({s.image_id: gt}))
            x, y, scale = s.placement
            rec.update({
                "base_image_id": s.base_image_id,
                "variant_index": s.variant_index,
                "sprite_id": s.sprite_id,
                "placement": {"x": x, "y": y, "scale": scale},
                "groundtruth_detections_path": det_rel,
            })
        records.append(rec)
    manifest = DatasetManifest(records)
    (out / "manifest.jsonl").write_bytes(manifest.to_jsonl())
    return manifest


def read_dataset(data_dir, split: str | None = None) -> list[Sample]:
    root = Path(data_dir)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {root}")
    manifest = DatasetManifest.from_jsonl(manifest_path.read_bytes())
    samples = []
    for rec in manifest.records:
        if split is not None and rec["split"] != split:
            continue
        image = load_raster(root / rec["image_path"])
        if not isinstance(image, Image):
            raise ValueError(f"{rec['image_path']} is not a P6 image")
        gt = None
        placement = None
        if "groundtruth_detections_path" in rec:
            gt = load_detections(root / rec["groundtruth_detections_path"])[rec["image_id"]]
            p = rec["placement"]
            placement = (p["x"], p["y"], p["scale"])
        samples.append(Sample(rec["image_id"], int(rec["label"]), rec["split"], image, gt,
                              rec.get("base_image_id"), rec.get("variant_index"),
                              rec.get("sprite_id"), placement))
    return samples
