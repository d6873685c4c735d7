"""End-to-end evaluation: clean-trained head, masked evaluation, sweeps.

The protocol is fixed: the linear head is trained on clean training features
(all patches kept).  At evaluation each test image goes through

    detections -> filter -> rescale to grid -> rasterize -> coverage
    -> select_masked -> forward(kept patches) -> predict

with masking off meaning every patch is kept.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from ..augment import POLICIES, PlacementPolicy, get_policy
from ..detections import (
    Detection,
    DetectionSet,
    filter_occluders,
    load_detections,
    rescale,
)
from ..head import ClassifierHead, TrainConfig, predict_batch, train_head
from ..imagecore import Sprite, load_raster, resize
from ..occlusion import check_mask_ratio, mask_for
from ..rng import derive_seed, hash64, stream
from ..sprites import SPRITE_COUNT, builtin_sprites
from ..tensorio import read_features, write_features
from ..vit import PRESETS, VitConfig, extract, init_weights, load_weights, preset
from .data import Sample, augment_samples, read_dataset
from .synthetic import generate_synthetic_landmarks
from .tables import ResultRow, ResultsTable

logger = logging.getLogger(__name__)

DETECTION_SOURCES = ("oracle", "oracle-box", "degraded", "file")
SWEEP_DIMENSIONS = ("mask_ratio", "backbone", "detector_source")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic data (ignored when data_dir is set)
    classes: int = 8
    train_per_class: int = 40
    test_per_class: int = 10
    source_size: int | None = None
    # on-disk data
    data_dir: str | None = None
    augmented_dirs: dict = field(default_factory=dict)
    sprites_dir: str | None = None
    variants: tuple = ("original", "augmented1", "augmented2")
    policies: dict = field(default_factory=dict)
    # backbone
    backbone: str = "toy"
    image_size: int | None = None
    weights_path: str | None = None
    # masking
    mask_ratios: tuple = (70,)
    categories: tuple = ("person", "car")
    min_score: float = 0.5
    use_masks: bool = True
    detection_source: str = "oracle"
    detections_path: str | None = None
    degrade_jitter: float = 0.1
    degrade_dropout: float = 0.2
    # head training
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.01
    momentum: float = 0.9
    # run control
    seeds: tuple = (0,)
    threads: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        try:
            for name in ("variants", "mask_ratios", "categories", "seeds"):
                value = getattr(self, name)
                if isinstance(value, (str, int)):
                    value = (value,)
                object.__setattr__(self, name, tuple(value))
            object.__setattr__(self, "mask_ratios",
                               tuple(check_mask_ratio(r) for r in self.mask_ratios))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.variants:
            raise ConfigError("at least one dataset variant is required")
        if self.backbone not in PRESETS:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.detection_source not in DETECTION_SOURCES:
            raise ConfigError(f"detection_source must be one of {DETECTION_SOURCES}")
        if self.detection_source == "file" and not self.detections_path:
            raise ConfigError("detection_source 'file' needs detections_path")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for v in self.variants:
            if v != "original" and v not in POLICIES and "base" not in self.policies.get(v, {}):
                if v not in self.augmented_dirs:
                    raise ConfigError(f"variant {v!r} has no placement policy or data directory")
        try:
            self.train_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum,
                           derive_seed(seed, "head"))

    def policy(self, variant: str) -> PlacementPolicy:
        overrides = dict(self.policies.get(variant, {}))
        base = overrides.pop("base", variant)
        policy = get_policy(base, **overrides)
        return dataclasses.replace(policy, name=variant) if base != variant else policy


def load_sprites(sprites_dir) -> list[Sprite]:
    paths = sorted(Path(sprites_dir).glob("*.pam"))
    if len(paths) != SPRITE_COUNT:
        raise ValueError(f"{sprites_dir} holds {len(paths)} .pam sprites, need {SPRITE_COUNT}")
    sprites = [load_raster(p) for p in paths]
    for p, s in zip(paths, sprites):
        if not isinstance(s, Sprite):
            raise ValueError(f"{p} is not an RGB_ALPHA PAM sprite")
    return sprites


def degrade_detections(ds: DetectionSet, jitter: float, dropout: float,
                       rng: np.random.Generator) -> DetectionSet:
    """Emulate a weaker, box-only detector: drop, jitter and re-score boxes."""
    items = []
    for det in ds.items:
        drop, dx, dy, sw, sh, score = rng.random(), *rng.standard_normal(4), rng.uniform(0.5, 1.0)
        if drop < dropout or det.box[2] <= 0 or det.box[3] <= 0:
            continue
        x, y, w, h = det.box
        w2, h2 = w * math.exp(jitter * sw), h * math.exp(jitter * sh)
        cx = x + w / 2 + jitter * w * dx
        cy = y + h / 2 + jitter * h * dy
        items.append(Detection(det.category, float(score), (cx - w2 / 2, cy - h2 / 2, w2, h2)))
    return DetectionSet(ds.source_width, ds.source_height, tuple(items))


class Experiment:
    """One seed and one backbone: data, weights, head and cached features."""

    def __init__(self, cfg: ExperimentConfig, seed: int, backbone: str | None = None):
        self.cfg = cfg
        self.seed = seed
        self.backbone = backbone or cfg.backbone
        self.vit_cfg: VitConfig = preset(self.backbone, cfg.image_size)
        self.grid = self.vit_cfg.grid
        self._features: dict = {}
        self._variants: dict[str, list[Sample]] = {}
        self._file_detections = None
        self.missing_detections: set[str] = set()

    # -- data ------------------------------------------------------------

    @cached_property
    def _base(self) -> tuple[list[Sample], list[Sample]]:
        cfg = self.cfg
        if cfg.data_dir:
            samples = read_dataset(cfg.data_dir)
        else:
            size = cfg.source_size or self.vit_cfg.image_size
            _, samples = generate_synthetic_landmarks(
                cfg.classes, cfg.train_per_class, cfg.test_per_class, size, self.seed)
        train = [s for s in samples if s.split == "train"]
        test = [s for s in samples if s.split == "test"]
        if not train or not test:
            raise ValueError("dataset needs both train and test samples")
        return train, test

    @property
    def train(self) -> list[Sample]:
        return self._base[0]

    @property
    def num_classes(self) -> int:
        return max(s.label for s in self.train) + 1

    def variant(self, name: str) -> list[Sample]:
        if name not in self._variants:
            if name == "original":
                self._variants[name] = self._base[1]
            elif name in self.cfg.augmented_dirs:
                self._variants[name] = read_dataset(self.cfg.augmented_dirs[name], split="test")
            else:
                policy = self.cfg.policy(name)
                if self.cfg.sprites_dir:
                    sprites = load_sprites(self.cfg.sprites_dir)
                else:
                    sprites = builtin_sprites(policy.sprite_kind)
                master = derive_seed(self.seed, "augment", name)
                self._variants[name] = augment_samples(self._base[1], sprites, policy, master,
                                                       self.cfg.threads)
        return self._variants[name]

    # -- detections and keep-sets -----------------------------------------

    def _file_sets(self) -> dict[str, DetectionSet]:
        if self._file_detections is None:
            self._file_detections = load_detections(self.cfg.detections_path)
        return self._file_detections

    def raw_detections(self, sample: Sample, source: str) -> DetectionSet:
        """Detections in the sample's source-pixel space, before filtering."""
        w, h = sample.image.width, sample.image.height
        if source == "file":
            ds = self._file_sets().get(sample.image_id)
            if ds is None:
                if sample.image_id not in self.missing_detections:
                    logger.warning("no detections for %s; treating as empty", sample.image_id)
                self.missing_detections.add(sample.image_id)
                return DetectionSet(w, h)
            return ds
        gt = sample.groundtruth or DetectionSet(w, h)
        if source == "oracle":
            return gt
        if source == "oracle-box":
            return DetectionSet(gt.source_width, gt.source_height,
                                tuple(Detection(d.category, d.score, d.box) for d in gt.items))
        if source == "degraded":
            rng = stream(self.seed, "degrade", sample.image_id)
            return degrade_detections(gt, self.cfg.degrade_jitter, self.cfg.degrade_dropout, rng)
        raise ValueError(f"unknown detection source {source!r}")

    def grid_detections(self, sample: Sample, source: str) -> DetectionSet:
        ds = filter_occluders(self.raw_detections(sample, source), self.cfg.categories,
                              self.cfg.min_score)
        return rescale(ds, self.grid.image_w, self.grid.image_h)

    def keep_set(self, sample: Sample, mask_ratio: int | None, source: str) -> tuple | None:
        """Kept patch indices, or None when every patch is kept."""
        if mask_ratio is None:
            return None
        ds = self.grid_detections(sample, source)
        if not ds.items:
            return None
        _, masked = mask_for(ds, self.grid, mask_ratio, self.cfg.use_masks)
        if not masked.indices:
            return None
        return masked.keep(self.grid.num_patches)

    # -- features ----------------------------------------------------------

    @cached_property
    def weights(self):
        if self.cfg.weights_path:
            with open(self.cfg.weights_path, "rb") as fh:
                return load_weights(fh.read(), self.vit_cfg)
        return init_weights(self.vit_cfg, self.seed)

    def feature(self, sample: Sample, keep: tuple | None) -> np.ndarray:
        key = (sample.image_id, keep)
        f = self._features.get(key)
        if f is None:
            size = self.vit_cfg.image_size
            img = resize(sample.image, size, size)
            f = extract(img, keep, self.weights, self.vit_cfg)
            self._features[key] = f
        return f

    def features(self, samples: Sequence[Sample], keeps: Sequence[tuple | None]) -> np.ndarray:
        pairs = list(zip(samples, keeps))
        self.weights  # materialize before fanning out
        if self.cfg.threads > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(self.cfg.threads) as pool:
                feats = list(pool.map(lambda p: self.feature(*p), pairs))
        else:
            feats = [self.feature(s, k) for s, k in pairs]
        return np.stack(feats) if feats else np.zeros((0, self.vit_cfg.embed_dim), np.float32)

    def _cache_path(self) -> Path | None:
        if not self.cfg.output_dir:
            return None
        c = self.cfg
        key = json.dumps([self.backbone, c.image_size, c.weights_path, c.data_dir, c.classes,
                          c.train_per_class, c.source_size, self.seed], sort_keys=True)
        return Path(c.output_dir) / "features" / f"{self.backbone}_seed{self.seed}_{hash64(key):016x}.feat"

    def train_features(self) -> tuple[np.ndarray, np.ndarray]:
        path = self._cache_path()
        if path is not None and path.exists():
            feats, labels = read_features(path.read_bytes())
            if len(labels) == len(self.train):
                return feats, labels
        feats = self.features(self.train, [None] * len(self.train))
        labels = np.array([s.label for s in self.train], dtype=np.int64)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(write_features(feats, labels))
        return feats, labels

    @cached_property
    def head(self) -> ClassifierHead:
        feats, labels = self.train_features()
        return train_head(feats, labels, self.num_classes, self.cfg.train_config(self.seed))

    # -- scoring -----------------------------------------------------------

    def predictions(self, variant: str, mask_ratio: int | None, source: str) -> tuple[np.ndarray, np.ndarray]:
        samples = self.variant(variant)
        keeps = [self.keep_set(s, mask_ratio, source) for s in samples]
        preds = predict_batch(self.head, self.features(samples, keeps))
        labels = np.array([s.label for s in samples])
        return preds, labels

    def score(self, variant: str, mask_ratio: int | None, source: str) -> tuple[int, int]:
        preds, labels = self.predictions(variant, mask_ratio, source)
        return int(np.sum(preds == labels)), int(labels.size)


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------

Cell = tuple  # (variant, backbone, detector, mask_ratio | None)


def _collect(cfg: ExperimentConfig, cells: list[Cell], experiments=None) -> ResultsTable:
    """Score every cell on every seed, pooling counts across seeds."""
    totals = {cell: [0, 0] for cell in cells}
    missing = 0
    backbones = list(dict.fromkeys(c[1] for c in cells))
    for seed in cfg.seeds:
        for backbone in backbones:
            exp = Experiment(cfg, seed, backbone)
            if experiments is not None:
                experiments.append(exp)
            for cell in cells:
                variant, b, detector, ratio = cell
                if b != backbone:
                    continue
                correct, n = exp.score(variant, ratio, detector)
                totals[cell][0] += correct
                totals[cell][1] += n
            missing += len(exp.missing_detections)
    rows = [
        ResultRow(v, b, d, r is not None, r, totals[(v, b, d, r)][0] / totals[(v, b, d, r)][1],
                  totals[(v, b, d, r)][1])
        for (v, b, d, r) in cells
    ]
    notes = {"seeds": list(cfg.seeds)}
    if "file" in {c[2] for c in cells}:
        notes["missing_detections"] = missing
    return ResultsTable(rows, notes)


def run_eval(cfg: ExperimentConfig, experiments: list | None = None) -> ResultsTable:
    """One unmasked baseline row plus one row per mask ratio, for every variant."""
    cells = []
    for v in cfg.variants:
        cells.append((v, cfg.backbone, cfg.detection_source, None))
        cells.extend((v, cfg.backbone, cfg.detection_source, r) for r in cfg.mask_ratios)
    return _collect(cfg, cells, experiments)


def parse_sweep_values(dimension: str, values) -> tuple:
    if isinstance(values, str):
        values = [v.strip() for v in values.split(",") if v.strip()]
    values = tuple(values)
    if not values:
        raise ConfigError(f"sweep over {dimension} needs at least one value")
    if dimension == "mask_ratio":
        try:
            return tuple(check_mask_ratio(int(v)) for v in values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if dimension == "backbone":
        bad = [v for v in values if v not in PRESETS]
        if bad:
            raise ConfigError(f"unknown backbones {bad}")
        return values
    if dimension == "detector_source":
        bad = [v for v in values if v not in DETECTION_SOURCES]
        if bad:
            raise ConfigError(f"unknown detection sources {bad}")
        return values
    raise ConfigError(f"unknown sweep dimension {dimension!r}; choose from {SWEEP_DIMENSIONS}")


def sweep(cfg: ExperimentConfig, dimension: str, values, experiments: list | None = None) -> ResultsTable:
    """Evaluate along one configuration axis.

    * ``mask_ratio``: one masked row per (variant, ratio); clean features,
      detections and the head are shared across ratios.
    * ``backbone``: masked (at the first configured ratio) and unmasked rows
      per (backbone, variant); features are recomputed per backbone.
    * ``detector_source``: one masked row per (detector, variant).
    """
    values = parse_sweep_values(dimension, values)
    ratio = cfg.mask_ratios[0]
    cells = []
    for v in cfg.variants:
        if dimension == "mask_ratio":
            cells.extend((v, cfg.backbone, cfg.detection_source, r) for r in values)
        elif dimension == "backbone":
            for b in values:
                cells.append((v, b, cfg.detection_source, ratio))
                cells.append((v, b, cfg.detection_source, None))
        else:
            cells.extend((v, cfg.backbone, d, ratio) for d in values)
    if dimension == "detector_source" and "file" in values and not cfg.detections_path:
        raise ConfigError("detector_source 'file' needs detections_path")
    return _collect(cfg, cells, experiments)
