"""Procedural stand-in for a landmark dataset.

Class ``c`` of ``k`` is a sinusoidal stripe texture with orientation
``c * 180 / k`` degrees, ``4 + c`` cycles across the frame and hue ``c / k``.
Each sample adds its own phase shift, a brightness factor in [0.9, 1.1] and
integer noise in [-8, 8] per channel, all drawn from
``stream(seed, "synthetic", split, c, index)``.
"""

from __future__ import annotations

import colorsys

import numpy as np

from ..imagecore import Image
from ..rng import stream
from .data import DatasetManifest, Sample

SPLITS = ("train", "test")


def class_params(c: int, k: int) -> dict:
    return {
        "angle_deg": c * 180.0 / k,
        "cycles": 4 + c,
        "rgb": np.array(colorsys.hsv_to_rgb(c / k, 0.65, 1.0)),
    }


def render_landmark(c: int, k: int, size: int, rng: np.random.Generator) -> Image:
    params = class_params(c, k)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    brightness = rng.uniform(0.9, 1.1)
    noise = rng.integers(-8, 9, size=(size, size, 3))
    theta = np.deg2rad(params["angle_deg"])
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u = (xs * np.cos(theta) + ys * np.sin(theta)) / size
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * params["cycles"] * u + phase)
    value = (0.3 + 0.6 * wave) * brightness
    rgb = value[..., None] * params["rgb"] * 255.0 + noise
    return Image(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


def sample_id(split: str, c: int, i: int) -> str:
    return f"{split}_c{c:02d}_{i:03d}"


def generate_synthetic_landmarks(k: int, per_class_train: int, per_class_test: int,
                                 image_size: int, seed: int) -> tuple[DatasetManifest, list[Sample]]:
    if k < 2:
        raise ValueError("need at least two classes")
    samples = []
    for split, count in zip(SPLITS, (per_class_train, per_class_test)):
        for c in range(k):
            for i in range(count):
                img = render_landmark(c, k, image_size, stream(seed, "synthetic", split, c, i))
                samples.append(Sample(sample_id(split, c, i), c, split, img))
    manifest = DatasetManifest([
        {"image_id": s.image_id, "label": s.label, "split": s.split,
         "image_path": f"images/{s.image_id}.ppm"}
        for s in samples
    ])
    return manifest, samples
