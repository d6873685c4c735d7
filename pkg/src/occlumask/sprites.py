"""Procedural person-like silhouettes used when no sprite assets are supplied.

Two families are generated:

``activity``
    Full-body figures standing, walking, running, sitting and riding a bicycle.
``portrait``
    Head-and-shoulders busts, as for somebody posing in front of the camera.

Alpha is strictly binary (0 or 255), so every pixel a sprite changes is also a
ground-truth occluder pixel.
"""

from __future__ import annotations

import numpy as np

from .imagecore import Sprite
from .rng import stream

SPRITE_COUNT = 20

_SKIN = np.array(
    [[241, 194, 125], [224, 172, 105], [198, 134, 66], [141, 85, 36], [255, 219, 172]],
    dtype=np.float64,
)
ACTIVITY_POSES = ("stand", "walk", "run", "sit", "cycle")


class _Canvas:
    """Painter's-algorithm RGBA canvas with unit height and aspect ``width``."""

    def __init__(self, height: int, width: int):
        self.h, self.w = height, width
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        # pixel centres in units of canvas height, x centred on 0
        self.y = (ys + 0.5) / height
        self.x = (xs + 0.5 - width / 2) / height
        self.rgb = np.zeros((height, width, 3), dtype=np.float64)
        self.alpha = np.zeros((height, width), dtype=bool)

    def paint(self, region: np.ndarray, color):
        self.rgb[region] = color
        self.alpha |= region

    def capsule(self, p0, p1, radius, color):
        (x0, y0), (x1, y1) = p0, p1
        dx, dy = x1 - x0, y1 - y0
        length2 = dx * dx + dy * dy
        if length2 == 0:
            t = np.zeros_like(self.x)
        else:
            t = np.clip(((self.x - x0) * dx + (self.y - y0) * dy) / length2, 0.0, 1.0)
        dist2 = (self.x - x0 - t * dx) ** 2 + (self.y - y0 - t * dy) ** 2
        self.paint(dist2 <= radius * radius, color)

    def ellipse(self, centre, rx, ry, color):
        cx, cy = centre
        self.paint(((self.x - cx) / rx) ** 2 + ((self.y - cy) / ry) ** 2 <= 1.0, color)

    def ring(self, centre, r_outer, r_inner, color):
        d2 = (self.x - centre[0]) ** 2 + (self.y - centre[1]) ** 2
        self.paint((d2 <= r_outer ** 2) & (d2 >= r_inner ** 2), color)

    def to_sprite(self) -> Sprite:
        rows = np.flatnonzero(self.alpha.any(axis=1))
        cols = np.flatnonzero(self.alpha.any(axis=0))
        y0, y1, x0, x1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        rgba = np.zeros((y1 - y0, x1 - x0, 4), dtype=np.uint8)
        alpha = self.alpha[y0:y1, x0:x1]
        rgba[..., :3] = np.clip(np.rint(self.rgb[y0:y1, x0:x1]), 0, 255).astype(np.uint8)
        rgba[..., :3][~alpha] = 0
        rgba[..., 3] = np.where(alpha, 255, 0)
        return Sprite(rgba)


def _limb(origin, angle_deg, length):
    a = np.deg2rad(angle_deg)
    # angle 0 points straight down, positive swings toward +x
    return (origin[0] + length * np.sin(a), origin[1] + length * np.cos(a))


def _activity(pose: str, rng: np.random.Generator) -> Sprite:
    height = 128
    canvas = _Canvas(height, height * 2)
    skin = _SKIN[rng.integers(len(_SKIN))]
    shirt = rng.uniform(20, 235, size=3)
    trousers = rng.uniform(10, 120, size=3)
    girth = rng.uniform(0.8, 1.25)
    limb_r = 0.032 * girth
    head = (0.0, 0.09)
    neck = (0.0, 0.17)
    hip = (0.0, 0.5)
    thigh, shin = 0.24, 0.24
    upper_arm, forearm = 0.16, 0.15

    if pose == "stand":
        legs = [(-4, 0, 4, 0)]
        arms = [(-12, 0, 12, 0)]
    elif pose == "walk":
        s = rng.uniform(15, 25)
        legs = [(-s, 0, s, 10)]
        arms = [(s, -10, -s, -10)]
    elif pose == "run":
        s = rng.uniform(30, 45)
        legs = [(-s, 40, s, 70)]
        arms = [(s + 20, -90, -s - 10, -70)]
    else:  # sit / cycle: thighs forward, shins down
        legs = [(80, 0, 95, 5)] if pose == "sit" else [(70, -10, 30, 10)]
        arms = [(25, -40, 20, -30)] if pose == "sit" else [(55, -10, 50, -5)]
        hip = (0.0, 0.42)
        thigh = 0.2

    if pose == "cycle":
        wheel_r = 0.16
        for cx in (-0.22, 0.28):
            canvas.ring((cx, 0.82), wheel_r, wheel_r - 0.025, (30, 30, 30))
        canvas.capsule((-0.22, 0.82), (0.0, 0.55), 0.015, shirt * 0.5)
        canvas.capsule((0.0, 0.55), (0.28, 0.82), 0.015, shirt * 0.5)
        canvas.capsule((0.0, 0.55), (0.22, 0.4), 0.015, shirt * 0.5)
        canvas.capsule((-0.05, 0.45), (0.05, 0.45), 0.02, (40, 40, 40))
    if pose == "sit":
        # a bench under the figure
        canvas.capsule((-0.25, 0.47), (0.3, 0.47), 0.025, (110, 80, 50))
        canvas.capsule((-0.2, 0.47), (-0.2, 0.75), 0.02, (110, 80, 50))
        canvas.capsule((0.25, 0.47), (0.25, 0.75), 0.02, (110, 80, 50))

    for t_back, s_back, t_front, s_front in legs:
        for t_ang, s_ang in ((t_back, s_back), (t_front, s_front)):
            knee = _limb(hip, t_ang, thigh)
            foot = _limb(knee, s_ang, shin)
            canvas.capsule(hip, knee, limb_r * 1.2, trousers)
            canvas.capsule(knee, foot, limb_r, trousers)
    canvas.capsule(neck, hip, 0.075 * girth, shirt)
    shoulder = (0.0, 0.22)
    for u_back, f_back, u_front, f_front in arms:
        for u_ang, f_ang in ((u_back, f_back), (u_front, f_front)):
            elbow = _limb(shoulder, u_ang, upper_arm)
            hand = _limb(elbow, f_ang, forearm)
            canvas.capsule(shoulder, elbow, limb_r, shirt * 0.85)
            canvas.capsule(elbow, hand, limb_r * 0.85, skin)
    canvas.ellipse(head, 0.06, 0.075, skin)
    return canvas.to_sprite()


def _portrait(rng: np.random.Generator) -> Sprite:
    height = 128
    canvas = _Canvas(height, int(height * 1.4))
    skin = _SKIN[rng.integers(len(_SKIN))]
    shirt = rng.uniform(20, 235, size=3)
    hair = rng.uniform(0, 90, size=3)
    shoulders = rng.uniform(0.36, 0.5)
    head_r = rng.uniform(0.13, 0.16)
    head_y = 0.05 + head_r * 1.2
    # torso: a wide ellipse whose lower half runs off the canvas bottom
    canvas.ellipse((0.0, 1.05), shoulders, 0.55, shirt)
    canvas.capsule((0.0, head_y), (0.0, head_y + head_r * 1.6), head_r * 0.45, skin)
    canvas.ellipse((0.0, head_y - head_r * 0.25), head_r * 1.05, head_r * 1.0, hair)
    canvas.ellipse((0.0, head_y), head_r * 0.9, head_r * 1.15, skin)
    if rng.random() < 0.5:
        # raised arm holding a camera / phone
        side = rng.choice([-1.0, 1.0])
        elbow = (side * shoulders * 0.9, 0.45)
        hand = (side * head_r * 1.6, head_y + 0.05)
        canvas.capsule((side * shoulders * 0.7, 0.65), elbow, 0.06, shirt * 0.85)
        canvas.capsule(elbow, hand, 0.05, skin)
        canvas.ellipse(hand, 0.07, 0.05, (25, 25, 25))
    return canvas.to_sprite()


def builtin_sprites(kind: str = "activity", seed: int = 0) -> list[Sprite]:
    """Twenty deterministic silhouettes of the requested family."""
    if kind == "activity":
        return [
            _activity(ACTIVITY_POSES[i % len(ACTIVITY_POSES)], stream(seed, "sprite", kind, i))
            for i in range(SPRITE_COUNT)
        ]
    if kind == "portrait":
        return [_portrait(stream(seed, "sprite", kind, i)) for i in range(SPRITE_COUNT)]
    raise ValueError(f"unknown sprite family {kind!r}")
