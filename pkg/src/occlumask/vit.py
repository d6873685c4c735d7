"""A numpy vision-transformer encoder that runs on an arbitrary subset of patches.

Dropped patches never enter the token sequence: :func:`embed` gathers only the
kept patch rows, adds the positional embedding of each patch's *original*
grid index, and prepends the class token.  The encoder is standard pre-norm
(``x + MHSA(LN(x))``, ``x + MLP(LN(x))`` with exact GELU) followed by a final
layer norm; the class-token row is the image feature.

All arithmetic is float32.  Linear layers store weights as ``(in, out)`` so a
projection is ``x @ W + b``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .imagecore import Image
from .occlusion import PatchGrid
from .rng import stream
from .tensorio import ContainerError, read_container, write_container

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"VITW"
INIT_STD = 0.02


class WeightsError(ValueError):
    pass


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 224
    patch: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    layernorm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image size {self.image_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.patch)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def token_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


# Full-size presets follow the usual ViT-S/B/L 16 shapes.  The toy family keeps
# their relative ordering (width, then depth) at a size numpy handles quickly.
PRESETS: dict[str, VitConfig] = {
    "vits": VitConfig(224, 16, 384, 12, 6),
    "vitb": VitConfig(224, 16, 768, 12, 12),
    "vitl": VitConfig(224, 16, 1024, 24, 16),
    "toy": VitConfig(112, 16, 96, 4, 4),
    "toy-s": VitConfig(112, 16, 48, 4, 2),
    "toy-b": VitConfig(112, 16, 96, 4, 4),
    "toy-l": VitConfig(112, 16, 144, 8, 6),
}

# Table-style backbone sweeps use these, in this order.
TOY_BACKBONES = ("toy-s", "toy-b", "toy-l")
FULL_BACKBONES = ("vits", "vitb", "vitl")


def preset(name: str, image_size: int | None = None) -> VitConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(PRESETS)}") from None
    if image_size is not None and image_size != cfg.image_size:
        cfg = replace(cfg, image_size=image_size)
    return cfg


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayerWeights:
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    q_w: np.ndarray
    q_b: np.ndarray
    k_w: np.ndarray
    k_b: np.ndarray
    v_w: np.ndarray
    v_b: np.ndarray
    o_w: np.ndarray
    o_b: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    @cached_property
    def qkv_w(self) -> np.ndarray:
        return np.ascontiguousarray(np.concatenate([self.q_w, self.k_w, self.v_w], axis=1))

    @cached_property
    def qkv_b(self) -> np.ndarray:
        return np.concatenate([self.q_b, self.k_b, self.v_b])


_LAYER_FIELDS = [
    ("ln1.scale", "ln1_scale"), ("ln1.shift", "ln1_shift"),
    ("attn.q.weight", "q_w"), ("attn.q.bias", "q_b"),
    ("attn.k.weight", "k_w"), ("attn.k.bias", "k_b"),
    ("attn.v.weight", "v_w"), ("attn.v.bias", "v_b"),
    ("attn.o.weight", "o_w"), ("attn.o.bias", "o_b"),
    ("ln2.scale", "ln2_scale"), ("ln2.shift", "ln2_shift"),
    ("mlp.fc1.weight", "fc1_w"), ("mlp.fc1.bias", "fc1_b"),
    ("mlp.fc2.weight", "fc2_w"), ("mlp.fc2.bias", "fc2_b"),
]


@dataclass(frozen=True, eq=False)
class VitWeights:
    patch_w: np.ndarray
    patch_b: np.ndarray
    class_token: np.ndarray
    positional: np.ndarray
    layers: tuple[LayerWeights, ...]
    norm_scale: np.ndarray
    norm_shift: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in the fixed serialization / initialization order."""
        out = [
            ("patch_embed.weight", self.patch_w),
            ("patch_embed.bias", self.patch_b),
            ("cls_token", self.class_token),
            ("pos_embed", self.positional),
        ]
        for i, layer in enumerate(self.layers):
            out.extend((f"blocks.{i}.{name}", getattr(layer, attr)) for name, attr in _LAYER_FIELDS)
        out.append(("norm.scale", self.norm_scale))
        out.append(("norm.shift", self.norm_shift))
        return out

    def __eq__(self, other):
        if not isinstance(other, VitWeights):
            return NotImplemented
        a, b = self.tensors(), other.tensors()
        return len(a) == len(b) and all(
            na == nb and x.shape == y.shape and x.tobytes() == y.tobytes()
            for (na, x), (nb, y) in zip(a, b)
        )


def expected_shapes(cfg: VitConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, m = cfg.embed_dim, cfg.mlp_dim
    shapes = [
        ("patch_embed.weight", (cfg.token_dim, d)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (1 + cfg.num_patches, d)),
    ]
    layer = {
        "ln1.scale": (d,), "ln1.shift": (d,),
        "attn.q.weight": (d, d), "attn.q.bias": (d,),
        "attn.k.weight": (d, d), "attn.k.bias": (d,),
        "attn.v.weight": (d, d), "attn.v.bias": (d,),
        "attn.o.weight": (d, d), "attn.o.bias": (d,),
        "ln2.scale": (d,), "ln2.shift": (d,),
        "mlp.fc1.weight": (d, m), "mlp.fc1.bias": (m,),
        "mlp.fc2.weight": (m, d), "mlp.fc2.bias": (d,),
    }
    for i in range(cfg.depth):
        shapes.extend((f"blocks.{i}.{name}", layer[name]) for name, _ in _LAYER_FIELDS)
    shapes.append(("norm.scale", (d,)))
    shapes.append(("norm.shift", (d,)))
    return shapes


def _from_tensors(cfg: VitConfig, tensors: Sequence[tuple[str, np.ndarray]]) -> VitWeights:
    expected = expected_shapes(cfg)
    if len(tensors) != len(expected):
        raise WeightsError(f"expected {len(expected)} tensors, got {len(tensors)}")
    arrays = []
    for (name, arr), (want_name, want_shape) in zip(tensors, expected):
        if name != want_name:
            raise WeightsError(f"tensor {want_name!r} expected, found {name!r}")
        if tuple(arr.shape) != want_shape:
            raise WeightsError(f"{name}: shape {tuple(arr.shape)} does not match config {want_shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise WeightsError(f"{name}: non-finite values")
        arr.flags.writeable = False
        arrays.append(arr)
    it = iter(arrays)
    head = [next(it) for _ in range(4)]
    layers = tuple(
        LayerWeights(**{attr: next(it) for _, attr in _LAYER_FIELDS}) for _ in range(cfg.depth)
    )
    return VitWeights(*head, layers, next(it), next(it))


def init_weights(cfg: VitConfig, seed: int) -> VitWeights:
    """Seeded initialization.

    Tensors are visited in :meth:`VitWeights.tensors` order.  Every tensor whose
    name ends in ``weight`` plus ``cls_token`` and ``pos_embed`` receives
    ``N(0, 0.02)`` draws (float64 normals from ``PCG64(SeedSequence([seed]))``,
    scaled, then cast to float32, one call per tensor in row-major order).
    Layer-norm scales are 1; shifts and biases are 0 and consume no draws.
    """
    gen = stream(seed)
    tensors = []
    for name, shape in expected_shapes(cfg):
        if name.endswith("weight") or name in ("cls_token", "pos_embed"):
            arr = (gen.standard_normal(shape) * INIT_STD).astype(np.float32)
        elif name.endswith("scale"):
            arr = np.ones(shape, dtype=np.float32)
        else:
            arr = np.zeros(shape, dtype=np.float32)
        tensors.append((name, arr))
    return _from_tensors(cfg, tensors)


def save_weights(w: VitWeights) -> bytes:
    return write_container(WEIGHTS_MAGIC, w.tensors())


def load_weights(data: bytes, cfg: VitConfig) -> VitWeights:
    try:
        tensors = read_container(WEIGHTS_MAGIC, data)
    except ContainerError as exc:
        raise WeightsError(str(exc)) from None
    return _from_tensors(cfg, tensors)


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(v: np.ndarray, scale, shift, eps: float = 1e-6) -> np.ndarray:
    v = np.asarray(v)
    mean = v.mean(axis=-1, keepdims=True)
    c = v - mean
    var = (c * c).mean(axis=-1, keepdims=True)
    return c / np.sqrt(var + v.dtype.type(eps)) * scale + shift


def gelu(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * x * (x.dtype.type(1.0) + erf(x * x.dtype.type(1.0 / np.sqrt(2.0))))


def patchify(img: Image, cfg: VitConfig) -> np.ndarray:
    """``(num_patches, 3 * patch**2)`` float32 tokens scaled to [-1, 1].

    Patches are row-major over the grid; inside a patch pixels are row-major
    with interleaved RGB.
    """
    if (img.width, img.height) != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"image is {img.width}x{img.height}, backbone expects {cfg.image_size}x{cfg.image_size}"
        )
    p = cfg.patch
    n = cfg.image_size // p
    blocks = img.pixels.reshape(n, p, n, p, 3).transpose(0, 2, 1, 3, 4).reshape(n * n, 3 * p * p)
    return blocks.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def attention(x: np.ndarray, layer: LayerWeights, cfg: VitConfig, return_weights: bool = False):
    """Multi-head self-attention on an already normalized ``(L, D)`` sequence."""
    seq_len = x.shape[0]
    h, dh = cfg.heads, cfg.head_dim
    qkv = x @ layer.qkv_w + layer.qkv_b
    qkv = qkv.reshape(seq_len, 3, h, dh).transpose(1, 2, 0, 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    out = (weights @ v).transpose(1, 0, 2).reshape(seq_len, cfg.embed_dim)
    out = out @ layer.o_w + layer.o_b
    return (out, weights) if return_weights else out


def block(x: np.ndarray, layer: LayerWeights, cfg: VitConfig) -> np.ndarray:
    eps = cfg.layernorm_eps
    x = x + attention(layer_norm(x, layer.ln1_scale, layer.ln1_shift, eps), layer, cfg)
    hidden = gelu(layer_norm(x, layer.ln2_scale, layer.ln2_shift, eps) @ layer.fc1_w + layer.fc1_b)
    return x + (hidden @ layer.fc2_w + layer.fc2_b)


def embed(tokens: np.ndarray, keep: Iterable[int], w: VitWeights, order_sorted: bool = True) -> np.ndarray:
    """Assemble ``[cls] + [patch_i @ W + b + pos_i for i in keep]``.

    ``keep`` is iterated ascending unless ``order_sorted`` is False, in which
    case the given order is used (positional rows still follow each patch).
    """
    keep = np.fromiter(keep, dtype=np.intp)
    if order_sorted:
        keep = np.unique(keep)
    if keep.size and (keep.min() < 0 or keep.max() >= tokens.shape[0]):
        raise IndexError("keep-set index outside the patch grid")
    cls = (w.class_token + w.positional[0])[None, :]
    patches = tokens[keep] @ w.patch_w + w.patch_b + w.positional[1 + keep]
    return np.concatenate([cls, patches.astype(np.float32)], axis=0)


def encode(seq: np.ndarray, w: VitWeights, cfg: VitConfig) -> np.ndarray:
    x = np.ascontiguousarray(seq, dtype=np.float32)
    for layer in w.layers:
        x = block(x, layer, cfg)
    return layer_norm(x[0], w.norm_scale, w.norm_shift, cfg.layernorm_eps)


def forward(tokens: np.ndarray, keep: Iterable[int] | None, w: VitWeights, cfg: VitConfig) -> np.ndarray:
    """Class-token feature for the patches in ``keep`` (all patches when None)."""
    if keep is None:
        keep = range(cfg.num_patches)
    seq = embed(tokens, keep, w)
    if seq.shape[0] == 1:
        logger.warning("empty keep-set: encoding the class token alone")
    return encode(seq, w, cfg)


def extract(img: Image, keep: Iterable[int] | None, w: VitWeights, cfg: VitConfig) -> np.ndarray:
    return forward(patchify(img, cfg), keep, w, cfg)
