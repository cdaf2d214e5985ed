"""Desk-scale vision backbone over the locally bi-directional block.

Images become non-overlapping patch tokens with a learned positional
embedding; U blocks process them, each reversing its output so the global
scan direction alternates and every token reaches a full receptive field
after two blocks.  Prediction heads: order-invariant global average
pooling, a single-learned-query multi-head attention pool, or readout at
configurable class-token positions.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import block as block_mod
from . import nn
from .core import ShapeError, seeded_rng
from .engine import select_tile_len

_CLASS_TOKEN_COUNT = {"none": 0, "head": 1, "middle": 1, "double": 2}


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 1
    embed_dim: int = 64  # D
    inner_dim: int = 128  # E
    state_dim: int = 16  # N
    depth: int = 4  # U
    tile_len: int | None = None  # None = auto by sequence length
    head: str = "gap"
    map_heads: int = 4
    class_token: str = "none"
    num_classes: int = 2
    conv_width: int = 4
    reverse_between_blocks: bool = True
    unreverse_output: bool = True
    discretize_mode: str = "exp"
    scan_variant: str = "lbm"  # cost-model accounting only

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.depth < 1:
            raise ShapeError("depth must be >= 1")
        if self.head not in ("gap", "map"):
            raise ShapeError(f"unknown head {self.head!r}")
        if self.head == "map" and self.embed_dim % self.map_heads:
            raise ShapeError("map head requires embed_dim divisible by map_heads")
        if self.class_token not in _CLASS_TOKEN_COUNT:
            raise ShapeError(f"unknown class token mode {self.class_token!r}")
        if self.scan_variant not in ("forward", "lbm", "global_bidir"):
            raise ShapeError(f"unknown scan variant {self.scan_variant!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_class_tokens(self) -> int:
        return _CLASS_TOKEN_COUNT[self.class_token]

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_class_tokens

    @property
    def resolved_tile_len(self) -> int:
        if self.tile_len in (None, "auto"):
            return select_tile_len(self.seq_len)
        return int(self.tile_len)

    _INT_KEYS = (
        "image_size", "patch_size", "in_channels", "embed_dim", "inner_dim",
        "state_dim", "depth", "map_heads", "num_classes", "conv_width",
    )
    _BOOL_KEYS = ("reverse_between_blocks", "unreverse_output")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "tile_len":
                v = "auto" if v in (None, "auto") else int(v)
            if isinstance(v, bool):
                v = int(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, val in raw.items():
            if key not in names:
                raise ShapeError(f"unknown config key {key!r}")
            if key == "tile_len":
                kwargs[key] = None if str(val) == "auto" else int(val)
            elif key in cls._INT_KEYS:
                kwargs[key] = int(val)
            elif key in cls._BOOL_KEYS:
                kwargs[key] = bool(int(val))
            else:
                kwargs[key] = str(val)
        return cls(**kwargs)


def init_model_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Flat name -> array parameter dict.

    Weights are drawn in float64 for seed stability and cast afterwards, so
    a float32 model is exactly the rounded float64 initialisation.
    """
    rng = seeded_rng(seed)
    D = cfg.embed_dim
    patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels
    params = {
        "patch_w": rng.standard_normal((patch_in, D)) / np.sqrt(patch_in),
        "patch_b": np.zeros(D),
        "pos": 0.02 * rng.standard_normal((cfg.seq_len, D)),
    }
    if cfg.num_class_tokens:
        params["cls"] = 0.02 * rng.standard_normal((cfg.num_class_tokens, D))
    for i in range(cfg.depth):
        bw = block_mod.init_block_weights(rng, D, cfg.inner_dim, cfg.state_dim, cfg.conv_width)
        params.update(bw.named(prefix=f"blocks.{i}."))
    if cfg.head == "map":
        params["head.q"] = rng.standard_normal(D) / np.sqrt(D)
        params["head.wk"] = rng.standard_normal((D, D)) / np.sqrt(D)
        params["head.wv"] = rng.standard_normal((D, D)) / np.sqrt(D)
    hidden = 4 * D
    params["head.mlp_w1"] = rng.standard_normal((D, hidden)) / np.sqrt(D)
    params["head.mlp_b1"] = np.zeros(hidden)
    params["head.mlp_w2"] = rng.standard_normal((hidden, cfg.num_classes)) / np.sqrt(hidden)
    params["head.mlp_b2"] = np.zeros(cfg.num_classes)
    if dtype is not np.float64:
        params = {k: v.astype(dtype) for k, v in params.items()}
    return params


def block_weights(params: dict, i: int) -> block_mod.BlockWeights:
    return block_mod.BlockWeights.from_named(params, prefix=f"blocks.{i}.")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, L, patch*patch*C) in row-major patch order."""
    B, H, W, C = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, gh, patch, gw, patch, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch * patch * C)


def insert_class_token(tokens: np.ndarray, cls: np.ndarray, mode: str) -> np.ndarray:
    """Insert learned token(s): prepend, midpoint, or both ends."""
    B, L, D = tokens.shape
    if mode == "none":
        return tokens
    tile = lambda i: np.broadcast_to(cls[i], (B, 1, D))
    if mode == "head":
        return np.concatenate([tile(0), tokens], axis=1)
    if mode == "middle":
        mid = L // 2
        return np.concatenate([tokens[:, :mid], tile(0), tokens[:, mid:]], axis=1)
    if mode == "double":
        return np.concatenate([tile(0), tokens, tile(1)], axis=1)
    raise ShapeError(f"unknown class token mode {mode!r}")


def class_token_positions(cfg: ModelConfig) -> list[int]:
    if cfg.class_token == "none":
        return []
    if cfg.class_token == "head":
        return [0]
    if cfg.class_token == "middle":
        return [cfg.num_patches // 2]
    return [0, cfg.seq_len - 1]


def patch_embed(images: np.ndarray, cfg: ModelConfig, params: dict) -> np.ndarray:
    """Patchify, project, insert class tokens, add positional embedding."""
    B, H, W, C = images.shape
    if H != cfg.image_size or W != cfg.image_size or C != cfg.in_channels:
        raise ShapeError(
            f"image shape {images.shape[1:]} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.in_channels})"
        )
    tokens = nn.linear(patchify(images, cfg.patch_size), params["patch_w"], params["patch_b"])
    if cfg.num_class_tokens:
        tokens = insert_class_token(tokens, params["cls"], cfg.class_token)
    return tokens + params["pos"]


def run_blocks(tokens, cfg: ModelConfig, params: dict, scan_impl="par", workers=1, keep_cache=False):
    """U encoder blocks with per-block reversal; optionally undo an odd
    number of reversals so the caller sees original token order."""
    caches = []
    for i in range(cfg.depth):
        tokens, cache = block_mod.block_forward_cached(
            tokens, block_weights(params, i), cfg.resolved_tile_len,
            scan_impl=scan_impl, workers=workers,
            reverse=cfg.reverse_between_blocks,
            discretize_mode=cfg.discretize_mode, keep_cache=keep_cache,
        )
        caches.append(cache)
    flipped = cfg.reverse_between_blocks and cfg.depth % 2 == 1
    if flipped and cfg.unreverse_output:
        tokens = tokens[:, ::-1].copy()
        final_flip = True
    else:
        final_flip = False
    return tokens, caches, final_flip


def _token_order_map(cfg: ModelConfig, final_flip: bool) -> bool:
    """True when run_blocks output is in original order."""
    if not cfg.reverse_between_blocks or cfg.depth % 2 == 0:
        return True
    return final_flip


def backbone(images, cfg: ModelConfig, params: dict, scan_impl="par", workers=1):
    tokens = patch_embed(images, cfg, params)
    out, _, _ = run_blocks(tokens, cfg, params, scan_impl=scan_impl, workers=workers)
    return out


def head_gap(tokens, params: dict):
    """Order-invariant pooled classifier; exact under sequence reversal."""
    logits, _ = _head_gap_cached(tokens, params)
    return logits


def _mlp_cached(pooled, params):
    h1 = nn.linear(pooled, params["head.mlp_w1"], params["head.mlp_b1"])
    a1 = nn.gelu(h1)
    logits = nn.linear(a1, params["head.mlp_w2"], params["head.mlp_b2"])
    return logits, (pooled, h1, a1)


def _mlp_backward(cache, params, g_logits, gw):
    pooled, h1, a1 = cache
    g_a1, gw["head.mlp_w2"], gw["head.mlp_b2"] = nn.linear_grad(
        a1, params["head.mlp_w2"], g_logits, with_bias=True
    )
    g_h1 = g_a1 * nn.gelu_grad(h1)
    g_pooled, gw["head.mlp_w1"], gw["head.mlp_b1"] = nn.linear_grad(
        pooled, params["head.mlp_w1"], g_h1, with_bias=True
    )
    return g_pooled


def _head_gap_cached(tokens, params):
    pooled = nn.reversal_invariant_mean(tokens)
    logits, mlp_cache = _mlp_cached(pooled, params)
    return logits, ("gap", tokens.shape, mlp_cache)


def head_map(tokens, params: dict, num_heads: int):
    logits, cache = _head_map_cached(tokens, params, num_heads)
    return logits, cache[3]


def _head_map_cached(tokens, params, num_heads):
    B, L, D = tokens.shape
    dh = D // num_heads
    K = nn.linear(tokens, params["head.wk"]).reshape(B, L, num_heads, dh)
    V = nn.linear(tokens, params["head.wv"]).reshape(B, L, num_heads, dh)
    q = params["head.q"].reshape(num_heads, dh)
    scores = np.einsum("blhd,hd->blh", K, q) / np.sqrt(dh)
    att = nn.softmax(scores, axis=1)  # single query: weights over positions
    pooled = np.einsum("blh,blhd->bhd", att, V).reshape(B, D)
    logits, mlp_cache = _mlp_cached(pooled, params)
    return logits, ("map", (tokens, K, V, scores, att, num_heads), mlp_cache, att)


def model_forward(images, cfg: ModelConfig, params: dict, scan_impl="par", workers=1):
    logits, _ = model_forward_cached(images, cfg, params, scan_impl=scan_impl, workers=workers, keep_cache=False)
    return logits


def model_forward_cached(images, cfg, params, scan_impl="par", workers=1, keep_cache=True):
    B, H, W, C = images.shape
    if H != cfg.image_size or W != cfg.image_size or C != cfg.in_channels:
        raise ShapeError(
            f"image shape {images.shape[1:]} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.in_channels})"
        )
    patches = patchify(images, cfg.patch_size)
    tokens0 = nn.linear(patches, params["patch_w"], params["patch_b"])
    if cfg.num_class_tokens:
        tokens0 = insert_class_token(tokens0, params["cls"], cfg.class_token)
    tokens0 = tokens0 + params["pos"]
    tokens, caches, final_flip = run_blocks(
        tokens0, cfg, params, scan_impl=scan_impl, workers=workers, keep_cache=keep_cache
    )
    in_order = _token_order_map(cfg, final_flip)
    if cfg.class_token != "none":
        pos = class_token_positions(cfg)
        L = tokens.shape[1]
        idx = pos if in_order else [L - 1 - p for p in pos]
        readout = tokens[:, idx].mean(axis=1)
        logits, mlp_cache = _mlp_cached(readout, params)
        head_cache = ("cls", (idx, tokens.shape), mlp_cache)
    elif cfg.head == "gap":
        logits, head_cache = _head_gap_cached(tokens, params)
    else:
        logits, head_cache = _head_map_cached(tokens, params, cfg.map_heads)
    cache = None
    if keep_cache:
        cache = dict(
            images_shape=images.shape, patches=patches, block_caches=caches,
            head_cache=head_cache, final_flip=final_flip, tokens=tokens,
        )
    return logits, cache


def _head_backward(cache, cfg, params, g_logits, gw):
    head_cache = cache["head_cache"]
    kind = head_cache[0]
    if kind == "cls":
        idx, tshape = head_cache[1]
        g_pooled = _mlp_backward(head_cache[2], params, g_logits, gw)
        g_tokens = np.zeros(tshape)
        for p in idx:
            g_tokens[:, p] += g_pooled / len(idx)
        return g_tokens
    if kind == "gap":
        tshape = head_cache[1]
        g_pooled = _mlp_backward(head_cache[2], params, g_logits, gw)
        g_tokens = np.broadcast_to(g_pooled[:, None, :] / tshape[1], tshape).copy()
        return g_tokens
    # map head
    tokens, K, V, scores, att, num_heads = head_cache[1]
    B, L, D = tokens.shape
    dh = D // num_heads
    g_pooled = _mlp_backward(head_cache[2], params, g_logits, gw).reshape(B, num_heads, dh)
    g_att = np.einsum("bhd,blhd->blh", g_pooled, V)
    g_V = np.einsum("blh,bhd->blhd", att, g_pooled)
    g_scores = att * (g_att - np.sum(att * g_att, axis=1, keepdims=True))
    q = params["head.q"].reshape(num_heads, dh)
    g_K = np.einsum("blh,hd->blhd", g_scores, q) / np.sqrt(dh)
    gw["head.q"] = (np.einsum("blh,blhd->hd", g_scores, K) / np.sqrt(dh)).reshape(-1)
    g_tokens, gw["head.wk"] = nn.linear_grad(tokens, params["head.wk"], g_K.reshape(B, L, D))
    g_tokens2, gw["head.wv"] = nn.linear_grad(tokens, params["head.wv"], g_V.reshape(B, L, D))
    return g_tokens + g_tokens2


def tokens_backward(cache, g_tokens, cfg: ModelConfig, params: dict, gw: dict | None = None):
    """Back-propagate a gradient on the final token sequence down to the
    input images, filling ``gw`` with block/embedding parameter grads."""
    gw = {} if gw is None else gw
    if cache["final_flip"]:
        g_tokens = g_tokens[:, ::-1]
    for i in range(cfg.depth - 1, -1, -1):
        grads, g_tokens = block_mod.block_backward(
            cache["block_caches"][i], block_weights(params, i), g_tokens
        )
        gw.update(grads.named(prefix=f"blocks.{i}."))
    gw["pos"] = np.sum(g_tokens, axis=0)
    if cfg.num_class_tokens:
        pos = class_token_positions(cfg)
        gw["cls"] = np.stack([np.sum(g_tokens[:, p], axis=0) for p in pos])
        keep = [i for i in range(cfg.seq_len) if i not in pos]
        g_tokens = g_tokens[:, keep]
    g_flat, gw["patch_w"], gw["patch_b"] = nn.linear_grad(
        cache["patches"], params["patch_w"], g_tokens, with_bias=True
    )
    g_images = _unpatchify_grad(g_flat, cache["images_shape"], cfg.patch_size)
    return gw, g_images


def model_backward(cache, g_logits, cfg: ModelConfig, params: dict):
    """Gradients for every parameter plus the input images."""
    gw: dict = {}
    g_tokens = _head_backward(cache, cfg, params, g_logits, gw)
    gw, g_images = tokens_backward(cache, g_tokens, cfg, params, gw)
    for name in params:
        if name not in gw:
            gw[name] = np.zeros_like(params[name])
    return gw, g_images


def _unpatchify_grad(g_flat, images_shape, patch):
    B, H, W, C = images_shape
    gh, gw_ = H // patch, W // patch
    g = g_flat.reshape(B, gh, gw_, patch, patch, C)
    g = g.transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(B, H, W, C)
