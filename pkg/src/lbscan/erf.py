"""Effective-receptive-field maps: which input pixels influence one token.

The map is the batch-mean absolute gradient of a chosen output token's
squared norm with respect to the input image, channel-summed and scaled to
[0, 1].  A one-block model shows exact zeros past the target's tile; with
two or more alternating-direction blocks the field covers the whole image.
"""

from __future__ import annotations

import numpy as np

from . import model as model_mod
from .core import ShapeError
from .model import ModelConfig


def token_index_of_patch(cfg: ModelConfig, patch_idx: int) -> int:
    """Token position of a patch once class tokens are inserted."""
    if cfg.class_token in ("head", "double"):
        return patch_idx + 1
    if cfg.class_token == "middle":
        return patch_idx + (1 if patch_idx >= cfg.num_patches // 2 else 0)
    return patch_idx


def center_token(cfg: ModelConfig) -> int:
    g = cfg.grid
    return token_index_of_patch(cfg, (g // 2) * g + g // 2)


def compute_erf(cfg: ModelConfig, params: dict, images, target: int | None = None):
    """Heatmap (H, W) of |d ||token||^2 / d image|, normalised to [0, 1]."""
    if images.ndim != 4:
        raise ShapeError(f"images must be (B, H, W, C), got {images.shape}")
    idx = center_token(cfg) if target is None else int(target)
    _, cache = model_mod.model_forward_cached(images, cfg, params, scan_impl="seq")
    tokens = cache["tokens"]
    g_tokens = np.zeros_like(tokens)
    g_tokens[:, idx] = 2.0 * tokens[:, idx]
    _, g_images = model_mod.tokens_backward(cache, g_tokens, cfg, params)
    heat = np.mean(np.sum(np.abs(g_images), axis=-1), axis=0)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return heat


def write_pgm(path, heat: np.ndarray) -> None:
    """8-bit binary PGM of a [0, 1] heatmap."""
    if heat.ndim != 2:
        raise ShapeError(f"heatmap must be 2-D, got {heat.shape}")
    pixels = np.clip(np.round(heat * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{heat.shape[1]} {heat.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def write_csv(path, heat: np.ndarray) -> None:
    np.savetxt(path, heat, delimiter=",", fmt="%.8g")
