"""Decoder-attention heatmap export.

The final decoder layer's attention row for a class is the model's
native localization signal: row-stochastic over spatial cells, it is
reshaped to the feature grid and bilinearly upsampled to image size.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import bilinear_resize, save_raster
from .model import IVModel


def attention_heatmap(
    model: IVModel, image: np.ndarray, tokens: list[int], class_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (pre-upsample (h, w) attention grid, upsampled (H, W) map).

    The grid sums to 1 (row-stochastic attention); the upsampled map is
    clipped to [0, 1] pixel range for raster export.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    with ad.precision(model.cfg.train.precision), ad.no_grad():
        batch = Tensor(image[None])
        token_arr = model.prepare_tokens([tokens])
        out = model.forward(batch, token_arr)
        grid = model.attention_map(out, class_index).astype(np.float64)
    upsampled = bilinear_resize(grid, image.shape[0], image.shape[1])
    return grid, np.clip(upsampled, 0.0, 1.0)


def export_attention(
    model: IVModel,
    image: np.ndarray,
    tokens: list[int],
    class_index: int,
    out_path: str | Path,
) -> np.ndarray:
    """Write the upsampled heatmap as an artifact raster; returns it."""
    _, heat = attention_heatmap(model, image, tokens, class_index)
    save_raster(out_path, heat.astype(np.float32))
    return heat


def mask_mass_fraction(heatmap: np.ndarray, mask: np.ndarray) -> float:
    """Share of heatmap mass inside a boolean mask (after normalizing)."""
    total = float(heatmap.sum())
    if total <= 0:
        return 0.0
    return float(heatmap[mask.astype(bool)].sum() / total)
