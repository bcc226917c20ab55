"""PNG rendering of density heat maps, segmentation masks, and count panels."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

# Fixed palette: category 1 warm, category 2 cool, extras rotate hues.
CATEGORY_COLORS = [(255, 96, 0), (0, 128, 255), (0, 200, 80), (200, 0, 200)]


def _category_color(j: int):
    return CATEGORY_COLORS[j % len(CATEGORY_COLORS)]


def to_rgb(image: np.ndarray) -> np.ndarray:
    """float [0,1] image (gray or RGB) -> uint8 RGB array."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.round(arr * 255).astype(np.uint8)


def upsample_nearest(values: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(values, factor, axis=-2), factor, axis=-1)


def density_overlay(image: np.ndarray, density: np.ndarray, color,
                    stride: int = 4) -> np.ndarray:
    """Blend a stride-aligned density map over the image in one hue."""
    base = to_rgb(image).astype(np.float64)
    dens = upsample_nearest(np.clip(density, 0, None), stride)
    dens = dens[:base.shape[0], :base.shape[1]]
    peak = dens.max()
    alpha = (dens / peak if peak > 0 else dens)[:, :, None]
    tint = np.array(color, dtype=np.float64)[None, None, :]
    out = base * (1 - 0.75 * alpha) + tint * 0.75 * alpha
    return np.round(out).astype(np.uint8)


def segmentation_mask(image: np.ndarray, seg: np.ndarray,
                      stride: int = 4) -> np.ndarray:
    """Argmax mask over category channels; background stays transparent."""
    base = to_rgb(image).astype(np.float64)
    k = seg.shape[0] - 1
    up = upsample_nearest(seg, stride)[:, :base.shape[0], :base.shape[1]]
    label = up[:k].argmax(axis=0)
    foreground = up[-1] < 0.5
    out = base.copy()
    for j in range(k):
        mask = foreground & (label == j)
        tint = np.array(_category_color(j), dtype=np.float64)
        out[mask] = 0.45 * base[mask] + 0.55 * tint
    return np.round(out).astype(np.uint8)


def _caption(img: Image.Image, text: str) -> Image.Image:
    bar = Image.new("RGB", (img.width, 14), (16, 16, 16))
    draw = ImageDraw.Draw(bar)
    draw.text((3, 2), text, fill=(240, 240, 240))
    panel = Image.new("RGB", (img.width, img.height + 14))
    panel.paste(bar, (0, 0))
    panel.paste(img, (0, 14))
    return panel


def comparison_panel(image: np.ndarray, gt_fine: np.ndarray,
                     pred_fine: np.ndarray, pred_seg: np.ndarray | None,
                     stride: int = 4) -> Image.Image:
    """Side-by-side ground truth / prediction tiles with count captions."""
    k = gt_fine.shape[0]
    tiles = [_caption(Image.fromarray(to_rgb(image)), "input")]
    for j in range(k):
        gt_img = density_overlay(image, gt_fine[j], _category_color(j), stride)
        count = float(gt_fine[j].sum())
        tiles.append(_caption(Image.fromarray(gt_img), f"gt cat {j + 1}: {count:.1f}"))
    for j in range(k):
        pr_img = density_overlay(image, pred_fine[j], _category_color(j), stride)
        count = float(pred_fine[j].sum())
        tiles.append(_caption(Image.fromarray(pr_img), f"pred cat {j + 1}: {count:.1f}"))
    if pred_seg is not None:
        seg_img = segmentation_mask(image, pred_seg, stride)
        tiles.append(_caption(Image.fromarray(seg_img), "pred segmentation"))
    width = sum(t.width for t in tiles) + 2 * (len(tiles) - 1)
    height = max(t.height for t in tiles)
    panel = Image.new("RGB", (width, height), (32, 32, 32))
    x = 0
    for t in tiles:
        panel.paste(t, (x, 0))
        x += t.width + 2
    return panel


def grayscale_png(values: np.ndarray, path) -> None:
    """Normalize a non-negative map by its max and save as 8-bit PNG."""
    v = np.asarray(values, dtype=np.float64)
    peak = v.max()
    if peak > 0:
        v = v / peak
    Image.fromarray(np.round(np.clip(v, 0, 1) * 255).astype(np.uint8)).save(path)


def diverging_png(values: np.ndarray, path) -> None:
    """Signed map -> red (positive) / white (zero) / blue (negative) PNG."""
    v = np.asarray(values, dtype=np.float64)
    scale = np.abs(v).max()
    if scale > 0:
        v = v / scale
    pos = np.clip(v, 0, 1)[..., None]
    neg = np.clip(-v, 0, 1)[..., None]
    white = np.full(v.shape + (3,), 255.0)
    red = np.array([220.0, 40.0, 30.0])
    blue = np.array([40.0, 70.0, 220.0])
    out = white * (1 - pos - neg) + red * pos + blue * neg
    Image.fromarray(np.round(np.clip(out, 0, 255)).astype(np.uint8)).save(path)
