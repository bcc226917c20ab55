"""Ground-truth density and soft segmentation maps from dot annotations.

Each dot contributes one truncated 2-D Gaussian of exactly unit mass
(renormalized inside the image, so border dots still count fully), so
the spatial sum of a density map equals the number of annotated people.
Soft category maps are density ratios and the background channel is an
indicator of near-zero total density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import DotAnnotation

# Background threshold and ratio guard shared across the toolkit.
DEFAULT_EPSILON = 1e-3
DEFAULT_ETA = 1e-6

# Per-dot bandwidth clamp for the adaptive kernel; isolated dots get the max.
SIGMA_MIN = 1.0
SIGMA_MAX = 32.0


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel used to turn dots into density.

    ``fixed`` mode uses ``sigma`` everywhere; ``adaptive`` mode scales the
    mean distance to the ``k_neighbors`` nearest dots in the same image by
    ``scale_factor``, clamped to [SIGMA_MIN, SIGMA_MAX].
    """

    mode: str = "fixed"
    sigma: float = 4.0
    k_neighbors: int = 3
    scale_factor: float = 0.3
    truncation_radius: float = 4.0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"kernel mode must be fixed|adaptive, got {self.mode!r}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.truncation_radius < 3:
            raise ValueError(
                f"truncation radius must be >= 3 sigma, got {self.truncation_radius}")
        if self.k_neighbors < 1 or self.scale_factor <= 0:
            raise ValueError("adaptive kernel needs k_neighbors >= 1 and scale > 0")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "sigma": self.sigma,
                "k_neighbors": self.k_neighbors, "scale_factor": self.scale_factor,
                "truncation_radius": self.truncation_radius}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)


def adaptive_sigmas(xy: np.ndarray, k_neighbors: int, scale_factor: float) -> np.ndarray:
    """Per-dot bandwidths from mean nearest-neighbor distance over all dots."""
    n = xy.shape[0]
    sigmas = np.full(n, SIGMA_MAX, dtype=np.float64)
    if n < 2:
        return sigmas
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    kk = min(k_neighbors, n - 1)
    nearest = np.sort(dist, axis=1)[:, :kk]
    sigmas = scale_factor * nearest.mean(axis=1)
    return np.clip(sigmas, SIGMA_MIN, SIGMA_MAX)


def _add_unit_gaussian(out: np.ndarray, x: float, y: float, sigma: float,
                       truncation_radius: float) -> None:
    h, w = out.shape
    r = int(np.ceil(truncation_radius * sigma))
    x0, x1 = max(int(np.floor(x)) - r, 0), min(int(np.floor(x)) + r + 1, w)
    y0, y1 = max(int(np.floor(y)) - r, 0), min(int(np.floor(y)) + r + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    gx = np.arange(x0, x1, dtype=np.float64) - x
    gy = np.arange(y0, y1, dtype=np.float64) - y
    g = np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2.0 * sigma ** 2))
    out[y0:y1, x0:x1] += g / g.sum()


def render_density_map(annotation: DotAnnotation, category: int,
                       kernel: KernelSpec) -> np.ndarray:
    """Density map for one category; spatial sum equals its dot count."""
    if not 1 <= category <= annotation.k:
        raise ValueError(f"category {category} outside 1..{annotation.k}")
    h, w = annotation.image_size
    out = np.zeros((h, w), dtype=np.float64)
    mask = annotation.categories == category
    if not mask.any():
        return out
    if kernel.mode == "adaptive":
        sigmas = adaptive_sigmas(annotation.xy, kernel.k_neighbors,
                                 kernel.scale_factor)[mask]
    else:
        sigmas = np.full(int(mask.sum()), kernel.sigma, dtype=np.float64)
    for (x, y), sigma in zip(annotation.xy[mask], sigmas):
        _add_unit_gaussian(out, x, y, sigma, kernel.truncation_radius)
    return out


def render_category_densities(annotation: DotAnnotation,
                              kernel: KernelSpec) -> np.ndarray:
    """(k, h, w) stack of per-category density maps."""
    return np.stack([render_density_map(annotation, j, kernel)
                     for j in range(1, annotation.k + 1)])


def make_segmentation_maps(density_maps, epsilon: float = DEFAULT_EPSILON,
                           eta: float = DEFAULT_ETA) -> np.ndarray:
    """(k+1, h, w) soft category maps plus binary background channel.

    Channel j is Y_j / (eta + total); the last channel indicates
    total <= epsilon. Category channels and background are defined
    independently, so their sum may slightly exceed 1 where the total
    density is positive but below epsilon; targets are soft weights,
    not a distribution, and are deliberately not renormalized.
    """
    if epsilon <= 0 or eta <= 0:
        raise ValueError("epsilon and eta must be positive")
    maps = [np.asarray(m, dtype=np.float64) for m in density_maps]
    if len({m.shape for m in maps}) != 1:
        raise ValueError(f"density maps differ in shape: {[m.shape for m in maps]}")
    total = np.sum(maps, axis=0)
    out = np.empty((len(maps) + 1,) + maps[0].shape, dtype=np.float64)
    denom = eta + total
    for j, m in enumerate(maps):
        out[j] = m / denom
    out[-1] = (total <= epsilon).astype(np.float64)
    return out


def _pad_to_multiple(values: np.ndarray, stride: int) -> np.ndarray:
    h, w = values.shape[-2:]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph == 0 and pw == 0:
        return values
    pad = [(0, 0)] * (values.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(values, pad)


def downsample_density(values: np.ndarray, stride: int) -> np.ndarray:
    """Sum-pool a density map so total mass is preserved exactly."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    values = np.asarray(values, dtype=np.float64)
    if stride == 1:
        return values.copy()
    v = _pad_to_multiple(values, stride)
    h, w = v.shape[-2:]
    blocks = v.reshape(v.shape[:-2] + (h // stride, stride, w // stride, stride))
    return blocks.sum(axis=(-3, -1))


def downsample_segmentation(seg: np.ndarray, stride: int, total_density: np.ndarray,
                            epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Block-average category channels; recompute background from density.

    The background channel is the indicator of block-summed total density
    <= epsilon (computed from ``total_density`` at the input resolution),
    not an average of full-resolution indicators.
    """
    seg = np.asarray(seg, dtype=np.float64)
    if stride == 1:
        return seg.copy()
    cats = downsample_density(seg[:-1], stride) / float(stride * stride)
    bg = (downsample_density(total_density, stride) <= epsilon).astype(np.float64)
    return np.concatenate([cats, bg[None]], axis=0)


def targets_from_densities(cat_densities: np.ndarray, stride: int,
                           epsilon: float = DEFAULT_EPSILON,
                           eta: float = DEFAULT_ETA):
    """Stride-aligned training targets from full-resolution category densities.

    Returns (cat_maps, total, seg) where cat_maps is (k, h/s, w/s) of
    sum-pooled per-category density, total their sum, and seg the (k+1)
    soft segmentation built from the pooled densities.
    """
    cat4 = downsample_density(np.asarray(cat_densities, dtype=np.float64), stride)
    total4 = cat4.sum(axis=0)
    seg4 = make_segmentation_maps(list(cat4), epsilon=epsilon, eta=eta)
    return cat4, total4, seg4
