"""Deterministic synthetic scenes where category depends on context only.

Each scene contains a bright square marker, a chain of blobs queued away
from it at fixed spacing (category 1), and isolated walker blobs far from
the chain (category 2). Queue and walker blobs are rendered identically,
so appearance alone cannot separate the categories; only the spatial
relation to the marker/chain carries the label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import DatasetManifest, DotAnnotation, Sample, save_manifest

MARKER_SIDE = 7
MARKER_INTENSITY = 1.0
BLOB_PEAK = 0.85
JITTER_FRACTION = 0.07      # per-axis jitter as a fraction of queue spacing
WALKER_CLEARANCE = 3.0      # walker-to-chain distance in units of spacing
MAX_TRIES = 2000


class SceneGenerationError(RuntimeError):
    """Raised when blob placement fails after bounded retries."""


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int] = (128, 128)
    n_queue: int = 5
    n_walkers: int = 5
    marker_position: tuple[float, float] = (64.0, 64.0)   # (x, y)
    queue_spacing: float = 10.0
    blob_radius: float = 3.0
    noise_level: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_queue + self.n_walkers < 1:
            raise ValueError("a scene needs at least one person")
        if self.queue_spacing <= 2 * self.blob_radius:
            raise ValueError("queue spacing must exceed the blob diameter")
        if self.n_queue < 0 or self.n_walkers < 0 or self.noise_level < 0:
            raise ValueError("counts and noise level must be non-negative")


@dataclass(frozen=True)
class SceneRanges:
    """Uniform sampling ranges for per-scene parameters."""

    size: tuple[int, int] = (128, 128)
    n_queue: tuple[int, int] = (3, 7)
    n_walkers: tuple[int, int] = (3, 7)
    queue_spacing: tuple[float, float] = (9.0, 12.0)
    blob_radius: tuple[float, float] = (2.5, 3.5)
    noise_level: tuple[float, float] = (0.02, 0.05)


CATEGORY_NAMES = ["queued", "walking"]


def _draw_blob(canvas: np.ndarray, x: float, y: float, radius: float,
               peak: float = BLOB_PEAK) -> None:
    h, w = canvas.shape
    r = int(np.ceil(radius)) + 1
    x0, x1 = max(int(x) - r, 0), min(int(x) + r + 2, w)
    y0, y1 = max(int(y) - r, 0), min(int(y) + r + 2, h)
    gx = np.arange(x0, x1, dtype=np.float64) - x
    gy = np.arange(y0, y1, dtype=np.float64) - y
    dist = np.sqrt(gy[:, None] ** 2 + gx[None, :] ** 2)
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0) * peak
    canvas[y0:y1, x0:x1] = np.maximum(canvas[y0:y1, x0:x1], alpha)


def _draw_marker(canvas: np.ndarray, x: float, y: float) -> None:
    h, w = canvas.shape
    half = MARKER_SIDE // 2
    x0, x1 = max(int(x) - half, 0), min(int(x) + half + 1, w)
    y0, y1 = max(int(y) - half, 0), min(int(y) + half + 1, h)
    canvas[y0:y1, x0:x1] = MARKER_INTENSITY


def _place_queue(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Chain positions marching away from the marker; retries directions."""
    if spec.n_queue == 0:
        return np.zeros((0, 2))
    h, w = spec.size
    mx, my = spec.marker_position
    margin = spec.blob_radius + 2.0
    start = MARKER_SIDE / 2 + spec.blob_radius + 1.5
    jitter = JITTER_FRACTION * spec.queue_spacing
    for _ in range(MAX_TRIES):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.array([np.cos(theta), np.sin(theta)])
        offsets = rng.uniform(-jitter, jitter, size=(spec.n_queue, 2))
        dist = start + spec.queue_spacing * np.arange(spec.n_queue)
        points = np.array([mx, my]) + dist[:, None] * direction + offsets
        if (points[:, 0] >= margin).all() and (points[:, 0] < w - margin).all() \
                and (points[:, 1] >= margin).all() and (points[:, 1] < h - margin).all():
            return points
    raise SceneGenerationError(
        f"could not fit a queue of {spec.n_queue} at spacing "
        f"{spec.queue_spacing} into a {h}x{w} scene")


def _place_walkers(spec: SceneSpec, queue: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    if spec.n_walkers == 0:
        return np.zeros((0, 2))
    h, w = spec.size
    margin = spec.blob_radius + 2.0
    keepout = np.vstack([queue, np.array(spec.marker_position)[None]])
    clearance = WALKER_CLEARANCE * spec.queue_spacing
    placed: list[np.ndarray] = []
    tries = 0
    while len(placed) < spec.n_walkers:
        if tries >= MAX_TRIES:
            raise SceneGenerationError(
                f"could not place walker {len(placed) + 1}/{spec.n_walkers}; "
                "scene too crowded")
        tries += 1
        p = rng.uniform([margin, margin], [w - margin, h - margin])
        if np.linalg.norm(keepout - p, axis=1).min() <= clearance:
            continue
        if placed and np.linalg.norm(np.array(placed) - p, axis=1).min() \
                <= 2 * spec.blob_radius + 1:
            continue
        placed.append(p)
    return np.array(placed)


def generate_scene(spec: SceneSpec) -> Sample:
    """Render one scene; dots are blob centers, categories by construction."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    canvas = np.zeros((h, w), dtype=np.float64)
    _draw_marker(canvas, *spec.marker_position)
    queue = _place_queue(spec, rng)
    walkers = _place_walkers(spec, queue, rng)
    for x, y in np.vstack([queue, walkers]):
        _draw_blob(canvas, x, y, spec.blob_radius)
    canvas += rng.uniform(0.0, spec.noise_level, size=canvas.shape)
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    xy = np.vstack([queue, walkers])
    categories = np.concatenate([np.ones(len(queue), dtype=np.int64),
                                 np.full(len(walkers), 2, dtype=np.int64)])
    ann = DotAnnotation(xy=xy, categories=categories, image_size=(h, w), k=2)
    ann.validate(where=f"scene seed {spec.seed}")
    return Sample(id=f"scene_{spec.seed:010d}", image=image, annotation=ann)


def sample_spec(ranges: SceneRanges, rng: np.random.Generator) -> SceneSpec:
    h, w = ranges.size
    marker = (rng.uniform(0.25 * w, 0.75 * w), rng.uniform(0.25 * h, 0.75 * h))
    blob_radius = rng.uniform(*ranges.blob_radius)
    spacing = max(rng.uniform(*ranges.queue_spacing), 2 * blob_radius + 0.5)
    return SceneSpec(
        size=ranges.size,
        n_queue=int(rng.integers(ranges.n_queue[0], ranges.n_queue[1] + 1)),
        n_walkers=int(rng.integers(ranges.n_walkers[0], ranges.n_walkers[1] + 1)),
        marker_position=marker,
        queue_spacing=spacing,
        blob_radius=blob_radius,
        noise_level=rng.uniform(*ranges.noise_level),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def generate_manifest(n_train: int, n_test: int, ranges: SceneRanges,
                      seed: int, out_dir=None):
    """Build train/test manifests of sampled scenes; optionally write to disk."""
    if n_train < 1 or n_test < 0:
        raise ValueError("need at least one training scene")
    rng = np.random.default_rng(seed)
    splits = []
    for split, count in (("train", n_train), ("test", n_test)):
        samples = []
        for i in range(count):
            scene = generate_scene(sample_spec(ranges, rng))
            scene.id = f"{split}_{i:04d}"
            samples.append(scene)
        splits.append(DatasetManifest(samples=samples, split=split, k=2,
                                      category_names=list(CATEGORY_NAMES)))
    train, test = splits
    if out_dir is not None:
        from pathlib import Path
        out = Path(out_dir)
        save_manifest(train, out / "train.json")
        save_manifest(test, out / "test.json")
    return train, test
