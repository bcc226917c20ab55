"""Data model for dot-annotated crowd images plus dataset analysis helpers.

A dataset is a JSON manifest naming PNG images and per-person dot
annotations. Each dot is an (x, y) pixel location with a category label
in ``1..k``; coordinates are floats with the origin at the top-left.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class ManifestError(ValueError):
    """Raised when a manifest file or its referenced data is invalid."""


@dataclass
class DotAnnotation:
    """Per-person point locations with category labels for one image."""

    xy: np.ndarray            # (n, 2) float64 pixel coordinates (x, y)
    categories: np.ndarray    # (n,) int64, values in 1..k
    image_size: tuple[int, int]   # (height, width)
    k: int

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.categories = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.k = int(self.k)
        if self.k < 1:
            raise ManifestError(f"category count must be >= 1, got {self.k}")
        if self.xy.shape[0] != self.categories.shape[0]:
            raise ManifestError("points and categories differ in length")

    @classmethod
    def from_points(cls, points, image_size, k) -> "DotAnnotation":
        """Build from an iterable of (x, y, category) triples."""
        pts = list(points)
        if pts:
            arr = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
            return cls(arr[:, :2], arr[:, 2].astype(np.int64), image_size, k)
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), image_size, k)

    @property
    def n_points(self) -> int:
        return self.xy.shape[0]

    def points_of(self, category: int) -> np.ndarray:
        """(m, 2) coordinates of the dots labelled with one category."""
        return self.xy[self.categories == category]

    def to_points(self) -> list[list[float]]:
        return [[float(x), float(y), int(c)]
                for (x, y), c in zip(self.xy, self.categories)]

    def validate(self, where: str = "annotation") -> None:
        """Check bounds and label ranges; raise ManifestError naming the culprit."""
        h, w = self.image_size
        for i, ((x, y), c) in enumerate(zip(self.xy, self.categories)):
            if not (0.0 <= x < w and 0.0 <= y < h):
                raise ManifestError(
                    f"{where}: point {i} at ({x}, {y}) outside {h}x{w} image bounds")
            if not (1 <= c <= self.k):
                raise ManifestError(
                    f"{where}: point {i} has category {c}, expected 1..{self.k}")


@dataclass
class Sample:
    """One image with its annotation."""

    id: str
    image: np.ndarray   # (h, w) or (h, w, 3) float32 in [0, 1]
    annotation: DotAnnotation

    def __post_init__(self):
        if self.image.shape[:2] != self.annotation.image_size:
            raise ManifestError(
                f"sample {self.id}: image shape {self.image.shape[:2]} does not "
                f"match annotation size {self.annotation.image_size}")


@dataclass
class DatasetManifest:
    """A split of samples sharing one category scheme."""

    samples: list[Sample]
    split: str = "train"
    k: int = 2
    category_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class StatsReport:
    """Per-dataset count statistics in the style of a dataset summary table."""

    n_images: int
    min_count: int
    avg_count: float
    max_count: int
    total_count: int
    category_totals: list[int]
    category_shares: list[float]   # percent of all dots per category
    avg_resolution: tuple[float, float]   # (height, width)

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "min_count": self.min_count,
            "avg_count": self.avg_count,
            "max_count": self.max_count,
            "total_count": self.total_count,
            "category_totals": self.category_totals,
            "category_shares": self.category_shares,
            "avg_resolution": list(self.avg_resolution),
        }


def load_image(path) -> np.ndarray:
    """Decode a PNG to float32 in [0, 1]; grayscale (h, w) or RGB (h, w, 3)."""
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise ManifestError(f"image file not found: {path}")
    except OSError as e:
        raise ManifestError(f"cannot decode image {path}: {e}")
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB").save(path)


def load_manifest(path) -> DatasetManifest:
    """Load and fully validate a manifest JSON plus every referenced image."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON: {e}")
    for key in ("k", "category_names", "samples"):
        if key not in spec:
            raise ManifestError(f"{path}: missing manifest key {key!r}")
    k = int(spec["k"])
    names = [str(n) for n in spec["category_names"]]
    if len(names) != k:
        raise ManifestError(
            f"{path}: expected {k} category names, got {len(names)}")
    samples = []
    for rec in spec["samples"]:
        for key in ("id", "image", "points"):
            if key not in rec:
                raise ManifestError(f"{path}: sample record missing {key!r}")
        sid = str(rec["id"])
        image = load_image(path.parent / rec["image"])
        ann = DotAnnotation.from_points(rec["points"], image.shape[:2], k)
        ann.validate(where=f"sample {sid!r}")
        samples.append(Sample(id=sid, image=image, annotation=ann))
    return DatasetManifest(samples=samples, split=str(spec.get("split", "train")),
                           k=k, category_names=names)


def save_manifest(manifest: DatasetManifest, path, image_dir: str = "images") -> Path:
    """Write manifest JSON and PNG images; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img_root = path.parent / image_dir
    img_root.mkdir(parents=True, exist_ok=True)
    records = []
    for s in manifest.samples:
        rel = f"{image_dir}/{s.id}.png"
        save_image(path.parent / rel, s.image)
        records.append({"id": s.id, "image": rel, "points": s.annotation.to_points()})
    spec = {
        "k": manifest.k,
        "category_names": manifest.category_names,
        "split": manifest.split,
        "samples": records,
    }
    path.write_text(json.dumps(spec, indent=1))
    return path


def dataset_stats(manifest: DatasetManifest) -> StatsReport:
    """Min/avg/max/total person counts, category shares, average resolution."""
    if not manifest.samples:
        raise ManifestError("cannot compute statistics of an empty manifest")
    counts = [s.annotation.n_points for s in manifest.samples]
    cat_totals = [0] * manifest.k
    for s in manifest.samples:
        for j in range(1, manifest.k + 1):
            cat_totals[j - 1] += int(np.sum(s.annotation.categories == j))
    total = int(sum(counts))
    shares = [100.0 * t / total if total else 0.0 for t in cat_totals]
    heights = [s.image.shape[0] for s in manifest.samples]
    widths = [s.image.shape[1] for s in manifest.samples]
    return StatsReport(
        n_images=len(counts),
        min_count=int(min(counts)),
        avg_count=total / len(counts),
        max_count=int(max(counts)),
        total_count=total,
        category_totals=cat_totals,
        category_shares=shares,
        avg_resolution=(float(np.mean(heights)), float(np.mean(widths))),
    )


def spatial_probability_maps(manifest: DatasetManifest, grid: tuple[int, int],
                             log_floor: float = 1e-12):
    """Normalized per-category dot histograms on a common grid.

    Every dot is rescaled from its image resolution onto ``grid`` and
    accumulated per category; each non-empty category map sums to 1.
    Returns (maps, log_ratio) where maps has shape (k, gh, gw) and
    log_ratio is log((p1 + floor) / (p2 + floor)) for the first two
    categories, or None unless both of them have at least one dot.
    """
    gh, gw = int(grid[0]), int(grid[1])
    if gh < 1 or gw < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {grid}")
    k = manifest.k
    maps = np.zeros((k, gh, gw), dtype=np.float64)
    for s in manifest.samples:
        h, w = s.annotation.image_size
        for (x, y), c in zip(s.annotation.xy, s.annotation.categories):
            gy = min(int(y / h * gh), gh - 1)
            gx = min(int(x / w * gw), gw - 1)
            maps[c - 1, gy, gx] += 1.0
    for j in range(k):
        total = maps[j].sum()
        if total > 0:
            maps[j] /= total
    log_ratio = None
    if k >= 2 and maps[0].sum() > 0 and maps[1].sum() > 0:
        log_ratio = np.log(maps[0] + log_floor) - np.log(maps[1] + log_floor)
    return maps, log_ratio


def _resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    th, tw = target
    if image.shape[:2] == (th, tw):
        return image.astype(np.float64)
    if image.ndim == 2:
        im = Image.fromarray(image.astype(np.float32), mode="F")
        return np.asarray(im.resize((tw, th), Image.BILINEAR), dtype=np.float64)
    chans = [_resize_bilinear(image[..., c], target) for c in range(image.shape[2])]
    return np.stack(chans, axis=-1)


def average_image(manifest: DatasetManifest, target: tuple[int, int]) -> np.ndarray:
    """Per-pixel mean of all images bilinearly resized to a common size.

    Mixed grayscale/RGB manifests are averaged in grayscale.
    """
    if not manifest.samples:
        raise ManifestError("cannot average an empty manifest")
    ndims = {s.image.ndim for s in manifest.samples}
    acc = None
    for s in manifest.samples:
        img = s.image
        if len(ndims) > 1 and img.ndim == 3:
            img = img.mean(axis=2)
        resized = _resize_bilinear(img, target)
        acc = resized if acc is None else acc + resized
    return acc / len(manifest.samples)
