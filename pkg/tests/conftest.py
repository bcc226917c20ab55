import numpy as np
import pytest

from finecount.annotations import DatasetManifest, DotAnnotation, Sample


def make_annotation(points, size=(64, 64), k=2):
    return DotAnnotation.from_points(points, size, k)


def make_sample(points, size=(64, 64), k=2, sid="s0", image=None):
    if image is None:
        image = np.zeros(size, dtype=np.float32)
    return Sample(id=sid, image=image, annotation=make_annotation(points, size, k))


def make_manifest(samples, k=2, split="train", names=None):
    names = names or [f"cat{j}" for j in range(1, k + 1)]
    return DatasetManifest(samples=samples, split=split, k=k,
                           category_names=names)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
