import numpy as np
import pytest

from tagfusion.collection import Collection, FeatureMatrix, ImageRecord


def make_collection(records, features=None):
    """records: [(image_id, user_id, [tags...])]; features: {name: 2-D array}."""
    recs = [ImageRecord(i, u, tuple(tags)) for i, u, tags in records]
    fms = {}
    for name, rows in (features or {}).items():
        arr = np.asarray(rows, dtype=np.float64)
        fms[name] = FeatureMatrix(name=name, dim=arr.shape[1], matrix=arr)
    return Collection(recs, fms)


def line_collection(coords, tags_per_image=None, feature="f"):
    """Images on a 1-D line; optional per-image tag lists."""
    n = len(coords)
    tags_per_image = tags_per_image or [[] for _ in range(n)]
    records = [(f"x{i:03d}", "u0", tags_per_image[i]) for i in range(n)]
    return make_collection(records, {feature: [[c] for c in coords]})


@pytest.fixture
def prior_collection():
    """1000 images, tag 'w' on the first 100: prior |S_w|/|S| = 0.1."""
    records = [
        (f"img{i:04d}", "u0", ["w"] if i < 100 else [])
        for i in range(1000)
    ]
    return make_collection(records)
