import numpy as np
import pytest
from hypothesis import settings

from hardmoe.data import MultiLabelDataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def tiny_dataset(n=12, d=3, m=5, seed=0, split="train"):
    """Random small dataset; every example carries 1-3 tags."""
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, d)).astype(np.float32)
    tags = [rng.choice(m, size=rng.integers(1, min(3, m) + 1), replace=False) for _ in range(n)]
    return MultiLabelDataset.from_tag_lists(feats, tags, m, split=split)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
