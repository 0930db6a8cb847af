import numpy as np
import pytest

from crowdnms.geometry import Box, ScoredProposal


def make_box(x, y, w, h):
    return Box(x=float(x), y=float(y), w=float(w), h=float(h))


def make_prop(x, y, w, h, score, image_id="img"):
    return ScoredProposal(box=make_box(x, y, w, h), score=float(score), image_id=image_id)


def random_proposals(rng, n, image_id="img", span=100.0):
    """Clustered random proposals so IoU overlaps actually occur."""
    props = []
    for _ in range(n):
        x = rng.uniform(0, span)
        y = rng.uniform(0, span)
        w = rng.uniform(5, 40)
        h = rng.uniform(5, 40)
        s = rng.uniform(0.05, 1.0)
        props.append(make_prop(x, y, w, h, s, image_id))
    return props


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
