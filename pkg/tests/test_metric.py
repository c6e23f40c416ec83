import itertools

import numpy as np
import pytest
import torch

from msfuse.metric import SingleClassBatch, anchor_distances, triplet_loss


def test_two_point_example():
    emb = torch.tensor([[0.0, 0.0], [1.0, 0.0]])
    loss = triplet_loss(emb, [True, False], margin=1.5)
    assert float(loss) == pytest.approx(0.5)


def test_well_separated_is_zero():
    emb = torch.tensor([[0.1, 0.0], [5.0, 0.0], [0.0, 6.0]])
    assert float(triplet_loss(emb, [True, False, False])) == 0.0


def test_single_class_rejected():
    with pytest.raises(SingleClassBatch):
        triplet_loss(torch.zeros(3, 2), [True, True, True])


def test_all_pairing_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 10))
        emb = rng.normal(size=(n, 4))
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        anchor = rng.normal(size=4)
        d = np.linalg.norm(emb - anchor, axis=1)
        ref = sum(max(d[i] - d[j] + 1.5, 0.0) for i, j in itertools.product(np.flatnonzero(labels), np.flatnonzero(~labels)))
        got = triplet_loss(torch.as_tensor(emb), labels, torch.as_tensor(anchor), pairing="all")
        assert float(got) == pytest.approx(ref, abs=1e-12)


def test_zip_pairing_cycles_shorter_list():
    d = torch.tensor([[1.0], [2.0], [3.0], [4.0]])
    labels = [True, False, False, False]
    # positive (1.0) paired with each negative in turn
    expected = sum(max(1.0 - x + 1.5, 0.0) for x in (2.0, 3.0, 4.0))
    assert float(triplet_loss(d, labels)) == pytest.approx(expected)


def test_anchor_default_is_origin():
    emb = torch.tensor([[3.0, 4.0]])
    assert float(anchor_distances(emb)) == 5.0
    assert float(anchor_distances(emb, torch.tensor([3.0, 0.0]))) == 4.0


def _dist_points(ds):
    return torch.tensor([[d, 0.0] for d in ds])


def test_spec_hinge_examples():
    assert float(triplet_loss(_dist_points([0.2, 2.0]), [True, False])) == 0.0
    assert float(triplet_loss(_dist_points([1.0, 1.0]), [True, False])) == pytest.approx(1.5)
    batch = _dist_points([1.0, 1.2, 1.0, 0.3])
    assert float(triplet_loss(batch, [True, True, False, False])) == pytest.approx(3.9)
