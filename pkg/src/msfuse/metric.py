"""Fixed-anchor triplet margin loss."""

from __future__ import annotations

import torch

DEFAULT_MARGIN = 1.5


class SingleClassBatch(ValueError):
    """A batch must hold at least one positive and one negative."""


def anchor_distances(embeddings, anchor=None):
    if anchor is None:
        return embeddings.norm(dim=-1)
    return (embeddings - anchor).norm(dim=-1)


def hinge(d_pos, d_neg, margin=DEFAULT_MARGIN):
    return torch.clamp(d_pos - d_neg + margin, min=0.0)


def triplet_loss(embeddings, labels, anchor=None, margin=DEFAULT_MARGIN, pairing="zip", reduction="sum"):
    """Triplet margin loss with the anchor held at a fixed point.

    ``pairing="zip"`` matches the i-th positive with the i-th negative and
    cycles the shorter list, so every sample enters at least one triplet.
    ``pairing="all"`` uses every (positive, negative) pair.
    """
    labels = torch.as_tensor(labels, dtype=torch.bool)
    d = anchor_distances(embeddings, anchor)
    d_pos, d_neg = d[labels], d[~labels]
    if d_pos.numel() == 0 or d_neg.numel() == 0:
        raise SingleClassBatch("triplet batch lacks positives or negatives")
    if pairing == "zip":
        n = max(d_pos.numel(), d_neg.numel())
        ip = torch.arange(n) % d_pos.numel()
        ineg = torch.arange(n) % d_neg.numel()
        terms = hinge(d_pos[ip], d_neg[ineg], margin)
    elif pairing == "all":
        terms = hinge(d_pos[:, None], d_neg[None, :], margin).reshape(-1)
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    return terms.sum() if reduction == "sum" else terms.mean()
