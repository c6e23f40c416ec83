"""Fusion matrix assembly and the Bi-GRU attention decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from . import vocab

FUSION_DIM = 64


class DivergenceError(FloatingPointError):
    """Raised when activations or losses stop being finite."""


def assemble_patient(embeddings, available=None, d=FUSION_DIM):
    """Stack per-modality embeddings into the K x d fusion matrix.

    Rows follow ``vocab.MODALITY_ORDER``; short rows are zero-padded on the
    right; modalities missing from ``embeddings`` or excluded by
    ``available`` are all-zero rows.
    """
    unknown = set(embeddings) - set(vocab.MODALITY_ORDER)
    if unknown:
        raise ValueError(f"unknown modality tags: {sorted(unknown)}")
    e = np.zeros((len(vocab.MODALITY_ORDER), d))
    for k, name in enumerate(vocab.MODALITY_ORDER):
        vec = embeddings.get(name)
        if vec is None or (available is not None and name not in available):
            continue
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size > d:
            raise ValueError(f"{name} embedding length {vec.size} exceeds fusion width {d}")
        e[k, :vec.size] = vec
    return e


@dataclass
class Prediction:
    logit: float
    probability: float
    threshold: float | None = None


class FusionDecoder(nn.Module):
    """Bi-GRU over the K modality rows, conv attention reduction, late-fused demographics."""

    def __init__(self, input_dim=FUSION_DIM, hidden=512, layers=4, attention_channels=8,
                 demographics_dim=vocab.DEMOGRAPHICS_DIM, k=len(vocab.MODALITY_ORDER)):
        super().__init__()
        self.gru = nn.GRU(input_dim, hidden, num_layers=layers, batch_first=True, bidirectional=True)
        self.state_dim = 2 * hidden
        self.attention = nn.Conv1d(self.state_dim, attention_channels, kernel_size=1)
        self.fc = nn.Linear(attention_channels * self.state_dim + demographics_dim, 1)
        self.k = k

    def parts(self, e, demographics):
        """Return (logit, C, B, O) for a batch ``e`` (N, K, d)."""
        c, _ = self.gru(e)                                   # (N, K, h)
        b = self.attention(c.transpose(1, 2)).transpose(1, 2)  # (N, K, g)
        o = b.transpose(1, 2) @ c                            # (N, g, h)
        logit = self.fc(torch.cat([o.flatten(1), demographics], dim=1)).squeeze(1)
        return logit, c, b, o

    def forward(self, e, demographics):
        return self.parts(e, demographics)[0]


@torch.no_grad()
def decode(e, demographics, decoder, threshold=None):
    dtype = next(decoder.parameters()).dtype
    was = decoder.training
    decoder.eval()
    try:
        e_t = torch.as_tensor(np.asarray(e), dtype=dtype).unsqueeze(0)
        d_t = torch.as_tensor(np.asarray(demographics), dtype=dtype).unsqueeze(0)
        logit = float(decoder(e_t, d_t)[0])
    finally:
        decoder.train(was)
    if not math.isfinite(logit):
        raise DivergenceError("decoder produced a non-finite logit")
    return Prediction(logit, float(expit(logit)), threshold)
