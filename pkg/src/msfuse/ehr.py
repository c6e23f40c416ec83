"""Structured-EHR tables: 4-hour binning and attention-weighted embedding.

Each category (labs, vitals, meds) gets its own channel: a small stack of
1D convolutions slides along the feature axis of every binned row and
reduces it to one score. Scores are softmax-normalized across rows into
attention weights ``alpha`` and the table embedding is ``alpha @ D``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import vocab

WINDOW_SECONDS = 4 * 3600


@dataclass
class BinnedTable:
    category: str
    rows: np.ndarray          # (t, f) float64
    row_windows: list         # [(encounter_index, window_start_seconds)]
    feature_names: tuple

    @property
    def empty(self):
        return self.rows.shape[0] == 0

    @property
    def shape(self):
        return self.rows.shape


def _encounter_index(times, encounters):
    starts = np.array([a for a, _ in encounters], dtype=np.int64)
    ends = np.array([b for _, b in encounters], dtype=np.int64)
    idx = np.searchsorted(starts, times, side="right") - 1
    inside = (idx >= 0) & (times <= ends[np.clip(idx, 0, None)])
    if not np.all(inside):
        bad = int(times[~inside][0])
        raise ValueError(f"event at t={bad} lies outside every encounter")
    return idx


def bin_events(events, encounters, category, window=WINDOW_SECONDS):
    """Average events into per-encounter windows on the wall-clock grid.

    Windows start at multiples of ``window`` seconds from midnight, so a
    1:15PM-6PM encounter yields the 12PM and 4PM windows. A window never
    mixes two encounters. Cells without observations are 0 and all-zero
    rows are dropped.
    """
    names = vocab.FEATURES[category]
    f = len(names)
    if not events:
        return BinnedTable(category, np.zeros((0, f)), [], names)
    arr = np.array(events, dtype=np.float64)
    times = arr[:, 0].astype(np.int64)
    feats = arr[:, 1].astype(np.int64)
    values = arr[:, 2]
    enc = _encounter_index(times, encounters)
    starts = (times // window) * window

    keys, inverse = np.unique(np.stack([enc, starts], axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(keys), f))
    counts = np.zeros((len(keys), f))
    np.add.at(sums, (inverse, feats), values)
    np.add.at(counts, (inverse, feats), 1.0)
    rows = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

    keep = np.any(rows != 0.0, axis=1)
    windows = [(int(e), int(s)) for (e, s), k in zip(keys, keep) if k]
    return BinnedTable(category, rows[keep], windows, names)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int


# Per-category conv stacks.
CHANNEL_SPECS = {
    "labs": (ConvSpec(1, 8, 7, 2), ConvSpec(8, 8, 4, 2), ConvSpec(8, 1, 3, 2)),
    "vitals": (ConvSpec(1, 8, 3, 2), ConvSpec(8, 1, 2, 2)),
    "meds": (ConvSpec(1, 8, 3, 2), ConvSpec(8, 1, 2, 2)),
}


def min_input_length(specs):
    length = 1
    for s in reversed(specs):
        length = (length - 1) * s.stride + s.kernel
    return length


class EHRChannel(nn.Module):
    """Conv stack: conv, dropout, then (conv, ReLU, dropout)*, average pool."""

    def __init__(self, specs, dropout=0.3):
        super().__init__()
        self.specs = tuple(specs)
        self.convs = nn.ModuleList(nn.Conv1d(s.in_channels, s.out_channels, s.kernel, s.stride) for s in self.specs)
        self.dropout = nn.Dropout(dropout)
        self.min_length = min_input_length(self.specs)

    def row_scores(self, rows):
        """(N, f) rows -> (N,) unnormalized attention scores."""
        x = rows.unsqueeze(1)
        if x.shape[-1] < self.min_length:
            x = F.pad(x, (0, self.min_length - x.shape[-1]))
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i > 0:
                x = torch.relu(x)
            x = self.dropout(x)
        return x.mean(dim=(1, 2))

    def attention(self, tables, mask):
        """Masked softmax over rows. ``tables`` (B, T, f), ``mask`` (B, T) bool."""
        b, t, f = tables.shape
        scores = self.row_scores(tables.reshape(b * t, f)).reshape(b, t)
        scores = scores.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(scores, dim=1)
        return torch.where(mask, alpha, torch.zeros_like(alpha))

    def forward(self, tables, mask):
        alpha = self.attention(tables, mask)
        return torch.einsum("bt,btf->bf", alpha, tables), alpha


class EHREncoder(nn.Module):
    def __init__(self, dropout=0.3):
        super().__init__()
        self.channels = nn.ModuleDict({c: EHRChannel(CHANNEL_SPECS[c], dropout) for c in vocab.CATEGORIES})

    def forward(self, batch):
        """``batch`` maps category -> (tables, mask); returns category -> embedding."""
        return {c: self.channels[c](*batch[c])[0] for c in vocab.CATEGORIES}


def pad_tables(tables, dtype=torch.float32):
    """Stack variable-height tables into (B, T_max, f) plus a row mask."""
    f = tables[0].rows.shape[1]
    t_max = max(1, max(t.rows.shape[0] for t in tables))
    data = np.zeros((len(tables), t_max, f))
    mask = np.zeros((len(tables), t_max), dtype=bool)
    for i, t in enumerate(tables):
        n = t.rows.shape[0]
        data[i, :n] = t.rows
        mask[i, :n] = True
    return torch.as_tensor(data, dtype=dtype), torch.as_tensor(mask)


def _param_dtype(channel):
    return next(channel.parameters()).dtype


@torch.no_grad()
def channel_attention(table, channel):
    """Attention weights for one nonempty table (eval mode)."""
    if table.empty:
        raise ValueError("empty table has no attention weights")
    was_training = channel.training
    channel.eval()
    try:
        rows = torch.as_tensor(table.rows, dtype=_param_dtype(channel)).unsqueeze(0)
        mask = torch.ones(1, rows.shape[1], dtype=torch.bool)
        return channel.attention(rows, mask)[0].double().numpy()
    finally:
        channel.train(was_training)


def embed_table(table, alpha):
    """Table embedding ``alpha^T D``; an empty table embeds to zeros."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if table.empty:
        return np.zeros(table.rows.shape[1])
    if alpha.shape != (table.rows.shape[0],):
        raise ValueError(f"alpha has shape {alpha.shape}, table has {table.rows.shape[0]} rows")
    return alpha @ table.rows


def patient_importance(table, alpha):
    """Per-feature importance: attention-weighted mean |value|, summing to 1.

    Returns zeros for an empty table or one whose weighted magnitudes vanish.
    """
    f = table.rows.shape[1]
    if table.empty:
        return np.zeros(f)
    raw = (np.asarray(alpha)[:, None] * np.abs(table.rows)).mean(axis=0)
    total = raw.sum()
    return raw / total if total > 0 else np.zeros(f)


def global_importance(per_patient, feature_names):
    """Average per-patient importances and sort descending.

    Patients whose importance vector is all zero (no observations) are left
    out of the average so the result still sums to 1.
    """
    mats = [v for v in per_patient if np.any(v)]
    mean = np.mean(mats, axis=0) if mats else np.zeros(len(feature_names))
    order = sorted(range(len(feature_names)), key=lambda j: (-mean[j], j))
    return [(feature_names[j], float(mean[j])) for j in order]


def feature_importance(tables, channel):
    """Global importance for one category over a list of patient tables."""
    per_patient = []
    for t in tables:
        alpha = channel_attention(t, channel) if not t.empty else np.zeros(0)
        per_patient.append(patient_importance(t, alpha))
    return global_importance(per_patient, tables[0].feature_names)
