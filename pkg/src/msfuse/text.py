"""Clinical-note channel: word co-occurrence graph + message passing.

A document becomes a directed weighted graph over its unique tokens plus
one document node linked both ways to every word. Two rounds of
``H <- GRU(H, MLP(D^-1 A H))`` are followed by a self-attention readout
over the word nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DEFAULT_WINDOW = 10


@dataclass
class DocGraph:
    words: list               # unique tokens in first-occurrence order
    adjacency: np.ndarray     # (n, n); document node is the last index

    @property
    def n(self):
        return self.adjacency.shape[0]

    @property
    def doc_index(self):
        return self.n - 1

    @property
    def empty(self):
        return not self.words

    def out_degree(self):
        return self.adjacency.sum(axis=1)

    def word_edges(self):
        """Token-labeled word-word edges, independent of node order."""
        a = self.adjacency
        k = len(self.words)
        return {(self.words[i], self.words[j]): float(a[i, j]) for i in range(k) for j in range(k) if a[i, j]}


def build_graph(tokens, window=DEFAULT_WINDOW):
    """Count token_i -> token_j for every i < j <= i + window - 1.

    Pairs of identical tokens are skipped so the diagonal stays zero.
    """
    if window < 2:
        raise ValueError("window must cover at least two tokens")
    index = {}
    for t in tokens:
        index.setdefault(t, len(index))
    k = len(index)
    a = np.zeros((k + 1, k + 1))
    ids = np.fromiter((index[t] for t in tokens), dtype=np.int64, count=len(tokens))
    for off in range(1, window):
        if off >= len(ids):
            break
        src, dst = ids[:-off], ids[off:]
        keep = src != dst
        np.add.at(a, (src[keep], dst[keep]), 1.0)
    a[k, :k] = 1.0
    a[:k, k] = 1.0
    return DocGraph(list(index), a)


def normalized_adjacency(a):
    """Row-normalize by out-degree; zero-degree rows stay zero."""
    deg = a.sum(dim=-1, keepdim=True)
    return torch.where(deg > 0, a / deg.clamp(min=1e-300), torch.zeros_like(a))


class MessagePassingStep(nn.Module):
    def __init__(self, dim=64, mlp=None):
        super().__init__()
        self.mlp = mlp if mlp is not None else nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.gru = nn.GRUCell(dim, dim)

    def messages(self, a, h):
        return self.mlp(normalized_adjacency(a) @ h)

    def forward(self, a, h):
        """``a`` (B, n, n), ``h`` (B, n, d) -> next node states."""
        m = self.messages(a, h)
        b, n, d = h.shape
        return self.gru(m.reshape(b * n, d), h.reshape(b * n, d)).reshape(b, n, d)


def propagate(a, h, step):
    """One message-passing round on a single graph (numpy or tensor inputs)."""
    a = torch.as_tensor(a)
    h = torch.as_tensor(h)
    return step(a.unsqueeze(0), h.unsqueeze(0))[0]


class Readout(nn.Module):
    def __init__(self, dim=64):
        super().__init__()
        self.dense = nn.Linear(dim, dim)
        self.context = nn.Parameter(torch.randn(dim) / dim ** 0.5)

    def forward(self, h, word_mask):
        """Attention-pool word nodes. Returns (u (B, d), beta (B, n))."""
        scores = torch.tanh(self.dense(h)) @ self.context
        scores = scores.masked_fill(~word_mask, float("-inf"))
        beta = torch.softmax(scores, dim=1)
        beta = torch.where(word_mask, beta, torch.zeros_like(beta))
        return torch.einsum("bn,bnd->bd", beta, h), beta


@dataclass
class GraphBatch:
    adjacency: torch.Tensor   # (B, n, n)
    token_ids: torch.Tensor   # (B, n); 0 for padding/unknown
    word_mask: torch.Tensor   # (B, n)
    doc_mask: torch.Tensor    # (B, n)


class TextEncoder(nn.Module):
    def __init__(self, vocabulary, dim=64, steps=2):
        super().__init__()
        self.vocabulary = list(vocabulary)
        self.lookup = {w: i + 1 for i, w in enumerate(self.vocabulary)}
        self.embedding = nn.Embedding(len(self.vocabulary) + 1, dim)
        self.doc_state = nn.Parameter(torch.zeros(dim))
        self.steps = nn.ModuleList(MessagePassingStep(dim) for _ in range(steps))
        self.readout = Readout(dim)
        self.dim = dim

    def collate(self, graphs):
        dtype = self.doc_state.dtype
        n = max(g.n for g in graphs)
        a = torch.zeros(len(graphs), n, n, dtype=dtype)
        ids = torch.zeros(len(graphs), n, dtype=torch.long)
        word = torch.zeros(len(graphs), n, dtype=torch.bool)
        doc = torch.zeros(len(graphs), n, dtype=torch.bool)
        for i, g in enumerate(graphs):
            a[i, :g.n, :g.n] = torch.as_tensor(g.adjacency, dtype=dtype)
            k = len(g.words)
            ids[i, :k] = torch.tensor([self.lookup.get(w, 0) for w in g.words], dtype=torch.long)
            word[i, :k] = True
            doc[i, k] = True
        return GraphBatch(a, ids, word, doc)

    def initial_states(self, batch):
        h = self.embedding(batch.token_ids) * batch.word_mask.unsqueeze(-1)
        return h + batch.doc_mask.unsqueeze(-1) * self.doc_state

    def forward_with_attention(self, batch):
        """(embeddings, readout weights beta) for a collated batch."""
        h = self.initial_states(batch)
        live = (batch.word_mask | batch.doc_mask).unsqueeze(-1)
        for step in self.steps:
            h = step(batch.adjacency, h) * live
        u, beta = self.readout(h, batch.word_mask)
        return u * batch.word_mask.any(dim=1, keepdim=True), beta

    def forward(self, batch):
        """Embed a collated batch; documents without words embed to zeros."""
        return self.forward_with_attention(batch)[0]

    def encode_graphs(self, graphs, batch_size=64):
        out = []
        for i in range(0, len(graphs), batch_size):
            out.append(self(self.collate(graphs[i:i + batch_size])))
        return torch.cat(out) if out else torch.zeros(0, self.dim)


def vocabulary_from(documents):
    seen = {}
    for doc in documents:
        for t in doc:
            seen.setdefault(t, None)
    return list(seen)


@torch.no_grad()
def embed_document(tokens, encoder, window=DEFAULT_WINDOW):
    if not tokens:
        return np.zeros(encoder.dim)
    was = encoder.training
    encoder.eval()
    try:
        return encoder(encoder.collate([build_graph(tokens, window)]))[0].double().numpy()
    finally:
        encoder.train(was)


def load_word_vectors(path, encoder):
    """Copy vectors from a ``word v1 ... vd`` text file into the embedding table.

    Returns the number of vocabulary words found in the file.
    """
    hits = 0
    with open(path, encoding="utf-8") as fh, torch.no_grad():
        for line in fh:
            parts = line.rstrip().split()
            if len(parts) != encoder.dim + 1:
                continue
            idx = encoder.lookup.get(parts[0])
            if idx is None:
                continue
            encoder.embedding.weight[idx] = torch.tensor([float(v) for v in parts[1:]], dtype=encoder.embedding.weight.dtype)
            hits += 1
    return hits
