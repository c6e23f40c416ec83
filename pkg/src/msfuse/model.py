"""Full model container, batched fusion inputs and the checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import vocab
from .cohort_io import atomic_write_bytes
from .config import ModelConfig, TrainConfig
from .ehr import EHREncoder, bin_events
from .fusion import FUSION_DIM, FusionDecoder
from .image import ResidualEncoder3D, embed_volumes
from .text import DEFAULT_WINDOW, TextEncoder, build_graph

CHECKPOINT_MAGIC = b"MSFD1"
CHECKPOINT_VERSION = 1


@dataclass
class PatientFeatures:
    patient_id: str
    tables: dict          # category -> BinnedTable
    volumes: dict         # tag -> float32 array; empty without an imaging session
    tokens: list          # all note tokens, visits concatenated in order
    graph: object         # DocGraph or None when there are no tokens
    demographics: np.ndarray
    edss: float
    blobs: list           # planted lesions (generator metadata), may be empty


def featurize(record, window=DEFAULT_WINDOW):
    tables = {c: bin_events(record.events(c), record.encounters, c) for c in vocab.CATEGORIES}
    tokens = [t for _, toks in record.notes for t in toks]
    return PatientFeatures(
        patient_id=record.patient_id,
        tables=tables,
        volumes={tag: vol.voxels for tag, vol in record.volumes},
        tokens=tokens,
        graph=build_graph(tokens, window) if tokens else None,
        demographics=record.demographics.as_array(),
        edss=float(record.edss_current),
        blobs=list(record.meta.get("blobs", [])),
    )


def featurize_cohort(cohort, window=DEFAULT_WINDOW):
    return [featurize(r, window) for r in cohort]


def row_mask(available):
    """Float mask over the K fusion rows; 1 keeps a modality."""
    available = set(available)
    unknown = available - set(vocab.MODALITY_ORDER)
    if unknown:
        raise ValueError(f"unknown modality tags: {sorted(unknown)}")
    return torch.tensor([1.0 if m in available else 0.0 for m in vocab.MODALITY_ORDER])


class FusionData:
    """Cohort-wide tensors for fusion training: frozen rows, EHR tables, demographics."""

    def __init__(self, features, frozen):
        self.n = len(features)
        self.frozen = torch.as_tensor(frozen, dtype=torch.float32)
        self.demographics = torch.as_tensor(np.stack([f.demographics for f in features]), dtype=torch.float32)
        self.ehr = {}
        for c in vocab.CATEGORIES:
            lengths = np.array([f.tables[c].rows.shape[0] for f in features], dtype=np.int64)
            width = len(vocab.FEATURES[c])
            data = np.zeros((self.n, max(1, int(lengths.max(initial=0))), width), dtype=np.float32)
            for i, f in enumerate(features):
                data[i, :lengths[i]] = f.tables[c].rows
            self.ehr[c] = (torch.as_tensor(data), torch.as_tensor(lengths))

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        tables = {}
        for c, (data, lengths) in self.ehr.items():
            lens = lengths[idx]
            t = max(1, int(lens.max()))
            mask = torch.arange(t).unsqueeze(0) < lens.unsqueeze(1)
            tables[c] = (data[idx, :t], mask)
        return self.frozen[idx], tables, self.demographics[idx]


class FusionModel(nn.Module):
    """The part optimized during fusion: EHR channels and the decoder."""

    def __init__(self, cfg: ModelConfig, d=FUSION_DIM):
        super().__init__()
        self.ehr = EHREncoder(cfg.ehr_dropout)
        self.decoder = FusionDecoder(d, cfg.decoder_hidden, cfg.decoder_layers, cfg.attention_channels)
        self.d = d

    def assemble(self, frozen, tables, mask=None):
        """Batched fusion matrix: EHR rows computed live, the rest taken from ``frozen``."""
        emb = self.ehr(tables)
        rows = []
        for k, name in enumerate(vocab.MODALITY_ORDER):
            if name in emb:
                v = emb[name]
                rows.append(nn.functional.pad(v, (0, self.d - v.shape[1])))
            else:
                rows.append(frozen[:, k])
        e = torch.stack(rows, dim=1)
        return e if mask is None else e * mask.view(1, -1, 1)

    def forward(self, frozen, tables, demographics, mask=None):
        return self.decoder(self.assemble(frozen, tables, mask), demographics)


class MSFusionModel(nn.Module):
    """Every trained component: five image encoders, the text encoder, EHR channels, decoder."""

    def __init__(self, cfg: ModelConfig, vocabulary=()):
        super().__init__()
        self.cfg = cfg
        self.images = nn.ModuleDict({t: ResidualEncoder3D(cfg.image_width, cfg.embed_dim, cfg.image_blocks)
                                     for t in vocab.SEQUENCE_TAGS})
        self.text = TextEncoder(vocabulary, cfg.embed_dim, cfg.text_steps)
        self.fusion = FusionModel(cfg)

    def anchor(self):
        return torch.full((self.cfg.embed_dim,), float(self.cfg.anchor))

    def frozen_rows(self, features):
        return frozen_rows(features, dict(self.images), self.text)

    @torch.no_grad()
    def logits(self, features, available=vocab.MODALITY_ORDER):
        data = FusionData(features, self.frozen_rows(features))
        was = self.training
        self.eval()
        try:
            out = self.fusion(*data.batch(np.arange(data.n)), mask=row_mask(available))
        finally:
            self.train(was)
        return out.double().numpy()


@torch.no_grad()
def frozen_rows(features, image_encoders, text_encoder, d=FUSION_DIM):
    """(N, K, d) float32 array of image and text embeddings; EHR and missing rows are zero."""
    out = np.zeros((len(features), len(vocab.MODALITY_ORDER), d), dtype=np.float32)
    for tag, enc in image_encoders.items():
        k = vocab.MODALITY_ORDER.index(tag)
        idx = [i for i, f in enumerate(features) if tag in f.volumes]
        if idx:
            emb = embed_volumes([features[i].volumes[tag] for i in idx], enc)
            out[idx, k, :emb.shape[1]] = emb
    if text_encoder is not None:
        k = vocab.MODALITY_ORDER.index("notes")
        idx = [i for i, f in enumerate(features) if f.graph is not None]
        if idx:
            text_encoder.eval()
            emb = text_encoder.encode_graphs([features[i].graph for i in idx]).numpy()
            out[idx, k, :emb.shape[1]] = emb
    return out


# -- checkpoint ------------------------------------------------------------

def config_hash(cfg_dict):
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()


def encode_checkpoint(model, train_cfg: TrainConfig, extra=None):
    cfg_dict = train_cfg.to_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "vocabulary": list(model.text.vocabulary),
        "tensors": index,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(head)) + head + b"".join(blobs)


def decode_checkpoint(data):
    """Return (MSFusionModel, TrainConfig, header)."""
    n_magic = len(CHECKPOINT_MAGIC)
    if data[:n_magic] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    if len(data) < n_magic + 6:
        raise ValueError("truncated checkpoint header")
    version, head_len = struct.unpack_from("<HI", data, n_magic)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = n_magic + 6
    header = json.loads(data[start:start + head_len].decode("utf-8"))
    if config_hash(header["config"]) != header["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    train_cfg = TrainConfig.from_dict(header["config"])
    model = MSFusionModel(train_cfg.model, header["vocabulary"])
    body = memoryview(data)[start + head_len:]
    state = {}
    for item in header["tensors"]:
        end = item["offset"] + item["nbytes"]
        if end > len(body):
            raise ValueError(f"truncated checkpoint: tensor {item['name']}")
        arr = np.frombuffer(body[item["offset"]:end], dtype=np.dtype(item["dtype"]).newbyteorder("<"))
        state[item["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(item["shape"]))
    model.load_state_dict(state)
    return model, train_cfg, header


def save_checkpoint(path, model, train_cfg, extra=None):
    atomic_write_bytes(path, encode_checkpoint(model, train_cfg, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
