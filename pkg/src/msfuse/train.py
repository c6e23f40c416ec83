"""Metric pretraining, fusion training, cross-validation, ablations, milestone sweeps."""

from __future__ import annotations

import copy
import itertools
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import vocab
from .config import TrainConfig
from .ehr import feature_importance, global_importance, patient_importance, channel_attention
from .fusion import DivergenceError
from .image import ResidualEncoder3D, as_batch, augment_rotate
from .metric import anchor_distances, triplet_loss
from .metrics import MetricsReport, SingleClassError, compute_metrics
from .model import FusionData, FusionModel, MSFusionModel, frozen_rows, row_mask
from .synth import milestone_label
from .text import TextEncoder, vocabulary_from

log = logging.getLogger("msfuse")

_STAGE_SPLIT, _STAGE_IMAGE, _STAGE_TEXT, _STAGE_FUSION = range(4)


def derive_seed(seed, *keys):
    """64-bit seed for a (seed, stage, ...) path, stable across runs."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)).generate_state(1, np.uint64)[0])


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def milestone_labels(features, threshold):
    return np.array([milestone_label(f.edss, threshold) for f in features], dtype=bool)


def _require_two_classes(labels, what):
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        kind = "all-positive" if labels.all() else "all-negative"
        raise SingleClassError(f"{what} is {kind}: need both classes")


# -- splits ----------------------------------------------------------------

def split_folds(n, k=5, seed=0):
    """Random patient-level partition into ``k`` folds whose sizes differ by at most one."""
    if n < k:
        raise ValueError(f"need at least {k} patients for {k} folds, got {n}")
    perm = np.random.default_rng(derive_seed(seed, _STAGE_SPLIT)).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


def holdout_split(indices, labels, fraction, rng):
    """Class-stratified split of ``indices`` into (train, val); each class keeps >= 1 training member."""
    indices = np.asarray(indices)
    labels = np.asarray(labels, dtype=bool)
    train, val = [], []
    for cls in (False, True):
        members = rng.permutation(indices[labels[indices] == cls])
        n_val = int(round(fraction * len(members)))
        if len(members) >= 2:
            n_val = min(max(n_val, 1), len(members) - 1)
        else:
            n_val = 0
        val.append(members[:n_val])
        train.append(members[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


# -- generic early stopping ------------------------------------------------

@dataclass
class FitRecord:
    best_epoch: int = 0           # 0: initial parameters kept
    epochs_run: int = 0
    best_loss: float = math.inf
    history: list = field(default_factory=list)
    skipped_batches: int = 0


def fit(module, run_epoch, validate, epochs, patience):
    """Train until ``patience`` epochs pass without a strict validation improvement.

    ``run_epoch(epoch)`` performs the updates of one epoch and ``validate()``
    returns the validation loss. The parameters of the best epoch are
    restored on return.
    """
    rec = FitRecord()
    best_state = copy.deepcopy(module.state_dict())
    stall = 0
    for epoch in range(1, epochs + 1):
        run_epoch(epoch)
        loss = float(validate())
        if not math.isfinite(loss):
            raise DivergenceError(f"validation loss became {loss} at epoch {epoch}")
        rec.history.append(loss)
        rec.epochs_run = epoch
        if loss < rec.best_loss:
            rec.best_loss, rec.best_epoch, stall = loss, epoch, 0
            best_state = copy.deepcopy(module.state_dict())
        else:
            stall += 1
            if stall >= patience:
                break
    module.load_state_dict(best_state)
    return rec


def _check_finite(loss, where):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss ({float(loss)}) during {where}")


# -- metric-learning pretraining ---------------------------------------------

def oversampled_order(labels, factor, rng):
    """One epoch's sample stream with the minority class repeated ``factor`` times."""
    labels = np.asarray(labels, dtype=bool)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    return rng.permutation(np.concatenate([np.tile(minority, factor), majority]))


def image_embedder(probability=0.5, max_angle=0.02):
    def embed(encoder, items, rng):
        if rng is not None:
            items = [augment_rotate(v, rng, probability, max_angle) for v in items]
        return encoder(as_batch(items, next(encoder.parameters()).dtype))
    return embed


def text_embedder(encoder, items, rng):
    return encoder(encoder.collate(items))


def pretrain_metric_channel(encoder, embed, train_items, train_labels, val_items, val_labels, cfg,
                            seed=0, anchor=None):
    """Fixed-anchor triplet pretraining of one channel with early stopping.

    ``embed(encoder, items, rng)`` maps a list of items to embeddings; ``rng``
    is None during validation (no augmentation). ``cfg`` is an Image- or
    TextPretrainConfig.
    """
    train_labels = np.asarray(train_labels, dtype=bool)
    val_labels = np.asarray(val_labels, dtype=bool)
    _require_two_classes(val_labels, "validation set")
    _require_two_classes(train_labels, "training set")
    if any(a is b for a in train_items for b in val_items):
        raise ValueError("training and validation sets overlap")
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    skipped = [0]

    def run_epoch(epoch):
        encoder.train()
        order = oversampled_order(train_labels, cfg.minority_factor, rng)
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            lab = train_labels[b]
            if lab.all() or not lab.any():
                skipped[0] += 1
                continue
            loss = triplet_loss(embed(encoder, [train_items[i] for i in b], rng), lab, anchor, cfg.margin)
            _check_finite(loss, f"metric pretraining epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()

    @torch.no_grad()
    def validate():
        encoder.eval()
        emb = torch.cat([embed(encoder, val_items[i:i + 64], None) for i in range(0, len(val_items), 64)])
        return triplet_loss(emb, val_labels, anchor, cfg.margin, pairing="all", reduction="mean")

    rec = fit(encoder, run_epoch, validate, cfg.epochs, cfg.patience)
    rec.skipped_batches = skipped[0]
    encoder.eval()
    return rec


@torch.no_grad()
def anchor_separation(encoder, embed, items, labels, anchor=None):
    """Mean anchor distance of (positives, negatives)."""
    encoder.eval()
    labels = np.asarray(labels, dtype=bool)
    emb = torch.cat([embed(encoder, items[i:i + 64], None) for i in range(0, len(items), 64)])
    d = anchor_distances(emb, anchor).double().numpy()
    return float(d[labels].mean()), float(d[~labels].mean())


# -- fusion ----------------------------------------------------------------

def bce(logits, labels):
    return F.binary_cross_entropy_with_logits(logits, labels)


def train_fusion(model, data, train_idx, val_idx, labels, cfg, seed=0, available=vocab.MODALITY_ORDER):
    """Optimize EHR channels + decoder on BCE; image/text rows in ``data`` are frozen inputs."""
    mask = row_mask(available)
    y = torch.as_tensor(np.asarray(labels, dtype=np.float32))
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    def run_epoch(epoch):
        model.train()
        order = rng.permutation(np.asarray(train_idx))
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss = bce(model(*data.batch(b), mask=mask), y[b])
            _check_finite(loss, f"fusion epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()

    @torch.no_grad()
    def validate():
        model.eval()
        return bce(model(*data.batch(val_idx), mask=mask), y[np.asarray(val_idx)])

    rec = fit(model, run_epoch, validate, cfg.epochs, cfg.patience)
    model.eval()
    return rec


@torch.no_grad()
def predict_scores(model, data, idx, available=vocab.MODALITY_ORDER):
    model.eval()
    logits = model(*data.batch(idx), mask=row_mask(available)).double()
    if not torch.isfinite(logits).all():
        raise DivergenceError("decoder produced non-finite logits")
    return torch.sigmoid(logits).numpy()


# -- subsets ---------------------------------------------------------------

@dataclass(frozen=True)
class Subset:
    name: str
    modalities: tuple

    @property
    def groups(self):
        return tuple(g for g, mods in vocab.GROUPS.items() if set(mods) <= set(self.modalities))


def parse_subset(spec):
    """``"mri+notes"`` or ``"FLAIR"`` -> Subset. Tokens are group names or modality tags."""
    tokens = [t.strip() for t in spec.replace(",", "+").split("+") if t.strip()]
    if not tokens:
        raise ValueError("empty modality subset")
    mods = set()
    for t in tokens:
        if t in vocab.GROUPS:
            mods.update(vocab.GROUPS[t])
        elif t in vocab.MODALITY_ORDER:
            mods.add(t)
        else:
            raise ValueError(f"unknown group or modality {t!r}")
    return Subset("+".join(tokens), tuple(m for m in vocab.MODALITY_ORDER if m in mods))


ALL = parse_subset("mri+notes+ehr")


def group_subsets(groups=("mri", "notes", "ehr")):
    """Every non-empty combination of ``groups``, singles first."""
    groups = list(groups)
    if not groups:
        raise ValueError("no groups given")
    out = []
    for r in range(1, len(groups) + 1):
        for combo in itertools.combinations(groups, r):
            out.append(parse_subset("+".join(combo)))
    return out


def table_subsets():
    """Single sequences, notes, EHR, the three pairs, everything."""
    names = [*vocab.SEQUENCE_TAGS, "notes", "ehr", "mri+notes", "mri+ehr", "ehr+notes", "mri+notes+ehr"]
    return [parse_subset(n) for n in names]


# -- cross-validation ------------------------------------------------------

@dataclass
class FoldArtifacts:
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    image_encoders: dict = field(default_factory=dict)
    text_encoder: object = None
    fusion_models: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)      # channel -> FitRecord or skip reason
    separation: dict = field(default_factory=dict)    # channel -> (d_pos, d_neg) on the val split
    fusion: dict = field(default_factory=dict)        # subset name -> FitRecord


@dataclass
class CVResult:
    reports: dict                 # subset name -> MetricsReport
    folds: list
    labels: np.ndarray
    scores: dict                  # subset name -> (N,) array, nan where untested
    skipped: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    importance: dict = field(default_factory=dict)

    @property
    def report(self):
        return next(iter(self.reports.values()))


def _pretrain_images(features, tr, va, labels, cfg, fold, tags, art, anchor):
    for tag in tags:
        torch.manual_seed(derive_seed(cfg.seed, _STAGE_IMAGE, fold, vocab.SEQUENCE_TAGS.index(tag)))
        enc = ResidualEncoder3D(cfg.model.image_width, cfg.model.embed_dim, cfg.model.image_blocks)
        art.image_encoders[tag] = enc
        t_idx = [i for i in tr if tag in features[i].volumes]
        v_idx = [i for i in va if tag in features[i].volumes]
        embed = image_embedder(cfg.image.rotate_probability, cfg.image.rotate_max_angle)
        try:
            art.pretrain[tag] = pretrain_metric_channel(
                enc, embed, [features[i].volumes[tag] for i in t_idx], labels[t_idx],
                [features[i].volumes[tag] for i in v_idx], labels[v_idx], cfg.image,
                seed=derive_seed(cfg.seed, _STAGE_IMAGE, fold, vocab.SEQUENCE_TAGS.index(tag), 1), anchor=anchor)
        except SingleClassError as exc:
            log.warning("fold %d: %s pretraining skipped (%s)", fold, tag, exc)
            art.pretrain[tag] = f"skipped: {exc}"
            continue
        art.separation[tag] = anchor_separation(enc, embed, [features[i].volumes[tag] for i in v_idx],
                                                labels[v_idx], anchor)


def _pretrain_text(features, tr, va, labels, cfg, fold, art, anchor):
    torch.manual_seed(derive_seed(cfg.seed, _STAGE_TEXT, fold))
    enc = TextEncoder(vocabulary_from(features[i].tokens for i in tr), cfg.model.embed_dim, cfg.model.text_steps)
    art.text_encoder = enc
    t_idx = [i for i in tr if features[i].graph is not None]
    v_idx = [i for i in va if features[i].graph is not None]
    try:
        art.pretrain["notes"] = pretrain_metric_channel(
            enc, text_embedder, [features[i].graph for i in t_idx], labels[t_idx],
            [features[i].graph for i in v_idx], labels[v_idx], cfg.text,
            seed=derive_seed(cfg.seed, _STAGE_TEXT, fold, 1), anchor=anchor)
    except SingleClassError as exc:
        log.warning("fold %d: notes pretraining skipped (%s)", fold, exc)
        art.pretrain["notes"] = f"skipped: {exc}"
        return
    art.separation["notes"] = anchor_separation(enc, text_embedder, [features[i].graph for i in v_idx],
                                                labels[v_idx], anchor)


def cross_validate(features, cfg: TrainConfig, subsets=None, keep_models=False, importance=False):
    """K-fold CV of the full pipeline (pretraining + fusion) for each modality subset.

    Folds, pretrained channels and fusion seeds do not depend on which other
    subsets are requested, so a subset's row is the same whether it is run
    alone or inside an ablation.
    """
    cfg.validate()
    subsets = [ALL] if subsets is None else list(subsets)
    if not subsets:
        raise ValueError("no modality subsets given")
    for s in subsets:
        if not s.modalities:
            raise ValueError(f"subset {s.name!r} is empty")
    labels = milestone_labels(features, cfg.milestone)
    _require_two_classes(labels, f"cohort at milestone EDSS>{cfg.milestone}")
    folds = split_folds(len(features), cfg.folds, cfg.seed)
    needed = {m for s in subsets for m in s.modalities}
    anchor = torch.full((cfg.model.embed_dim,), float(cfg.model.anchor))

    result = CVResult({s.name: MetricsReport() for s in subsets}, folds, labels,
                      {s.name: np.full(len(features), np.nan) for s in subsets})
    per_patient_imp = {c: [] for c in vocab.CATEGORIES}
    imp_subset = next((s for s in subsets if set(vocab.GROUPS["ehr"]) <= set(s.modalities)), None)

    for f, test in enumerate(folds):
        train_all = np.sort(np.concatenate([p for j, p in enumerate(folds) if j != f]))
        try:
            _require_two_classes(labels[test], f"test fold {f}")
            _require_two_classes(labels[train_all], f"training folds for fold {f}")
        except SingleClassError as exc:
            log.warning("fold %d skipped: %s", f, exc)
            result.skipped.append((f, str(exc)))
            for rep in result.reports.values():
                rep.skipped.append(f)
            continue
        tr, va = holdout_split(train_all, labels, cfg.val_fraction,
                               np.random.default_rng(derive_seed(cfg.seed, _STAGE_SPLIT, f, 1)))
        art = FoldArtifacts(f, tr, va, test)
        _pretrain_images(features, tr, va, labels, cfg, f, [t for t in vocab.SEQUENCE_TAGS if t in needed],
                         art, anchor)
        if "notes" in needed:
            _pretrain_text(features, tr, va, labels, cfg, f, art, anchor)
        data = FusionData(features, frozen_rows(features, art.image_encoders, art.text_encoder))

        for s in subsets:
            torch.manual_seed(derive_seed(cfg.seed, _STAGE_FUSION, f, _name_key(s.name)))
            model = FusionModel(cfg.model)
            art.fusion[s.name] = train_fusion(model, data, tr, va, labels, cfg.fusion,
                                              seed=derive_seed(cfg.seed, _STAGE_FUSION, f, _name_key(s.name), 1),
                                              available=s.modalities)
            scores = predict_scores(model, data, test, s.modalities)
            result.scores[s.name][test] = scores
            result.reports[s.name].add(f, compute_metrics(scores, labels[test]))
            log.info("fold %d %-16s auroc=%.4f", f, s.name, result.reports[s.name].rows[-1]["auroc"])
            if keep_models:
                art.fusion_models[s.name] = model
            if importance and s is imp_subset:
                for c in vocab.CATEGORIES:
                    for i in test:
                        t = features[i].tables[c]
                        alpha = channel_attention(t, model.ehr.channels[c]) if not t.empty else np.zeros(0)
                        per_patient_imp[c].append(patient_importance(t, alpha))
        result.artifacts.append(art if keep_models else FoldArtifacts(f, tr, va, test, pretrain=art.pretrain,
                                                                       separation=art.separation,
                                                                       fusion=art.fusion))
    if not any(rep.rows for rep in result.reports.values()):
        raise SingleClassError("every fold was skipped for lacking a class")
    if importance and imp_subset is not None:
        result.importance = {c: global_importance(per_patient_imp[c], vocab.FEATURES[c]) for c in vocab.CATEGORIES}
    return result


def ablate(features, subsets, cfg: TrainConfig, **kw):
    subsets = list(subsets)
    if not subsets:
        raise ValueError("no modality subsets given")
    return cross_validate(features, cfg, subsets, **kw)


def milestone_sweep(features, thresholds, cfg: TrainConfig, subset=ALL):
    """One all-modality CV report per EDSS threshold; degenerate labels raise SingleClassError."""
    out = {}
    for thr in thresholds:
        run = copy.deepcopy(cfg)
        run.milestone = float(thr)
        out[float(thr)] = cross_validate(features, run, [subset]).report
    return out


# -- single model for the train/explain commands -----------------------------

def train_model(features, cfg: TrainConfig, available=vocab.MODALITY_ORDER):
    """Fit one MSFusionModel on a stratified train/val split of the whole cohort.

    Returns (model, log dict).
    """
    cfg.validate()
    labels = milestone_labels(features, cfg.milestone)
    _require_two_classes(labels, f"cohort at milestone EDSS>{cfg.milestone}")
    tr, va = holdout_split(np.arange(len(features)), labels, cfg.val_fraction,
                           np.random.default_rng(derive_seed(cfg.seed, _STAGE_SPLIT, 99)))
    anchor = torch.full((cfg.model.embed_dim,), float(cfg.model.anchor))
    art = FoldArtifacts(-1, tr, va, np.zeros(0, dtype=np.int64))
    _pretrain_images(features, tr, va, labels, cfg, 99, list(vocab.SEQUENCE_TAGS), art, anchor)
    _pretrain_text(features, tr, va, labels, cfg, 99, art, anchor)

    model = MSFusionModel(cfg.model, art.text_encoder.vocabulary)
    for tag, enc in art.image_encoders.items():
        model.images[tag].load_state_dict(enc.state_dict())
    model.text.load_state_dict(art.text_encoder.state_dict())
    data = FusionData(features, model.frozen_rows(features))
    torch.manual_seed(derive_seed(cfg.seed, _STAGE_FUSION, 99))
    rec = train_fusion(model.fusion, data, tr, va, labels, cfg.fusion,
                       seed=derive_seed(cfg.seed, _STAGE_FUSION, 99, 1), available=available)
    model.eval()
    info = {
        "train": [features[i].patient_id for i in tr],
        "val": [features[i].patient_id for i in va],
        "pretrain": {k: (v if isinstance(v, str) else {"best_epoch": v.best_epoch, "epochs_run": v.epochs_run,
                                                        "best_loss": v.best_loss, "history": v.history})
                     for k, v in art.pretrain.items()},
        "separation": art.separation,
        "fusion": {"best_epoch": rec.best_epoch, "epochs_run": rec.epochs_run, "best_loss": rec.best_loss,
                   "history": rec.history},
    }
    return model, info


def cohort_importance(model, features):
    """Global EHR feature importance of a trained model over ``features``."""
    return {c: feature_importance([f.tables[c] for f in features], model.fusion.ehr.channels[c])
            for c in vocab.CATEGORIES}
