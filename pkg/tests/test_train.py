import math

import numpy as np
import pytest
import torch
from torch import nn

from msfuse import vocab
from msfuse.config import (FusionTrainConfig, ImagePretrainConfig, ModelConfig, TextPretrainConfig, TrainConfig)
from msfuse.fusion import DivergenceError
from msfuse.image import ResidualEncoder3D
from msfuse.metrics import SingleClassError
from msfuse.model import FusionData, FusionModel
from msfuse.train import (ALL, bce, cross_validate, fit, group_subsets, holdout_split, image_embedder,
                          milestone_labels, milestone_sweep, oversampled_order, parse_subset,
                          pretrain_metric_channel, split_folds, table_subsets, train_fusion)

TINY = TrainConfig(
    image=ImagePretrainConfig(lr=1e-3, epochs=2, patience=1, minority_factor=2),
    text=TextPretrainConfig(lr=1e-3, batch_size=16, epochs=2, patience=1, minority_factor=2),
    fusion=FusionTrainConfig(lr=1e-3, epochs=3, patience=2),
    model=ModelConfig(image_width=2, decoder_hidden=8, decoder_layers=1, attention_channels=2),
)


@pytest.mark.parametrize("n", [5, 6, 13, 300])
def test_fold_partition(n):
    folds = split_folds(n, 5, seed=4)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(n))


def test_three_hundred_gives_sixty():
    assert [len(f) for f in split_folds(300)] == [60] * 5


def test_fold_determinism():
    a, b = split_folds(50, 5, 9), split_folds(50, 5, 9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, split_folds(50, 5, 10)))


def test_fold_needs_enough_patients():
    with pytest.raises(ValueError):
        split_folds(4, 5)


def test_holdout_stratified():
    labels = np.array([True] * 10 + [False] * 40)
    tr, va = holdout_split(np.arange(50), labels, 0.2, np.random.default_rng(0))
    assert not set(tr) & set(va)
    assert labels[va].sum() == 2 and (~labels[va]).sum() == 8


def test_oversampled_order_counts():
    labels = np.array([True] * 3 + [False] * 10)
    order = oversampled_order(labels, 10, np.random.default_rng(0))
    assert len(order) == 40
    assert np.sum(labels[order]) == 30


class _Scalar(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))


def test_fit_stops_after_patience():
    m = _Scalar()
    losses = iter(range(1, 1000))
    rec = fit(m, lambda e: None, lambda: next(losses), epochs=500, patience=50)
    assert rec.epochs_run == 51 and rec.best_epoch == 1


def test_fit_runs_full_budget_while_improving():
    m = _Scalar()
    losses = iter(range(1000, 0, -1))
    rec = fit(m, lambda e: None, lambda: next(losses), epochs=30, patience=5)
    assert rec.epochs_run == 30 and rec.best_epoch == 30


def test_fit_restores_best_state():
    m = _Scalar()
    vals = iter([3.0, 1.0, 2.0, 5.0])

    def step(epoch):
        with torch.no_grad():
            m.w.fill_(float(epoch))

    rec = fit(m, step, lambda: next(vals), epochs=4, patience=10)
    assert rec.best_epoch == 2 and float(m.w) == 2.0


def test_fit_zero_epochs_unchanged():
    m = _Scalar()
    rec = fit(m, lambda e: pytest.fail("no epochs expected"), lambda: 0.0, epochs=0, patience=5)
    assert rec.epochs_run == 0 and float(m.w) == 0.0


def test_fit_aborts_on_nan():
    with pytest.raises(DivergenceError):
        fit(_Scalar(), lambda e: None, lambda: math.nan, epochs=3, patience=2)


def test_bce_half_probability():
    assert float(bce(torch.tensor([0.0]), torch.tensor([1.0]))) == pytest.approx(math.log(2), abs=1e-7)
    assert float(bce(torch.tensor([40.0, -40.0]), torch.tensor([1.0, 0.0]))) < 1e-12


def _volumes(n, rng):
    return [rng.random((8, 8, 8)).astype(np.float32) for _ in range(n)]


def test_pretrain_zero_epochs_leaves_parameters(rng):
    enc = ResidualEncoder3D(width=2, embed_dim=4)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    cfg = ImagePretrainConfig(epochs=0, patience=1)
    vols = _volumes(8, rng)
    lab = np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=bool)
    rec = pretrain_metric_channel(enc, image_embedder(), vols[:4], lab[:4], vols[4:], lab[4:], cfg)
    assert rec.epochs_run == 0
    assert all(torch.equal(before[k], v) for k, v in enc.state_dict().items())


def test_pretrain_rejects_single_class_validation(rng):
    enc = ResidualEncoder3D(width=2, embed_dim=4)
    vols = _volumes(6, rng)
    with pytest.raises(SingleClassError):
        pretrain_metric_channel(enc, image_embedder(), vols[:4], [1, 0, 1, 0], vols[4:], [0, 0],
                                ImagePretrainConfig(epochs=1, patience=1))


def test_pretrain_rejects_overlap(rng):
    enc = ResidualEncoder3D(width=2, embed_dim=4)
    vols = _volumes(4, rng)
    with pytest.raises(ValueError):
        pretrain_metric_channel(enc, image_embedder(), vols, [1, 0, 1, 0], vols[:2], [1, 0],
                                ImagePretrainConfig(epochs=1, patience=1))


def test_pretrain_separates_planted_brightness():
    rng = np.random.default_rng(0)
    lab = rng.random(60) < 0.4
    vols = [(rng.random((8, 8, 8)) * 0.2 + (0.6 if y else 0.0)).astype(np.float32) for y in lab]
    torch.manual_seed(0)
    enc = ResidualEncoder3D(width=4, embed_dim=8)
    cfg = ImagePretrainConfig(lr=1e-2, epochs=20, patience=20, minority_factor=1)
    pretrain_metric_channel(enc, image_embedder(), vols[:40], lab[:40], vols[40:], lab[40:], cfg)
    with torch.no_grad():
        d = enc(torch.as_tensor(np.stack(vols[40:])).unsqueeze(1)).norm(dim=1).numpy()
    assert d[lab[40:]].mean() < d[~lab[40:]].mean()


def test_fusion_lr_zero_leaves_parameters(small_features):
    data = FusionData(small_features, np.zeros((len(small_features), 9, 64), dtype=np.float32))
    labels = milestone_labels(small_features, 4.0)
    torch.manual_seed(0)
    model = FusionModel(TINY.model)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = FusionTrainConfig(lr=0.0, epochs=1, patience=1)
    train_fusion(model, data, np.arange(30), np.arange(30, 40), labels, cfg)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_parse_subset():
    assert parse_subset("notes").modalities == ("notes",)
    assert parse_subset("mri").modalities == vocab.SEQUENCE_TAGS
    assert parse_subset("FLAIR+ehr").modalities == ("vitals", "labs", "FLAIR", "meds")
    assert ALL.modalities == vocab.MODALITY_ORDER
    with pytest.raises(ValueError):
        parse_subset("")
    with pytest.raises(ValueError):
        parse_subset("ct")


def test_subset_grids():
    assert len(group_subsets()) == 7
    assert len({s.modalities for s in group_subsets()}) == 7
    rows = table_subsets()
    assert len(rows) == 11
    assert rows[-1].modalities == vocab.MODALITY_ORDER


def test_cross_validate_smoke_and_reproducible(small_features):
    subsets = [ALL, parse_subset("notes")]
    a = cross_validate(small_features, TINY, subsets)
    b = cross_validate(small_features, TINY, subsets)
    rep = a.reports[ALL.name]
    assert rep.rows and all(0 <= r["auroc"] <= 1 for r in rep.rows)
    assert a.reports["notes"].to_csv() == b.reports["notes"].to_csv()
    assert rep.to_csv() == b.reports[ALL.name].to_csv()
    alone = cross_validate(small_features, TINY, [ALL])
    assert alone.report.to_csv() == rep.to_csv()


def test_cross_validate_rejects_empty_subsets(small_features):
    with pytest.raises(ValueError):
        cross_validate(small_features, TINY, [])


def test_milestone_sweep_degenerate(small_features):
    with pytest.raises(SingleClassError):
        milestone_sweep(small_features, [10.0], TINY)
    positive = [f for f in small_features if f.edss > 0]
    with pytest.raises(SingleClassError):
        milestone_sweep(positive, [0.0], TINY)
