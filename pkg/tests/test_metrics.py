import itertools

import numpy as np
import pytest

from msfuse.metrics import METRIC_NAMES, MetricsReport, SingleClassError, auprc, auroc, compute_metrics, summary_table_csv


def brute_auroc(s, y):
    num = den = 0.0
    for i, j in itertools.product(range(len(s)), repeat=2):
        if y[i] and not y[j]:
            den += 1
            num += 1.0 if s[i] > s[j] else 0.5 if s[i] == s[j] else 0.0
    return num / den


def brute_ap(s, y):
    """Precision at each distinct threshold times the recall increment."""
    total, ap, prev_recall = sum(y), 0.0, 0.0
    for thr in sorted(set(s), reverse=True):
        sel = [i for i in range(len(s)) if s[i] >= thr]
        tp = sum(y[i] for i in sel)
        recall = tp / total
        ap += (recall - prev_recall) * tp / len(sel)
        prev_recall = recall
    return ap


def test_perfect_separation():
    m = compute_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert m == {"auroc": 1.0, "auprc": 1.0, "sensitivity": 1.0, "specificity": 1.0, "f1": 1.0, "accuracy": 1.0}


def test_inverted_labels():
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_one_concordant_pair_of_four():
    assert auroc([0.6, 0.4, 0.7, 0.3], [1, 0, 0, 1]) == 0.25


def test_ties_count_half():
    assert auroc([0.5, 0.5], [1, 0]) == 0.5


def test_single_class_signalled():
    with pytest.raises(SingleClassError):
        compute_metrics([0.1, 0.2], [1, 1])
    with pytest.raises(SingleClassError):
        auprc([0.1, 0.2], [0, 0])


def test_random_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 21))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        s = np.round(rng.random(n), 1)  # coarse grid forces ties
        assert abs(auroc(s, y) - brute_auroc(s, y)) < 1e-12
        assert abs(auprc(s, y) - brute_ap(s, y)) < 1e-12
        m = compute_metrics(s, y)
        assert all(0.0 <= m[k] <= 1.0 for k in METRIC_NAMES)


def test_threshold_is_inclusive():
    m = compute_metrics([0.5, 0.49], [1, 0])
    assert m["sensitivity"] == 1.0 and m["specificity"] == 1.0


def test_report_mean_sd_and_format():
    rep = MetricsReport()
    rep.add(0, dict.fromkeys(METRIC_NAMES, 0.9))
    rep.add(1, dict.fromkeys(METRIC_NAMES, 0.8))
    assert rep.mean()["auroc"] == pytest.approx(0.85)
    assert rep.sd()["auroc"] == pytest.approx(np.std([0.9, 0.8], ddof=1))
    assert rep.cell("auroc") == "0.8500 ± 0.0707"
    lines = rep.to_csv().splitlines()
    assert lines[0] == "fold,auroc,auprc,sensitivity,specificity,f1,accuracy"
    assert [l.split(",")[0] for l in lines[1:]] == ["0", "1", "mean", "sd"]


def test_single_fold_sd_zero():
    rep = MetricsReport()
    rep.add(0, dict.fromkeys(METRIC_NAMES, 0.7))
    assert rep.sd()["f1"] == 0.0


def test_summary_table():
    rep = MetricsReport()
    rep.add(0, dict.fromkeys(METRIC_NAMES, 0.5))
    text = summary_table_csv("subset", {"mri": rep, "ehr": rep})
    assert text.splitlines()[0].split(",") == ["subset", *METRIC_NAMES]
    assert len(text.splitlines()) == 3
