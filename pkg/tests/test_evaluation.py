import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slicexai.errors import EmptyEvaluation, EmptyPredictions
from slicexai.evaluation import (
    ConfusionMatrix,
    attention_guided_range,
    compute_metrics,
    format_metrics_table,
    majority_vote,
    nearest_rank,
)


def test_perfect_classifier():
    m = compute_metrics(ConfusionMatrix(tp=10, tn=10, fp=0, fn=0))
    assert (m.acc, m.sen, m.spe, m.mcc) == (1.0, 1.0, 1.0, 1.0)


def test_all_positive_is_zero_mcc():
    m = compute_metrics(ConfusionMatrix(tp=5, fp=5, tn=0, fn=0))
    assert m.mcc == 0.0
    assert m.acc == 0.5 and m.sen == 1.0 and m.spe == 0.0


def test_formula_oracle():
    m = compute_metrics(ConfusionMatrix(tp=40, tn=45, fp=5, fn=10))
    assert m.acc == pytest.approx(0.85)
    assert m.sen == pytest.approx(40 / 50)
    assert m.spe == pytest.approx(45 / 50)
    # (40*45 - 5*10) / sqrt(45 * 50 * 50 * 55)
    assert m.mcc == pytest.approx(1750 / math.sqrt(45 * 50 * 50 * 55), abs=1e-15)
    assert m.mcc == pytest.approx(0.7035264706814485, abs=1e-12)


def test_mcc_against_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(0)
    for _ in range(20):
        y, p = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
        cm = ConfusionMatrix.from_predictions(y, p)
        assert compute_metrics(cm).mcc == pytest.approx(metrics.matthews_corrcoef(y, p), abs=1e-12)


def test_empty():
    with pytest.raises(EmptyEvaluation):
        compute_metrics(ConfusionMatrix())


counts = st.integers(0, 200)


@given(counts, counts, counts, counts)
def test_mcc_label_swap_symmetry(tp, tn, fp, fn):
    if tp + tn + fp + fn == 0:
        return
    a = compute_metrics(ConfusionMatrix(tp, tn, fp, fn))
    b = compute_metrics(ConfusionMatrix(tn, tp, fn, fp))
    assert a.mcc == pytest.approx(b.mcc, abs=1e-12)
    assert -1 <= a.mcc <= 1
    for v in (a.acc, a.sen, a.spe):
        assert 0 <= v <= 1


@given(st.integers(1, 100), st.data())
def test_acc_between_sen_and_spe_for_balanced_classes(n, data):
    tp = data.draw(st.integers(0, n))
    tn = data.draw(st.integers(0, n))
    m = compute_metrics(ConfusionMatrix(tp=tp, fn=n - tp, tn=tn, fp=n - tn))
    assert min(m.sen, m.spe) - 1e-12 <= m.acc <= max(m.sen, m.spe) + 1e-12


def test_majority_vote():
    assert majority_vote([1, 1, 0]) == 1
    assert majority_vote([0, 0, 0, 0]) == 0
    assert majority_vote([1, 0], [0.9, 0.2]) == 1
    assert majority_vote([1, 0], [0.6, 0.1]) == 0
    with pytest.raises(EmptyPredictions):
        majority_vote([])


def test_nearest_rank():
    assert nearest_rank([0.1, 0.3, 0.3, 0.2, 0.1], 75) == 0.3
    assert nearest_rank(np.arange(1, 1001), 99.9) == 999
    assert nearest_rank([5.0], 50) == 5.0
    assert nearest_rank([1, 2, 3, 4], 25) == 1
    assert nearest_rank([1, 2, 3, 4], 26) == 2


def test_attention_guided_range():
    assert attention_guided_range([0.1, 0.3, 0.3, 0.2, 0.1], 75) == range(1, 3)
    assert attention_guided_range(np.full(6, 1 / 6), 75) == range(0, 6)
    assert attention_guided_range([0, 0, 1.0, 0], 75) == range(2, 3)
    # only the run holding the global maximum is kept
    assert attention_guided_range([0.3, 0.05, 0.05, 0.25, 0.35], 60) == range(3, 5)
    with pytest.raises(ValueError):
        attention_guided_range([1.0], 100)


def test_metrics_table_layout():
    rows = {"0": compute_metrics(ConfusionMatrix(10, 10, 0, 0)),
            "1": compute_metrics(ConfusionMatrix(5, 5, 5, 5))}
    text = format_metrics_table(rows).splitlines()
    assert text[0].split() == ["fold", "ACC", "SPE", "SEN", "MCC"]
    assert text[-1].split() == ["mean", "0.750", "0.750", "0.750", "0.500"]
