"""Binary classification metrics and slice-aggregation baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .errors import EmptyEvaluation, EmptyPredictions, IncompatibleAggregation

AGGREGATIONS = ("attention-fusion", "mean-fusion", "majority-vote", "attention-guided-mv")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred, positive: int = 1) -> "ConfusionMatrix":
        t = np.asarray(y_true) == positive
        p = np.asarray(y_pred) == positive
        return cls(tp=int(np.sum(t & p)), tn=int(np.sum(~t & ~p)),
                   fp=int(np.sum(~t & p)), fn=int(np.sum(t & ~p)))


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    sen: float
    spe: float
    mcc: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """ACC, SEN, SPE and MCC. A zero factor in the MCC denominator gives MCC = 0."""
    if cm.total <= 0:
        raise EmptyEvaluation("no samples were evaluated")
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    return MetricsReport(
        acc=(tp + tn) / cm.total,
        sen=_ratio(tp, tp + fn),
        spe=_ratio(tn, tn + fp),
        mcc=float(min(1.0, max(-1.0, mcc))),
    )


def metrics_from_predictions(y_true, y_pred) -> MetricsReport:
    return compute_metrics(ConfusionMatrix.from_predictions(y_true, y_pred))


def majority_vote(slice_predictions: Sequence[int],
                  positive_probs: Optional[Sequence[float]] = None) -> int:
    """Modal label of the slice predictions.

    A tie goes to the positive class when the mean positive-class
    probability across slices exceeds 0.5 (negative otherwise, or when no
    probabilities are given).
    """
    preds = np.asarray(slice_predictions, dtype=int)
    if preds.size == 0:
        raise EmptyPredictions("majority vote needs at least one slice prediction")
    n_pos = int(np.sum(preds == 1))
    n_neg = preds.size - n_pos
    if n_pos != n_neg:
        return int(n_pos > n_neg)
    if positive_probs is None:
        return 0
    return int(float(np.mean(positive_probs)) > 0.5)


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty array")
    # rounding guards against 99.9 * 1000 / 100 -> 999.0000000000001
    rank = math.ceil(round(percentile * v.size / 100.0, 9))
    return float(v[min(max(rank, 1), v.size) - 1])


def attention_guided_range(mean_alphas, percentile: float = 75.0) -> range:
    """Maximal contiguous run of slices with weight >= the percentile threshold
    that contains the most-attended slice. Indices are sequence positions.

    Slices with zero weight never qualify, so a one-hot distribution selects
    only its hot slice even when the percentile threshold itself is zero.
    """
    if not 0 < percentile < 100:
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    a = np.asarray(getattr(mean_alphas, "alphas", mean_alphas), dtype=np.float64)
    threshold = nearest_rank(a, percentile)
    keep = (a >= threshold) & (a > 0)
    peak = int(np.argmax(a))
    lo = peak
    while lo > 0 and keep[lo - 1]:
        lo -= 1
    hi = peak
    while hi < a.size - 1 and keep[hi + 1]:
        hi += 1
    return range(lo, hi + 1)


# -- subject-level evaluation -----------------------------------------------------

@torch.no_grad()
def predict(model, x: np.ndarray, aggregation: str = "attention-fusion",
            slice_range: Optional[range] = None, batch_size: int = 32):
    """Scan-level predictions for prepared inputs ``x`` of shape ``(B, N, H, W)``.

    Returns ``(labels (B,), positive-class scores (B,), alphas (B, N) or None)``.
    """
    if aggregation not in AGGREGATIONS:
        raise IncompatibleAggregation(f"unknown aggregation {aggregation!r}")
    if aggregation == "attention-fusion" and model.fusion != "attention":
        raise IncompatibleAggregation(
            f"attention-fusion needs a model with trained attention, not fusion={model.fusion!r}")
    if aggregation == "attention-guided-mv" and slice_range is None and model.fusion != "attention":
        raise IncompatibleAggregation(
            "attention-guided-mv needs a slice range or a model with trained attention")
    model.eval()
    p = next(model.parameters())
    feats_all = []
    for start in range(0, len(x), batch_size):
        xb = torch.as_tensor(x[start:start + batch_size], dtype=p.dtype)
        feats_all.append(model.encode(xb))
    feats = torch.cat(feats_all)

    alphas = model.attention(feats).double().numpy() if model.fusion == "attention" else None
    if aggregation in ("attention-fusion", "mean-fusion"):
        if aggregation == "attention-fusion":
            w = torch.as_tensor(alphas, dtype=feats.dtype)
        else:
            w = feats.new_full(feats.shape[:-1], 1.0 / feats.shape[1])
        logits = model.head((w.unsqueeze(-1) * feats).sum(dim=1))
        probs = torch.softmax(logits.double(), dim=-1).numpy()
        return probs.argmax(axis=1), probs[:, 1], alphas

    slice_probs = torch.softmax(model.head(feats).double(), dim=-1).numpy()
    if aggregation == "attention-guided-mv":
        if slice_range is None:
            slice_range = attention_guided_range(alphas.mean(axis=0))
        idx = np.asarray(list(slice_range))
        slice_probs = slice_probs[:, idx]
    labels = np.array([majority_vote(sp.argmax(axis=1), sp[:, 1]) for sp in slice_probs])
    return labels, slice_probs[:, :, 1].mean(axis=1), alphas


def evaluate_subject_level(model, x: np.ndarray, y, aggregation: str = "attention-fusion",
                           slice_range: Optional[range] = None) -> MetricsReport:
    """One prediction per scan, scored against ``y``."""
    if len(x) == 0:
        raise EmptyEvaluation("no scans to evaluate")
    labels, _, _ = predict(model, x, aggregation, slice_range)
    return metrics_from_predictions(y, labels)


def format_metrics_table(rows: Dict[str, MetricsReport]) -> str:
    """Per-fold rows plus a mean row, columns ACC SPE SEN MCC."""
    lines = [f"{'fold':<8}{'ACC':>8}{'SPE':>8}{'SEN':>8}{'MCC':>8}"]
    for name, r in rows.items():
        lines.append(f"{name:<8}{r.acc:>8.3f}{r.spe:>8.3f}{r.sen:>8.3f}{r.mcc:>8.3f}")
    if rows:
        m = mean_report(list(rows.values()))
        lines.append(f"{'mean':<8}{m.acc:>8.3f}{m.spe:>8.3f}{m.sen:>8.3f}{m.mcc:>8.3f}")
    return "\n".join(lines) + "\n"


def mean_report(reports: List[MetricsReport]) -> MetricsReport:
    return MetricsReport(
        acc=float(np.mean([r.acc for r in reports])),
        sen=float(np.mean([r.sen for r in reports])),
        spe=float(np.mean([r.spe for r in reports])),
        mcc=float(np.mean([r.mcc for r in reports])),
    )
