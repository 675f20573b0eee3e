"""Forecast metrics, naive baselines, and recovery scoring of the learned
concept graph against the generator's ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .concepts import MODALITIES
from .data import DatasetBundle, denormalize, normalized_arrays, window_starts
from .errors import ValidationError

DEFAULT_MAPE_THRESHOLD = 1.0
EDGE_THRESHOLD = 0.1


@dataclass
class MetricReport:
    per_modality: dict[str, dict[str, float | None]]

    def aggregate(self) -> dict[str, float | None]:
        out = {}
        for key in ("mae", "rmse", "mape"):
            vals = [v[key] for v in self.per_modality.values() if v[key] is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {"per_modality": self.per_modality, "aggregate": self.aggregate()}


def _single_metrics(pred: np.ndarray, truth: np.ndarray,
                    mask_threshold: float) -> dict[str, float | None]:
    if pred.shape != truth.shape:
        raise ValidationError(f"metrics: shapes differ {pred.shape} vs {truth.shape}")
    err = pred - truth
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    mask = np.abs(truth) >= mask_threshold
    if mask.any():
        mape = float((np.abs(err[mask]) / np.abs(truth[mask])).mean() * 100.0)
    else:
        mape = None
    return {"mae": mae, "rmse": rmse, "mape": mape}


def metrics(pred, truth, mask_threshold: float = DEFAULT_MAPE_THRESHOLD) -> MetricReport:
    """MAE / RMSE / MAPE on denormalized values, per modality.

    MAPE is a percentage over entries whose true magnitude reaches the mask
    threshold; an empty mask reports None rather than a misleading zero.
    """
    if not isinstance(pred, dict):
        pred, truth = {"value": pred}, {"value": truth}
    report = {}
    for m in pred:
        report[m] = _single_metrics(np.asarray(pred[m]), np.asarray(truth[m]), mask_threshold)
    return MetricReport(report)


# ---------------------------------------------------------------------------
# forecasts: model and baselines


def forecast_truth(bundle: DatasetBundle, split: str, history: int) -> dict[str, np.ndarray]:
    starts = window_starts(bundle, split, history)
    return {m: bundle.obs[m][starts + history] for m in MODALITIES}


def persistence_forecast(bundle: DatasetBundle, split: str, history: int) -> dict[str, np.ndarray]:
    """Predict the target step as the last observed step of each window."""
    starts = window_starts(bundle, split, history)
    return {m: bundle.obs[m][starts + history - 1] for m in MODALITIES}


def historical_average_forecast(bundle: DatasetBundle, split: str,
                                history: int) -> dict[str, np.ndarray]:
    """Predict the training mean of the target's time-of-day slot."""
    starts = window_starts(bundle, split, history)
    lo, hi = bundle.splits["train"]
    spd = bundle.steps_per_day
    tod_train = np.arange(lo, hi) % spd
    covered = np.unique(tod_train)
    if len(covered) < spd:
        missing = sorted(set(range(spd)) - set(covered.tolist()))
        raise ValidationError(f"training split never covers time-of-day slot(s) {missing}")
    out = {}
    target_tod = (starts + history) % spd
    for m in MODALITIES:
        train_obs = bundle.obs[m][lo:hi]
        slot_mean = np.stack(
            [train_obs[tod_train == slot].mean(axis=0) for slot in range(spd)]
        )
        out[m] = slot_mean[target_tod]
    return out


def model_forecast(model, bundle: DatasetBundle, split: str, history: int,
                   batch_size: int = 256) -> dict[str, np.ndarray]:
    """Eval-mode one-step forecasts over every window of a split, denormalized."""
    starts = window_starts(bundle, split, history)
    norm = normalized_arrays(bundle)
    g_hat = ad.constant(bundle.operator())
    idx = starts[:, None] + np.arange(history)
    preds = {m: [] for m in MODALITIES}
    for ofs in range(0, len(starts), batch_size):
        sel = idx[ofs:ofs + batch_size]
        tail = starts[ofs:ofs + batch_size] + history
        cond_w = norm["cond"][sel]
        obs_w = {m: norm[m][sel] for m in MODALITIES}
        cond_next = norm["cond"][tail]
        ro = model.rollout(cond_w, obs_w, cond_next, g_hat, mode="eval")
        for m in MODALITIES:
            preds[m].append(denormalize(ro.forecast[m].data, *bundle.stats[m]))
    return {m: np.concatenate(preds[m], axis=0) for m in MODALITIES}


# ---------------------------------------------------------------------------
# causal-graph recovery


def graph_recovery(learned: np.ndarray, truth: np.ndarray,
                   threshold: float = EDGE_THRESHOLD) -> dict:
    """Score learned edge magnitudes against the true edge pattern.

    AUC ranks off-diagonal magnitudes of true edges against true non-edges
    (ties get half credit); F1 and structural Hamming distance use the fixed
    magnitude threshold. An all-empty truth makes AUC undefined (None).
    """
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if learned.shape != truth.shape or learned.ndim != 2:
        raise ValidationError(f"graph_recovery: shapes {learned.shape} vs {truth.shape}")
    k = learned.shape[0]
    off = ~np.eye(k, dtype=bool)
    scores = np.abs(learned[off])
    labels = truth[off] != 0

    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        auc = None
    else:
        ranks = rankdata(scores)  # average ranks give ties half credit
        auc = float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))

    predicted = scores >= threshold
    tp = int(np.sum(predicted & labels))
    fp = int(np.sum(predicted & ~labels))
    fn = int(np.sum(~predicted & labels))
    f1 = 1.0 if (2 * tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)
    shd = int(np.sum(predicted != labels))
    return {"auc": auc, "f1_at_threshold": float(f1), "structural_hamming": shd}
