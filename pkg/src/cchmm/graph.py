"""Region-graph utilities: normalized adjacency and graph convolution."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

DEGREE_FLOOR = 1e-12


def normalize_adjacency(weights: np.ndarray) -> np.ndarray:
    """Return I + D^{-1/2} W D^{-1/2} for symmetric nonnegative weights.

    Rows with zero degree degrade to identity rows via a degree floor, so
    isolated regions stay well-defined.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {w.shape}")
    neg = np.argwhere(w < 0)
    if len(neg):
        i, j = neg[0]
        raise ValidationError(f"adjacency has negative entry {w[i, j]} at ({i}, {j})")
    asym = np.argwhere(~np.isclose(w, w.T, rtol=0, atol=0))
    if len(asym):
        i, j = asym[0]
        raise ValidationError(
            f"adjacency is asymmetric at ({i}, {j}): {w[i, j]} != {w[j, i]}"
        )
    degrees = np.maximum(w.sum(axis=1), DEGREE_FLOOR)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    return np.eye(w.shape[0]) + (inv_sqrt[:, None] * w) * inv_sqrt[None, :]


class RegionGraph:
    """Immutable region adjacency with its cached normalized operator."""

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim == 2 and w.shape[0] == w.shape[1] and np.any(np.diag(w) != 0):
            raise ValidationError("adjacency diagonal must be zero")
        self.weights = w
        self.operator = normalize_adjacency(w)

    @property
    def n_regions(self) -> int:
        return self.weights.shape[0]


def graph_conv(g_hat: ad.Tensor, x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Graph convolution g_hat @ x @ w + b, with b broadcast over rows.

    ``x`` may carry leading batch axes; ``g_hat`` is applied per batch.
    """
    return ad.add(ad.matmul(ad.matmul(g_hat, x), w), b)
