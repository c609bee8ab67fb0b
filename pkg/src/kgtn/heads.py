"""Similarity heads: feature-vs-prototype scores and softmax probabilities.

Three metrics are supported.  Inner product uses the raw dot product; cosine
and Pearson are bounded in [-1, 1], so they are multiplied by a learnable
scale before the softmax (otherwise the softmax output is too flat to train).
Pearson is exactly the cosine of mean-centered vectors, where each vector is
centered by the mean of its own elements.  No head carries a bias term.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape, as_matrix
from .ggnn import WeightTable

METRICS = ("inner_product", "cosine", "pearson")
SCALE_INIT = 10.0
SCALE_NAME = "scale.s"

_ALIASES = {"inner": "inner_product", "cos": "cosine"}


def normalize_metric(name: str) -> str:
    metric = _ALIASES.get(name, name)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {name!r}; choose from {METRICS}")
    return metric


def metric_uses_scale(metric: str) -> bool:
    return metric in ("cosine", "pearson")


def register_scale(params: ParamSet, value: float = SCALE_INIT) -> str:
    params.add(SCALE_NAME, np.array([[float(value)]]))
    return SCALE_NAME


def score_expr(tape: Tape, x, w, metric: str, s=None):
    """Tape graph for N x K scores; `s` is a 1x1 expr for cosine/pearson."""
    metric = normalize_metric(metric)
    if metric == "inner_product":
        return ad.matmul(x, ad.transpose(w))
    if s is None:
        raise ValueError(f"{metric} scoring requires the scale parameter")
    if metric == "pearson":
        x = ad.center_rows(x)
        w = ad.center_rows(w)
        labels = ("centered features", "centered weights")
    else:
        labels = ("features", "weights")
    xn = ad.row_l2_normalize(x, what=labels[0])
    wn = ad.row_l2_normalize(w, what=labels[1])
    return ad.scale(s, ad.matmul(xn, ad.transpose(wn)))


def score(x, w_star, metric: str, s: float = SCALE_INIT) -> np.ndarray:
    """N x K similarity scores of each feature row against each weight row."""
    x = as_matrix(x, "features")
    w = w_star.values if isinstance(w_star, WeightTable) else as_matrix(w_star, "weights")
    if x.shape[1] != w.shape[1]:
        raise ad.ShapeError(
            f"features are {x.shape[1]}-dim but weights are {w.shape[1]}-dim"
        )
    tape = Tape()
    xe = tape.input("x", x.shape)
    we = tape.input("w", w.shape)
    params = ParamSet()
    se = None
    if metric_uses_scale(normalize_metric(metric)):
        register_scale(params, s)
        se = tape.parameter(SCALE_NAME, (1, 1))
    expr = score_expr(tape, xe, we, metric, se)
    return tape.evaluate(expr, {"x": x, "w": w}, params)


def predict_probs(scores) -> np.ndarray:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    scores = as_matrix(scores, "scores")
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_probs_expr(scores_expr):
    return ad.softmax(scores_expr)
