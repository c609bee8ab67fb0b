"""Two-stage optimization.

Stage 1 trains a small feature extractor plus a base-category head with
cross-entropy and a squared-residual term weighted by the feature norm
(which pushes features toward zero where predictions are wrong, improving
transfer).  Stage 2 freezes the extractor and trains the initial weight
table, the gating parameters, and the similarity scale on balanced batches
(half base, half novel, novel drawn with replacement from the k-shot pool).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import heads
from .autodiff import ParamSet, Tape
from .data import FewShotDataset, FewShotSplit
from .errors import DataError, NumericsError
from .ggnn import GGNNParams, propagate_expr, register_weight_table
from .graphs import CategoryGraph

W_INIT_NAME = "w_init"


@dataclass
class Stage1Config:
    loss_balance_lambda: float = 0.005
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 64  # paper-scale value is 256
    epochs: int = 30
    lr_decay_every: int = 30  # divide lr by 10 this often

    def __post_init__(self):
        if self.loss_balance_lambda < 0:
            raise ValueError("loss_balance_lambda must be >= 0")
        for name in ("lr", "momentum", "weight_decay", "batch_size", "epochs", "lr_decay_every"):
            if getattr(self, name) < 0 or (name in ("lr", "batch_size", "lr_decay_every") and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")


@dataclass
class Stage2Config:
    eta: float = 0.001  # weight-norm penalty, inner-product head only
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 64  # paper-scale value is 1000
    epochs: int = 30

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("lr and batch_size must be positive")
        if self.batch_size % 2:
            raise ValueError("batch_size must be even (half base, half novel)")


class FeatureExtractor:
    """Tanh MLP from raw vectors to d-dim features, parameters in a ParamSet."""

    def __init__(self, in_dim, hidden, out_dim, params: ParamSet, rng, prefix="ext"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.prefix = prefix
        self.params = params
        self.layer_dims = [in_dim, *hidden, out_dim]
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            params.add(f"{prefix}.w{i}", rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            params.add(f"{prefix}.b{i}", np.zeros((1, fan_out)))

    @classmethod
    def from_params(cls, params: ParamSet, prefix="ext"):
        """Rebuild the extractor around already-registered parameters."""
        dims = []
        i = 0
        while f"{prefix}.w{i}" in params:
            w = params[f"{prefix}.w{i}"]
            if not dims:
                dims.append(w.shape[1])
            dims.append(w.shape[0])
            i += 1
        if len(dims) < 2:
            raise DataError(f"no {prefix}.w* tensors found")
        obj = cls.__new__(cls)
        obj.in_dim, obj.out_dim = dims[0], dims[-1]
        obj.prefix = prefix
        obj.params = params
        obj.layer_dims = dims
        return obj

    def names(self):
        n_layers = len(self.layer_dims) - 1
        return [f"{self.prefix}.{kind}{i}" for i in range(n_layers) for kind in ("w", "b")]

    def features_expr(self, tape: Tape, x):
        h = x
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            w = tape.parameter(f"{self.prefix}.w{i}", self.params[f"{self.prefix}.w{i}"].shape)
            b = tape.parameter(f"{self.prefix}.b{i}", self.params[f"{self.prefix}.b{i}"].shape)
            h = ad.add_rowvec(ad.matmul(h, ad.transpose(w)), b)
            if i < n_layers - 1:
                h = ad.tanh(h)
        return h

    def extract(self, x) -> np.ndarray:
        """Frozen inference on raw input rows."""
        x = np.asarray(x, dtype=np.float64)
        tape = Tape()
        xe = tape.input("x", x.shape)
        return tape.evaluate(self.features_expr(tape, xe), {"x": x}, self.params)


def _as_expr(tape, value, what):
    return value if isinstance(value, ad.Expr) else tape.constant(ad.as_matrix(value, what))


def _one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64).ravel()
    y = np.zeros((labels.size, k))
    y[np.arange(labels.size), labels] = 1.0
    return y


def cross_entropy_from_probs_expr(tape, probs, labels):
    y = tape.constant(_one_hot(labels, probs.shape[1]))
    picked = ad.row_sum(ad.mul(y, ad.log_guarded(probs)))
    return ad.scalar_mul(-1.0, ad.mean(picked))


def stage1_loss(tape, probs, labels, features, loss_balance_lambda):
    """Cross-entropy plus the feature-norm-weighted squared-residual term."""
    probs = _as_expr(tape, probs, "probs")
    features = _as_expr(tape, features, "features")
    lc = cross_entropy_from_probs_expr(tape, probs, labels)
    if loss_balance_lambda == 0.0:
        return lc
    y = tape.constant(_one_hot(labels, probs.shape[1]))
    resid = ad.sub(probs, y)
    sq_resid = ad.row_sum(ad.mul(resid, resid))
    feat_norm = ad.row_sum(ad.mul(features, features))
    ls = ad.mean(ad.mul(sq_resid, feat_norm))
    return ad.add(lc, ad.scalar_mul(loss_balance_lambda, ls))


def stage2_loss(tape, probs, labels, w_star, eta, metric):
    """Cross-entropy; adds eta * sum of squared refined weights for the
    inner-product head (bounded heads need no norm control)."""
    probs = _as_expr(tape, probs, "probs")
    lc = cross_entropy_from_probs_expr(tape, probs, labels)
    if heads.normalize_metric(metric) == "inner_product" and eta != 0.0:
        w_star = _as_expr(tape, w_star, "w_star")
        return ad.add(lc, ad.scalar_mul(eta, ad.squared_l2(w_star)))
    return lc


def sgd_step(params: ParamSet, grads, lr, momentum, weight_decay, no_decay=(), names=None):
    """Classical momentum SGD with weight decay folded into the gradient:
    v <- momentum*v + g + wd*p; p <- p - lr*v.  Updates in place.
    `names` restricts the update to a subset of the parameters."""
    for name in (params if names is None else names):
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if weight_decay and name not in no_decay:
            g = g + weight_decay * params[name]
        v = params.momentum[name]
        v *= momentum
        v += g
        params.values[name] = params[name] - lr * v
    return params


def sample_balanced_batch(dataset: FewShotDataset, split: FewShotSplit, batch_size, rng):
    """Sample indices: half from the base train pool, half from the novel
    k-shot pool (with replacement)."""
    if batch_size % 2:
        raise ValueError("batch_size must be even")
    base_pool = _base_pool(dataset)
    novel_pool = _novel_pool(split)
    half = batch_size // 2
    base = rng.choice(base_pool, size=half, replace=half > base_pool.size)
    novel = rng.choice(novel_pool, size=half, replace=True)
    return np.concatenate([base, novel])


def _base_pool(dataset):
    pools = [dataset.train_ids[p] for p in dataset.positions(novel=False)]
    if not pools or sum(p.size for p in pools) == 0:
        raise DataError("dataset has no base train samples")
    return np.concatenate(pools)


def _novel_pool(split):
    pools = list(split.chosen.values())
    if not pools or sum(p.size for p in pools) == 0:
        raise DataError("split has no novel train samples")
    return np.concatenate(pools)


def _balanced_epoch_batches(dataset, split, batch_size, rng):
    """Walk the full base pool once per epoch in random order, pairing each
    base half with freshly resampled novel samples."""
    base_pool = _base_pool(dataset)
    novel_pool = _novel_pool(split)
    order = rng.permutation(base_pool)
    half = batch_size // 2
    for start in range(0, order.size, half):
        base = order[start : start + half]
        novel = rng.choice(novel_pool, size=base.size, replace=True)
        yield np.concatenate([base, novel])


@dataclass
class Stage1Result:
    params: ParamSet
    extractor: FeatureExtractor
    head_name: str
    base_positions: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)


def train_stage1(extractor: FeatureExtractor, dataset: FewShotDataset,
                 cfg: Stage1Config, rng) -> Stage1Result:
    """Minibatch SGD over the base partition; returns the trained extractor
    parameters and the base-category head."""
    params = extractor.params
    base_positions = dataset.positions(novel=False)
    if base_positions.size == 0:
        raise DataError("dataset has no base categories")
    k_base = base_positions.size
    head_name = "head.w"
    if head_name not in params:
        bound = 1.0 / np.sqrt(extractor.out_dim)
        params.add(head_name, rng.uniform(-bound, bound, size=(k_base, extractor.out_dim)))

    # base-category position -> head row
    head_row = {int(p): r for r, p in enumerate(base_positions)}
    pool = _base_pool(dataset)
    label_pos = dataset.label_positions()
    row_of_sample = np.array([head_row[int(label_pos[i])] for i in pool])

    result = Stage1Result(params, extractor, head_name, base_positions)
    for epoch in range(cfg.epochs):
        lr = cfg.lr / (10.0 ** (epoch // cfg.lr_decay_every))
        order = rng.permutation(pool.size)
        total, steps = 0.0, 0
        for start in range(0, pool.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            idx = pool[sel]
            tape = Tape()
            x = tape.input("x", (idx.size, dataset.d))
            feats = extractor.features_expr(tape, x)
            head = tape.parameter(head_name, params[head_name].shape)
            probs = ad.softmax(ad.matmul(feats, ad.transpose(head)))
            loss = stage1_loss(tape, probs, row_of_sample[sel], feats,
                               cfg.loss_balance_lambda)
            binding = {"x": dataset.features[idx]}
            try:
                value = tape.evaluate(loss, binding, params)[0, 0]
                grads = tape.gradients(loss, params, binding)
            except NumericsError as exc:
                raise NumericsError(
                    f"stage 1 aborted at epoch {epoch} step {steps}: {exc}"
                ) from exc
            sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay)
            total += value
            steps += 1
        result.epoch_losses.append(total / max(steps, 1))
    return result


@dataclass
class Stage2Result:
    params: ParamSet
    ggnn: GGNNParams
    metric: str
    t_steps: int
    epoch_losses: list[float] = field(default_factory=list)


def build_stage2_params(k, d, rng, base_rows=None, base_positions=None) -> tuple[ParamSet, GGNNParams]:
    """Fresh stage-2 parameter set: initial weight table (optionally seeding
    base rows from stage-1 head rows), gating parameters, similarity scale."""
    params = ParamSet()
    register_weight_table(params, k, d, rng, name=W_INIT_NAME)
    if base_rows is not None:
        w = params[W_INIT_NAME]
        w[np.asarray(base_positions, dtype=int)] = base_rows
    spec = GGNNParams.register(params, d, rng)
    heads.register_scale(params)
    return params, spec


def train_stage2(dataset: FewShotDataset, features_all: np.ndarray, split: FewShotSplit,
                 graph: CategoryGraph, trained: ParamSet, ggnn_spec: GGNNParams,
                 metric: str, cfg: Stage2Config, t_steps: int, rng,
                 extractor_params: ParamSet | None = None,
                 train_ggnn: bool = True) -> Stage2Result:
    """Balanced-batch SGD over {initial weights, gating parameters, scale}
    with the extractor frozen.  `features_all` holds the already-extracted
    features for every dataset row; `train_ggnn=False` freezes the gating
    and output net (the no-graph baseline uses it with t_steps=0)."""
    metric = heads.normalize_metric(metric)
    frozen_snapshot = extractor_params.snapshot() if extractor_params is not None else None
    label_pos = dataset.label_positions()
    adjacency = graph.adjacency
    if graph.size != dataset.k:
        raise DataError(f"graph has {graph.size} nodes for {dataset.k} categories")

    trained_names = [W_INIT_NAME, heads.SCALE_NAME] + (ggnn_spec.names() if train_ggnn else [])
    no_decay = {heads.SCALE_NAME}

    result = Stage2Result(trained, ggnn_spec, metric, t_steps)
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for idx in _balanced_epoch_batches(dataset, split, cfg.batch_size, rng):
            tape = Tape()
            x = tape.input("x", (idx.size, features_all.shape[1]))
            w0 = tape.parameter(W_INIT_NAME, trained[W_INIT_NAME].shape)
            w_star = propagate_expr(tape, adjacency, w0, ggnn_spec, t_steps)
            s = tape.parameter(heads.SCALE_NAME, (1, 1))
            scores = heads.score_expr(tape, x, w_star, metric, s)
            probs = ad.softmax(scores)
            loss = stage2_loss(tape, probs, label_pos[idx], w_star, cfg.eta, metric)
            binding = {"x": features_all[idx]}
            try:
                value = tape.evaluate(loss, binding, trained)[0, 0]
                grads = tape.gradients(loss, trained, binding)
            except NumericsError as exc:
                raise NumericsError(
                    f"stage 2 aborted at epoch {epoch} step {steps}: {exc}"
                ) from exc
            sgd_step(trained, grads, cfg.lr, cfg.momentum, cfg.weight_decay,
                     no_decay=no_decay, names=trained_names)
            total += value
            steps += 1
        result.epoch_losses.append(total / max(steps, 1))

    if frozen_snapshot is not None:
        for name, before in frozen_snapshot.items():
            if not np.array_equal(extractor_params[name], before):
                raise AssertionError(f"frozen extractor parameter {name!r} changed")
    return result
