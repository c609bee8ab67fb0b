"""Top-k accuracy over novel/all categories, averaged over k-shot trials.

`run_trials` is the outer experiment loop: for every requested shot count k
and trial index it draws a fresh k-shot split, trains stage 2 from scratch
(stage 1 features are reused), and scores the held-out test samples under
the trained head.  Trials are independent, so they may run on a small
thread pool; results are aggregated in a fixed order either way.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import heads
from . import training as tr
from .autodiff import as_matrix
from .data import FewShotDataset, make_kshot_split
from .errors import DataError, NumericsError
from .ggnn import WeightTable, propagate
from .graphs import CategoryGraph

TOP_K = 5


def topk_accuracy(scores, labels, k_top, mask=None) -> float:
    """Fraction of (masked) samples whose true label is among the k_top
    highest scores.  Ties break toward the lower category index."""
    scores = as_matrix(scores, "scores")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = scores.shape
    if labels.shape[0] != n:
        raise DataError(f"{labels.shape[0]} labels for {n} score rows")
    if not 1 <= k_top <= k:
        raise DataError(f"k_top={k_top} out of range for {k} categories")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise DataError("no samples left after filtering")
    # stable sort on negated scores keeps equal scores in index order
    order = np.argsort(-scores[mask], axis=1, kind="stable")[:, :k_top]
    hits = (order == labels[mask, None]).any(axis=1)
    return float(hits.mean())


@dataclass
class TrialStats:
    novel: list[float] = field(default_factory=list)
    all: list[float] = field(default_factory=list)

    def summary(self):
        return {
            "novel_mean": float(np.mean(self.novel)),
            "novel_std": float(np.std(self.novel)),
            "all_mean": float(np.mean(self.all)),
            "all_std": float(np.std(self.all)),
        }


@dataclass
class EvalReport:
    metadata: dict
    per_k: dict[int, TrialStats]

    def mean(self, k, which="novel"):
        return float(np.mean(getattr(self.per_k[k], which)))


def score_test_set(dataset: FewShotDataset, features_all, w_star: WeightTable,
                   metric, scale, top_k=TOP_K):
    """(novel top-k, all top-k) on every held-out test sample."""
    test_idx = np.concatenate([t for t in dataset.test_ids if t.size]) \
        if any(t.size for t in dataset.test_ids) else np.zeros(0, dtype=np.int64)
    if test_idx.size == 0:
        raise DataError("dataset has no test samples")
    scores = heads.score(features_all[test_idx], w_star, metric, s=scale)
    labels = dataset.label_positions()[test_idx]
    novel_mask = dataset.is_novel[labels]
    novel = topk_accuracy(scores, labels, top_k, mask=novel_mask)
    overall = topk_accuracy(scores, labels, top_k)
    return novel, overall


def run_single_trial(dataset, features_all, graph, metric, cfg, t_steps, k, trial,
                     seed, base_rows=None, base_positions=None, train_ggnn=True,
                     top_k=TOP_K):
    """Fresh split + fresh stage-2 training + test-set accuracies."""
    split = make_kshot_split(dataset, k, trial)
    d = features_all.shape[1]
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, k, trial, 1]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([seed, k, trial, 2]))
    trained, spec = tr.build_stage2_params(dataset.k, d, init_rng,
                                           base_rows=base_rows,
                                           base_positions=base_positions)
    try:
        result = tr.train_stage2(dataset, features_all, split, graph, trained,
                                 spec, metric, cfg, t_steps, batch_rng,
                                 train_ggnn=train_ggnn)
    except NumericsError as exc:
        raise NumericsError(f"trial k={k} trial_index={trial} failed: {exc}") from exc
    w_star = propagate(graph, WeightTable(trained[tr.W_INIT_NAME]), spec, trained, t_steps)
    scale = float(trained[heads.SCALE_NAME][0, 0])
    return score_test_set(dataset, features_all, w_star, result.metric, scale, top_k)


def run_trials(dataset: FewShotDataset, features_all, graph: CategoryGraph,
               metric, cfg: tr.Stage2Config, t_steps, k_list, n_trials=5,
               seed=0, base_rows=None, base_positions=None, train_ggnn=True,
               top_k=TOP_K, threads=1, metadata=None) -> EvalReport:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    metric = heads.normalize_metric(metric)
    jobs = [(k, t) for k in k_list for t in range(n_trials)]

    def job(kt):
        k, t = kt
        return run_single_trial(dataset, features_all, graph, metric, cfg,
                                t_steps, k, t, seed, base_rows=base_rows,
                                base_positions=base_positions,
                                train_ggnn=train_ggnn, top_k=top_k)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(job, jobs))
    else:
        outcomes = [job(kt) for kt in jobs]

    per_k = {int(k): TrialStats() for k in k_list}
    for (k, _t), (novel, overall) in zip(jobs, outcomes):
        per_k[int(k)].novel.append(novel)
        per_k[int(k)].all.append(overall)

    meta = {
        "graph": graph.provenance,
        "metric": metric,
        "iterations": t_steps,
        "trials": n_trials,
        "seed": seed,
        "top_k": top_k,
    }
    meta.update(metadata or {})
    return EvalReport(metadata=meta, per_k=per_k)


# -- report serialization --------------------------------------------------------
#
# Byte layout (documented in docs/file_formats.md): a `key = value` header
# block, a blank line, a tab-separated human table, a blank line, then a
# `[trials]` block with one `k=.. trial=.. novel_top5=.. all_top5=..` line
# per trial.  Floats are written with repr() so they round-trip exactly.


def format_report(report: EvalReport) -> str:
    lines = ["# kgtn evaluation report"]
    for key in sorted(report.metadata):
        lines.append(f"{key} = {report.metadata[key]}")
    lines.append("")
    lines.append("k\tnovel_top5\tnovel_std\tall_top5\tall_std")
    for k in sorted(report.per_k):
        s = report.per_k[k].summary()
        lines.append(
            f"{k}\t{s['novel_mean']:.4f}\t{s['novel_std']:.4f}"
            f"\t{s['all_mean']:.4f}\t{s['all_std']:.4f}"
        )
    lines.append("")
    lines.append("[trials]")
    for k in sorted(report.per_k):
        stats = report.per_k[k]
        for t, (nv, al) in enumerate(zip(stats.novel, stats.all)):
            lines.append(f"k={k} trial={t} novel_top5={nv!r} all_top5={al!r}")
    return "\n".join(lines) + "\n"


def write_report(path, report: EvalReport):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))


def parse_report(text: str) -> EvalReport:
    """Read back the machine-readable parts of a serialized report."""
    metadata, per_k = {}, {}
    in_trials = False
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[trials]":
            in_trials = True
            continue
        if in_trials:
            fields = dict(part.split("=", 1) for part in line.split())
            k = int(fields["k"])
            per_k.setdefault(k, TrialStats())
            per_k[k].novel.append(float(fields["novel_top5"]))
            per_k[k].all.append(float(fields["all_top5"]))
        elif " = " in line:
            key, value = line.split(" = ", 1)
            metadata[key] = value
    return EvalReport(metadata=metadata, per_k=per_k)
