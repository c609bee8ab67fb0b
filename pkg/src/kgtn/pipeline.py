"""End-to-end plumbing: dataset -> stage 1 -> graph -> stage 2 -> report.

Each stage is independently re-runnable from files (see the CLI), but the
functions here are also used directly by the ablation experiment and the
acceptance suite.  All randomness is derived from the experiment seed via
salted SeedSequences, so a (config, seed) pair pins the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import data as dt
from . import evaluation as ev
from . import graphs as gr
from . import training as tr
from .autodiff import ParamSet
from .config import ExperimentConfig
from .errors import DataError
from .ggnn import load_checkpoint, save_checkpoint

SALT_STAGE1 = 101
SALT_STAGE2 = 202


def derive_rng(seed, *salts):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, salts)]))


def generate_dataset(cfg: ExperimentConfig):
    return dt.generate_synthetic(cfg.data)


def build_graph(cfg: ExperimentConfig, k, embeddings=None, hierarchy=None,
                kind=None) -> gr.CategoryGraph:
    kind = kind or cfg.graph.kind
    if kind == "semantic":
        if embeddings is None:
            raise DataError("semantic graph needs an embedding table")
        return gr.build_semantic_graph(embeddings, cfg.graph.decay_lambda)
    if kind == "hierarchy":
        if hierarchy is None:
            raise DataError("hierarchy graph needs taxonomy edges")
        return gr.build_hierarchy_graph(hierarchy, cfg.graph.decay_lambda)
    if kind == "uniform":
        return gr.build_uniform_graph(k)
    if kind == "random":
        return gr.build_random_graph(k, cfg.graph.random_seed)
    if kind == "none":
        # carrier for the no-propagation baseline; never actually read (T=0)
        return gr.build_uniform_graph(k)
    raise ValueError(f"unknown graph kind {kind!r}")


def run_stage1(cfg: ExperimentConfig, dataset: dt.FewShotDataset) -> tr.Stage1Result:
    rng = derive_rng(cfg.seed, SALT_STAGE1)
    extractor = tr.FeatureExtractor(
        dataset.d, cfg.extractor.hidden_dims(), cfg.extractor.out_dim, ParamSet(), rng
    )
    return tr.train_stage1(extractor, dataset, cfg.stage1, rng)


def save_stage1(path, result: tr.Stage1Result):
    tensors = dict(result.params.values)
    tensors["meta.base_positions"] = result.base_positions.astype(float).reshape(1, -1)
    save_checkpoint(path, tensors)


def load_stage1(path):
    """Returns (params, extractor, base_positions)."""
    tensors = load_checkpoint(path)
    base_positions = tensors.pop("meta.base_positions").ravel().astype(int)
    params = ParamSet()
    for name, value in tensors.items():
        params.add(name, value)
    extractor = tr.FeatureExtractor.from_params(params)
    return params, extractor, base_positions


def stage1_base_rows(result: tr.Stage1Result):
    return result.params[result.head_name].copy(), result.base_positions


@dataclass
class AblationResult:
    """Mean accuracies per variant, plus the per-(seed, trial) values."""

    k: int
    variants: dict[str, dict[str, list[float]]]

    def mean(self, variant, which="novel"):
        return float(np.mean(self.variants[variant][which]))


ABLATION_VARIANTS = ("no-graph", "u-graph", "r-graph", "c-graph", "s-graph",
                     "s-graph-pretrained-init")


def run_ablation(cfg: ExperimentConfig, threads=1, progress=None) -> AblationResult:
    """Graph-variant comparison plus the weight-initialization comparison.

    For every dataset seed: generate data, train stage 1 once, then train
    and evaluate stage 2 per variant over `cfg.ablate.trials` k-shot trials.
    """
    variants = {name: {"novel": [], "all": []} for name in ABLATION_VARIANTS}
    stage2_cfg = replace(cfg.stage2, epochs=cfg.ablate.stage2_epochs)
    for i in range(cfg.ablate.dataset_seeds):
        data_cfg = replace(cfg.data, seed=cfg.data.seed + i)
        dataset, embeddings, hierarchy = dt.generate_synthetic(data_cfg)
        sub_cfg = replace(cfg, data=data_cfg, seed=cfg.seed + i)
        s1 = run_stage1(sub_cfg, dataset)
        features = s1.extractor.extract(dataset.features)
        base_rows, base_positions = stage1_base_rows(s1)

        graph_of = {
            "u-graph": build_graph(sub_cfg, dataset.k, kind="uniform"),
            "r-graph": gr.build_random_graph(dataset.k, cfg.graph.random_seed + i),
            "c-graph": build_graph(sub_cfg, dataset.k, hierarchy=hierarchy, kind="hierarchy"),
            "s-graph": build_graph(sub_cfg, dataset.k, embeddings=embeddings, kind="semantic"),
        }
        runs = [(name, graph_of[name], cfg.ggnn.iterations, True, None)
                for name in ("u-graph", "r-graph", "c-graph", "s-graph")]
        runs.append(("no-graph", graph_of["u-graph"], 0, False, None))
        runs.append(("s-graph-pretrained-init", graph_of["s-graph"],
                     cfg.ggnn.iterations, True, (base_rows, base_positions)))

        for name, graph, t_steps, train_ggnn, seeding in runs:
            rows, positions = seeding if seeding else (None, None)
            report = ev.run_trials(
                dataset, features, graph, cfg.metric, stage2_cfg, t_steps,
                k_list=[cfg.ablate.k], n_trials=cfg.ablate.trials,
                seed=sub_cfg.seed, base_rows=rows, base_positions=positions,
                train_ggnn=train_ggnn, top_k=cfg.eval.top_k, threads=threads,
            )
            stats = report.per_k[cfg.ablate.k]
            variants[name]["novel"].extend(stats.novel)
            variants[name]["all"].extend(stats.all)
            if progress:
                progress(f"seed {i}: {name}: novel_top5="
                         f"{np.mean(stats.novel):.4f} all_top5={np.mean(stats.all):.4f}")
    return AblationResult(k=cfg.ablate.k, variants=variants)


def format_ablation_table(result: AblationResult) -> str:
    lines = [
        f"# graph-variant and initialization ablation (k={result.k}, "
        "novel/all are mean top-5 accuracy)",
        "variant\tnovel_top5\tnovel_std\tall_top5\tall_std",
    ]
    for name in ABLATION_VARIANTS:
        novel = result.variants[name]["novel"]
        overall = result.variants[name]["all"]
        lines.append(
            f"{name}\t{np.mean(novel):.4f}\t{np.std(novel):.4f}"
            f"\t{np.mean(overall):.4f}\t{np.std(overall):.4f}"
        )
    lines.append("")
    lines.append("[values]")
    for name in ABLATION_VARIANTS:
        for which in ("novel", "all"):
            vals = " ".join(repr(float(v)) for v in result.variants[name][which])
            lines.append(f"{name}.{which} = {vals}")
    return "\n".join(lines) + "\n"
