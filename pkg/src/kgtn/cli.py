"""Command-line interface.

One executable, subcommand per pipeline stage; artifacts (feature files,
graphs, checkpoints) flow between stages as files so every stage can be
re-run independently.  Exit codes: 0 success, 1 usage error, 2 runtime
failure.  `KGTN_THREADS` caps trial-level parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import evaluation as ev
from . import graphs as gr
from . import heads
from . import pipeline as pl
from . import training as tr
from .config import GRAPH_KINDS, load_config
from .errors import DataError
from .ggnn import propagate_expr, save_checkpoint

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    for flag, key in (("metric", "metric"), ("graph", "graph.kind"),
                      ("iterations", "ggnn.iterations"), ("k", "eval.k_list"),
                      ("trials", "eval.trials")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def _load_cfg(args):
    cfg, _ = load_config(args.config, _overrides(args))
    return cfg


def _data_paths(prefix):
    return (f"{prefix}.features.kgfs", f"{prefix}.embeddings.txt", f"{prefix}.hierarchy.txt")


def _load_dataset(prefix):
    features_path = prefix if prefix.endswith(".kgfs") else _data_paths(prefix)[0]
    return dt.load_features(features_path), features_path


def _threads():
    return max(1, int(os.environ.get("KGTN_THREADS", "1")))


def _features_for(args, cfg, dataset):
    """Extracted features if a stage-1 checkpoint is given, else raw vectors
    (the plug-in path for precomputed feature files)."""
    stage1 = getattr(args, "stage1", None)
    if stage1:
        _params, extractor, base_positions = pl.load_stage1(stage1)
        return extractor.extract(dataset.features), extractor, base_positions
    return dataset.features, None, None


def _resolve_graph(args, cfg, dataset, features_path):
    """--graph takes a builder kind or a saved graph file."""
    kind_or_path = getattr(args, "graph", None) or cfg.graph.kind
    if kind_or_path not in GRAPH_KINDS:
        return gr.load_graph(kind_or_path)
    embeddings = hierarchy = None
    prefix = features_path[: -len(".features.kgfs")] if features_path.endswith(".features.kgfs") else None
    if kind_or_path == "semantic":
        if prefix is None or not os.path.exists(_data_paths(prefix)[1]):
            raise DataError("semantic graph needs <prefix>.embeddings.txt next to the data")
        embeddings = gr.load_embeddings(_data_paths(prefix)[1])
    if kind_or_path == "hierarchy":
        if prefix is None or not os.path.exists(_data_paths(prefix)[2]):
            raise DataError("hierarchy graph needs <prefix>.hierarchy.txt next to the data")
        leaf_ids = [str(int(c)) for c in dataset.category_ids]
        hierarchy = gr.load_hierarchy(_data_paths(prefix)[2], leaf_ids)
    return pl.build_graph(cfg, dataset.k, embeddings=embeddings,
                          hierarchy=hierarchy, kind=kind_or_path)


# -- subcommands --------------------------------------------------------------


def _cmd_gen_data(args):
    cfg = _load_cfg(args)
    dataset, embeddings, hierarchy = pl.generate_dataset(cfg)
    feats, embf, hierf = _data_paths(args.out)
    dt.save_features(feats, dataset)
    gr.save_embeddings(embf, embeddings)
    gr.save_hierarchy(hierf, hierarchy)
    base = (~dataset.is_novel).sum()
    print(f"wrote {feats}: {dataset.n} samples, {dataset.k} categories "
          f"({base} base / {dataset.k - base} novel), d={dataset.d}")
    print(f"wrote {embf} and {hierf}")
    return 0


def _cmd_build_graph(args):
    cfg = _load_cfg(args)
    dataset, features_path = _load_dataset(args.data)
    graph = _resolve_graph(args, cfg, dataset, features_path)
    gr.save_graph(args.out, graph)
    print(f"wrote {args.out}: K={graph.size} provenance={graph.provenance}")
    return 0


def _cmd_train_stage1(args):
    cfg = _load_cfg(args)
    dataset, _ = _load_dataset(args.data)
    result = pl.run_stage1(cfg, dataset)
    pl.save_stage1(args.out, result)
    print(f"stage 1: {cfg.stage1.epochs} epochs, "
          f"final loss {result.epoch_losses[-1]:.6f}" if result.epoch_losses
          else "stage 1: 0 epochs")
    print(f"wrote {args.out}")
    return 0


def _cmd_train_stage2(args):
    cfg = _load_cfg(args)
    dataset, features_path = _load_dataset(args.data)
    features, _extractor, base_positions = _features_for(args, cfg, dataset)
    graph = _resolve_graph(args, cfg, dataset, features_path)
    split = dt.make_kshot_split(dataset, args.k, args.trial)
    init_rng = pl.derive_rng(cfg.seed, pl.SALT_STAGE2, args.k, args.trial, 1)
    batch_rng = pl.derive_rng(cfg.seed, pl.SALT_STAGE2, args.k, args.trial, 2)
    base_rows = None
    if cfg.init.base_from_stage1:
        if not args.stage1:
            raise DataError("init.base_from_stage1 requires --stage1")
        s1_params, _, base_positions = pl.load_stage1(args.stage1)
        base_rows = s1_params["head.w"]
    trained, spec = tr.build_stage2_params(
        dataset.k, features.shape[1], init_rng,
        base_rows=base_rows, base_positions=base_positions if base_rows is not None else None,
    )
    result = tr.train_stage2(dataset, features, split, graph, trained, spec,
                             cfg.metric, cfg.stage2, cfg.ggnn.iterations, batch_rng)
    save_checkpoint(args.out, dict(trained.values))
    print(f"stage 2 ({result.metric}, T={result.t_steps}): "
          f"final loss {result.epoch_losses[-1]:.6f}" if result.epoch_losses
          else "stage 2: 0 epochs")
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args):
    cfg = _load_cfg(args)
    dataset, features_path = _load_dataset(args.data)
    features, _extractor, base_positions = _features_for(args, cfg, dataset)
    graph = _resolve_graph(args, cfg, dataset, features_path)
    base_rows = None
    if cfg.init.base_from_stage1:
        if not args.stage1:
            raise DataError("init.base_from_stage1 requires --stage1")
        s1_params, _, base_positions = pl.load_stage1(args.stage1)
        base_rows = s1_params["head.w"]
    report = ev.run_trials(
        dataset, features, graph, cfg.metric, cfg.stage2, cfg.ggnn.iterations,
        k_list=cfg.eval.k_list, n_trials=cfg.eval.trials, seed=cfg.seed,
        base_rows=base_rows,
        base_positions=base_positions if base_rows is not None else None,
        top_k=cfg.eval.top_k, threads=_threads(),
    )
    text = ev.format_report(report)
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.report}")
    return 0


def _build_gradcheck_loss(metric, seed, k=5, d=8, n=4, t_steps=2):
    rng = np.random.default_rng(seed)
    trained, spec = tr.build_stage2_params(k, d, rng)
    graph = gr.build_random_graph(k, seed=seed)
    tape = ad.Tape()
    x = tape.constant(rng.normal(size=(n, d)))
    w0 = tape.parameter(tr.W_INIT_NAME, (k, d))
    w_star = propagate_expr(tape, graph.adjacency, w0, spec, t_steps)
    s = tape.parameter(heads.SCALE_NAME, (1, 1))
    scores = heads.score_expr(tape, x, w_star, metric, s)
    probs = ad.softmax(scores)
    loss = tr.stage2_loss(tape, probs, rng.integers(0, k, size=n), w_star, 0.001, metric)
    return loss, trained


def _cmd_grad_check(args):
    worst = 0.0
    for metric in heads.METRICS:
        loss, trained = _build_gradcheck_loss(metric, args.seed or 0)
        err = ad.finite_difference_check(loss, trained, epsilon=1e-5)
        print(f"{metric}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} "
          f"({'PASS' if worst < GRADCHECK_TOLERANCE else 'FAIL'} at {GRADCHECK_TOLERANCE})")
    return 0 if worst < GRADCHECK_TOLERANCE else 2


def _cmd_ablate(args):
    cfg = _load_cfg(args)
    result = pl.run_ablation(cfg, threads=_threads(),
                             progress=lambda msg: print(msg, file=sys.stderr))
    table = pl.format_ablation_table(result)
    sys.stdout.write(table)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(table)
        print(f"wrote {args.report}")
    return 0


def build_parser():
    parser = _Parser(prog="kgtn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="generate a synthetic dataset + embeddings + hierarchy")
    _add_common(p)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("build-graph",
                       help="build and save a category-correlation graph")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset prefix or .kgfs file")
    p.add_argument("--graph", choices=list(GRAPH_KINDS),
                   help="graph kind (default: config graph.kind)")
    p.add_argument("--out", required=True, help="output graph file")
    p.set_defaults(fn=_cmd_build_graph)

    p = sub.add_parser("train-stage1",
                       help="train the feature extractor on base categories")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="stage-1 checkpoint path")
    p.set_defaults(fn=_cmd_train_stage1)

    p = sub.add_parser("train-stage2",
                       help="train weights/gating/scale for one k-shot split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--graph", help="graph kind or saved graph file")
    p.add_argument("--stage1", help="stage-1 checkpoint (omit to use raw features)")
    p.add_argument("--metric", choices=["inner", "inner_product", "cosine", "pearson"])
    p.add_argument("--iterations", type=int, help="message-passing rounds T")
    p.add_argument("--k", type=int, default=1, help="shots per novel category")
    p.add_argument("--trial", type=int, default=0, help="k-shot trial index")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.set_defaults(fn=_cmd_train_stage2)

    p = sub.add_parser("evaluate",
                       help="trials of stage-2 training + top-5 accuracy report")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--graph", help="graph kind or saved graph file")
    p.add_argument("--stage1", help="stage-1 checkpoint (omit to use raw features)")
    p.add_argument("--metric", choices=["inner", "inner_product", "cosine", "pearson"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--k", help="comma-separated shot counts, e.g. 1,2,5,10")
    p.add_argument("--trials", type=int, help="trials per shot count")
    p.add_argument("--report", help="also write the report to this file")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of the full stage-2 gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_grad_check, config=None, set=[])

    p = sub.add_parser("ablate",
                       help="graph-variant and initialization comparison table")
    _add_common(p)
    p.add_argument("--report", help="also write the table to this file")
    p.set_defaults(fn=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 2
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"kgtn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
