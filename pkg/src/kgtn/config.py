"""Experiment configuration: defaults, flat `key = value` files, overrides.

Every tunable lives in one nested dataclass tree addressed by dotted keys
("stage1.lr", "graph.decay_lambda", "data.n_super", ...).  A config file is
UTF-8 text with one `key = value` assignment per line ('#' starts a
comment); CLI flags produce overrides that win over file values.  Unknown
keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .data import SyntheticTaxonomyConfig
from .training import Stage1Config, Stage2Config

GRAPH_KINDS = ("semantic", "hierarchy", "uniform", "random", "none")


@dataclass
class GraphConfig:
    kind: str = "semantic"
    decay_lambda: float = 0.4  # distance decay; distinct from the stage-1 loss balance
    random_seed: int = 0

    def __post_init__(self):
        if self.kind not in GRAPH_KINDS:
            raise ValueError(f"graph.kind must be one of {GRAPH_KINDS}")
        if not 0.0 < self.decay_lambda < 1.0:
            raise ValueError("graph.decay_lambda must be in (0, 1)")


@dataclass
class GGNNConfig:
    iterations: int = 2

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("ggnn.iterations must be >= 0")


@dataclass
class ExtractorConfig:
    hidden: int = 64
    depth: int = 1  # number of hidden layers
    out_dim: int = 32

    def hidden_dims(self):
        return [self.hidden] * self.depth


@dataclass
class InitConfig:
    base_from_stage1: bool = False  # seed base weight rows from the stage-1 head


@dataclass
class EvalConfig:
    k_list: list[int] = field(default_factory=lambda: [1, 2, 5, 10])
    trials: int = 5
    top_k: int = 5


@dataclass
class AblateConfig:
    dataset_seeds: int = 5
    trials: int = 5
    k: int = 1
    stage2_epochs: int = 10  # shorter schedule: orderings emerge early


@dataclass
class ExperimentConfig:
    seed: int = 0
    metric: str = "inner_product"
    data: SyntheticTaxonomyConfig = field(default_factory=SyntheticTaxonomyConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    ggnn: GGNNConfig = field(default_factory=GGNNConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    init: InitConfig = field(default_factory=InitConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


def _leaf_fields(cfg):
    """Yield (dotted key, owner object, field) for every scalar field."""
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for key, owner, leaf in _leaf_fields(value):
                yield f"{f.name}.{key}", owner, leaf
        else:
            yield f.name, cfg, f


def _parse_value(text, annotation):
    origin = typing.get_origin(annotation)
    if origin in (list, tuple):
        inner = typing.get_args(annotation)[0]
        return [inner(part) for part in text.split(",") if part.strip()]
    if annotation is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return annotation(text)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> set[str]:
    """Assign parsed values; returns the set of keys actually applied."""
    known = {key: (owner, leaf) for key, owner, leaf in _leaf_fields(cfg)}
    hints = {}
    applied = set()
    for key, raw in overrides.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        owner, leaf = known[key]
        if type(owner) not in hints:
            hints[type(owner)] = typing.get_type_hints(type(owner))
        annotation = hints[type(owner)][leaf.name]
        setattr(owner, leaf.name, _parse_value(str(raw), annotation))
        applied.add(key)
    # re-run dataclass validation on every section that has one
    for section in (cfg.data, cfg.graph, cfg.ggnn, cfg.stage1, cfg.stage2):
        if hasattr(section, "__post_init__"):
            section.__post_init__()
    return applied


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected `key = value`")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, flag_overrides: dict[str, str] | None = None):
    """Defaults, then file values, then flag overrides.

    Returns (config, explicit-keys).  Seeds that were never explicitly set
    follow the master `seed` so one flag controls the whole pipeline.
    """
    cfg = ExperimentConfig()
    explicit = set()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            explicit |= apply_overrides(cfg, parse_config_text(fh.read()))
    if flag_overrides:
        explicit |= apply_overrides(cfg, flag_overrides)
    if "data.seed" not in explicit:
        cfg.data.seed = cfg.seed
    if "graph.random_seed" not in explicit:
        cfg.graph.random_seed = cfg.seed
    return cfg, explicit


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {_format_value(getattr(owner, leaf.name))}"
             for key, owner, leaf in _leaf_fields(cfg)]
    return "\n".join(lines) + "\n"
