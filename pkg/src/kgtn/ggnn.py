"""Graph-gated refinement of classifier weights.

Each category's classifier weight row seeds a node hidden state; T rounds
of (aggregate neighbour messages, gated update) mix information along the
correlation graph, and an affine output network maps the final and initial
states to the refined weight table.  Everything is built on the autodiff
tape, so training reaches every gating matrix and the initial weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backend
from .autodiff import ParamSet, Tape, as_matrix
from .errors import FormatError, ShapeError
from .graphs import CategoryGraph

WINIT_STD = 0.1  # Gaussian(0, 0.01) rows

ROLES = ("initial", "hidden", "refined")


@dataclass
class WeightTable:
    """K x d table of per-category weight rows with a lifecycle role."""

    values: np.ndarray
    role: str = "initial"

    def __post_init__(self):
        self.values = as_matrix(self.values, "weight table")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def k(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


@dataclass
class GGNNParams:
    """Names and shapes of the shared propagation parameters in a ParamSet."""

    d: int
    prefix: str = "ggnn"

    SHORT_NAMES = ("wz", "uz", "wr", "ur", "w", "u", "out_w", "out_b")

    def name(self, short):
        return f"{self.prefix}.{short}"

    def shapes(self):
        d = self.d
        return {
            "wz": (d, 2 * d),
            "uz": (d, d),
            "wr": (d, 2 * d),
            "ur": (d, d),
            "w": (d, 2 * d),
            "u": (d, d),
            "out_w": (d, 2 * d),
            "out_b": (1, d),
        }

    def names(self):
        return [self.name(s) for s in self.SHORT_NAMES]

    def exprs(self, tape: Tape):
        return {s: tape.parameter(self.name(s), shape) for s, shape in self.shapes().items()}

    @classmethod
    def register(cls, params: ParamSet, d: int, rng, prefix: str = "ggnn") -> "GGNNParams":
        """Fresh parameters: gates ~ U(-1/sqrt(2d), 1/sqrt(2d)); output net is
        the identity on the final hidden state so the untrained module maps
        the initial weights through unchanged."""
        spec = cls(d=d, prefix=prefix)
        bound = 1.0 / np.sqrt(2.0 * d)
        for short, shape in spec.shapes().items():
            if short == "out_w":
                value = np.concatenate([np.eye(d), np.zeros((d, d))], axis=1)
            elif short == "out_b":
                value = np.zeros((1, d))
            else:
                value = rng.uniform(-bound, bound, size=shape)
            params.add(spec.name(short), value)
        return spec


def register_weight_table(params: ParamSet, k: int, d: int, rng,
                          name: str = "w_init", std: float = WINIT_STD) -> WeightTable:
    """Random initial classifier weights, one row per category."""
    value = rng.normal(0.0, std, size=(k, d))
    params.add(name, value)
    return WeightTable(value, role="initial")


# -- tape builders -------------------------------------------------------------


def aggregate_expr(tape: Tape, adjacency: np.ndarray, h):
    """Row k is [sum_j a_kj h_j  ||  sum_j a_jk h_j], i.e. [A.H || A^T.H]."""
    a_const = tape.constant(adjacency)
    at_const = tape.constant(np.ascontiguousarray(adjacency.T))
    return ad.concat_cols(ad.matmul(a_const, h), ad.matmul(at_const, h))


def gated_update_expr(tape: Tape, agg, h_prev, gates: dict):
    return ad.gru_cell(agg, h_prev, gates["wz"], gates["uz"],
                       gates["wr"], gates["ur"], gates["w"], gates["u"])


def propagate_expr(tape: Tape, adjacency: np.ndarray, w_init, ggnn: GGNNParams, t_steps: int):
    """Full refinement graph: T message rounds, then the affine output net
    applied to [h_T || h_0] per row."""
    if t_steps < 0:
        raise ValueError("iteration count must be >= 0")
    gates = ggnn.exprs(tape)
    h0 = w_init  # identity init keeps gradients flowing to the initial table
    h = h0
    for _ in range(t_steps):
        agg = aggregate_expr(tape, adjacency, h)
        h = gated_update_expr(tape, agg, h, gates)
    both = ad.concat_cols(h, h0)
    return ad.add_rowvec(ad.matmul(both, ad.transpose(gates["out_w"])), gates["out_b"])


# -- numpy-level operations (same code path, evaluated eagerly) ------------------


def init_hidden(w_init: WeightTable) -> WeightTable:
    """Copy the initial weights into the step-0 hidden state."""
    if w_init.role != "initial":
        raise ValueError(f"init_hidden expects role 'initial', got {w_init.role!r}")
    return WeightTable(w_init.values.copy(), role="hidden")


def aggregate(graph: CategoryGraph, h: WeightTable) -> np.ndarray:
    if graph.size != h.k:
        raise ShapeError(f"graph has {graph.size} nodes but table has {h.k} rows")
    a = graph.adjacency
    return np.concatenate([a @ h.values, a.T @ h.values], axis=1)


def gated_update(agg: np.ndarray, h_prev: WeightTable, ggnn: GGNNParams,
                 params: ParamSet) -> WeightTable:
    agg = as_matrix(agg, "aggregated messages")
    if agg.shape != (h_prev.k, 2 * h_prev.d):
        raise ShapeError(
            f"messages are {agg.shape}, expected {(h_prev.k, 2 * h_prev.d)}"
        )
    g = {s: params[ggnn.name(s)] for s in ("wz", "uz", "wr", "ur", "w", "u")}
    h_new, _ = backend.gru_cell_forward(
        agg, h_prev.values, g["wz"], g["uz"], g["wr"], g["ur"], g["w"], g["u"]
    )
    return WeightTable(h_new, role="hidden")


def propagate(graph: CategoryGraph, w_init: WeightTable, ggnn: GGNNParams,
              params: ParamSet, t_steps: int) -> WeightTable:
    """Refined classifier weights W* for every category."""
    if graph.size != w_init.k:
        raise ShapeError(f"graph has {graph.size} nodes but table has {w_init.k} rows")
    tape = Tape()
    w0 = tape.parameter("w_init_local", w_init.values.shape)
    expr = propagate_expr(tape, graph.adjacency, w0, ggnn, t_steps)
    local = ParamSet()
    local.add("w_init_local", init_hidden(w_init).values)
    for name in ggnn.names():
        local.add(name, params[name])
    return WeightTable(tape.evaluate(expr, {}, local), role="refined")


# -- checkpoint container --------------------------------------------------------

CHECKPOINT_MAGIC = b"KGTN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Sectioned binary container: magic, version byte, then per-tensor
    records (u32 name length, name, u32 rows, u32 cols, row-major f64 data),
    all little-endian.  Tensors are written in sorted name order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        for name in sorted(tensors):
            m = as_matrix(tensors[name], f"tensor {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
            fh.write(m.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 5 or blob[4] != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    tensors = {}
    pos = 5
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            if len(blob) < pos + name_len:
                raise struct.error("truncated name")
            pos += name_len
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            n_bytes = rows * cols * 8
            if len(blob) < pos + n_bytes:
                raise struct.error("truncated tensor data")
            data = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos)
            pos += n_bytes
        except struct.error as exc:
            raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
        tensors[name] = data.reshape(rows, cols).astype(np.float64)
    return tensors
