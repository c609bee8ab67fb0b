"""Synthetic hierarchical few-shot datasets and the feature-file format.

The generator samples a two-level taxonomy: superclass centers, leaf centers
around them, and observations around each leaf.  The true leaf centers
double as the semantic embeddings, so the semantic graph built from them
reflects real class similarity, and the super/leaf tree provides the
hierarchy edges.  A configurable fraction of leaves per superclass is
flagged novel, which guarantees every novel class has base siblings.

Spread parameters are standard deviations of isotropic Gaussians:
superclass centers ~ N(0, within_super_spread^2 I), leaf centers ~
N(super, cluster_spread^2 I), samples ~ N(leaf, noise_sigma^2 I).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError
from .graphs import EmbeddingTable, HierarchyEdges

FEATURE_MAGIC = b"KGFS"
FEATURE_VERSION = 1


@dataclass
class SyntheticTaxonomyConfig:
    n_super: int = 8
    leaves_per_super: int = 8
    d: int = 32
    within_super_spread: float = 5.0
    cluster_spread: float = 1.0
    noise_sigma: float = 1.0
    train_per_base: int = 100
    test_per_class: int = 50
    novel_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_super", "leaves_per_super", "d", "train_per_base", "test_per_class"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        for name in ("within_super_spread", "cluster_spread", "noise_sigma"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if not 0.0 < self.novel_fraction < 1.0:
            raise DataError("novel_fraction must be in (0, 1)")


@dataclass
class FewShotDataset:
    """Feature vectors partitioned into per-category train/test index lists.

    `labels` holds category ids (not positions); `category_ids` defines the
    position order used everywhere else.  `seed` feeds k-shot splits and is 0
    for datasets loaded from files that do not carry one.
    """

    features: np.ndarray
    labels: np.ndarray
    category_ids: np.ndarray
    is_novel: np.ndarray
    train_ids: list[np.ndarray]
    test_ids: list[np.ndarray]
    seed: int = 0
    index_of: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.category_ids = np.asarray(self.category_ids, dtype=np.int64)
        self.is_novel = np.asarray(self.is_novel, dtype=bool)
        self.train_ids = [np.asarray(t, dtype=np.int64) for t in self.train_ids]
        self.test_ids = [np.asarray(t, dtype=np.int64) for t in self.test_ids]
        self.index_of = {int(cid): i for i, cid in enumerate(self.category_ids)}
        self.validate()

    def validate(self):
        n, k = self.features.shape[0], len(self.category_ids)
        if len(self.index_of) != k:
            raise DataError("duplicate category id")
        if self.labels.shape[0] != n:
            raise DataError("one label per sample required")
        if n and not np.isin(self.labels, self.category_ids).all():
            bad = int(self.labels[~np.isin(self.labels, self.category_ids)][0])
            raise DataError(f"label {bad} not in the category table")
        if len(self.train_ids) != k or len(self.test_ids) != k:
            raise DataError("per-category index lists must cover every category")
        for pos, cid in enumerate(self.category_ids):
            tr, te = self.train_ids[pos], self.test_ids[pos]
            both = np.concatenate([tr, te])
            if both.size != np.unique(both).size:
                raise DataError(f"category {cid}: train/test indices overlap")
            if both.size and (both.min() < 0 or both.max() >= n):
                raise DataError(f"category {cid}: sample index out of range")
            if both.size and (self.labels[both] != cid).any():
                raise DataError(f"category {cid}: index list points at another label")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def k(self):
        return len(self.category_ids)

    @property
    def d(self):
        return self.features.shape[1]

    def positions(self, novel: bool) -> np.ndarray:
        return np.nonzero(self.is_novel == novel)[0]

    def label_positions(self) -> np.ndarray:
        """Labels mapped from category ids to table positions."""
        lut = np.zeros(int(self.category_ids.max()) + 1, dtype=np.int64) if self.k else None
        if lut is None:
            return np.zeros(0, dtype=np.int64)
        for pos, cid in enumerate(self.category_ids):
            lut[cid] = pos
        return lut[self.labels]


@dataclass
class FewShotSplit:
    """One k-shot trial: the chosen train samples of every novel category."""

    k: int
    trial_index: int
    chosen: dict[int, np.ndarray]  # category position -> sample indices


def generate_synthetic(cfg: SyntheticTaxonomyConfig):
    """Sample a dataset plus its embeddings and hierarchy; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    k_total = cfg.n_super * cfg.leaves_per_super

    super_centers = rng.normal(0.0, cfg.within_super_spread, size=(cfg.n_super, cfg.d))
    leaf_centers = np.empty((k_total, cfg.d))
    for s in range(cfg.n_super):
        block = slice(s * cfg.leaves_per_super, (s + 1) * cfg.leaves_per_super)
        leaf_centers[block] = super_centers[s] + rng.normal(
            0.0, cfg.cluster_spread, size=(cfg.leaves_per_super, cfg.d)
        )

    # flag novel leaves per superclass, always keeping at least one base leaf
    n_novel_per_super = min(
        cfg.leaves_per_super - 1, max(1, round(cfg.leaves_per_super * cfg.novel_fraction))
    )
    is_novel = np.zeros(k_total, dtype=bool)
    for s in range(cfg.n_super):
        picks = rng.choice(cfg.leaves_per_super, size=n_novel_per_super, replace=False)
        is_novel[s * cfg.leaves_per_super + picks] = True
    if (~is_novel).sum() < 2 or is_novel.sum() < 2:
        raise DataError(
            f"config yields {(~is_novel).sum()} base / {is_novel.sum()} novel "
            "categories; need at least 2 of each"
        )

    per_class = cfg.train_per_base + cfg.test_per_class
    features = np.empty((k_total * per_class, cfg.d))
    labels = np.empty(k_total * per_class, dtype=np.int64)
    train_ids, test_ids = [], []
    for c in range(k_total):
        start = c * per_class
        features[start : start + per_class] = leaf_centers[c] + rng.normal(
            0.0, cfg.noise_sigma, size=(per_class, cfg.d)
        )
        labels[start : start + per_class] = c
        train_ids.append(np.arange(start, start + cfg.train_per_base))
        test_ids.append(np.arange(start + cfg.train_per_base, start + per_class))

    dataset = FewShotDataset(
        features=features,
        labels=labels,
        category_ids=np.arange(k_total),
        is_novel=is_novel,
        train_ids=train_ids,
        test_ids=test_ids,
        seed=cfg.seed,
    )
    embeddings = EmbeddingTable(list(range(k_total)), leaf_centers.copy())
    edges = [("root", f"s{s}") for s in range(cfg.n_super)]
    for c in range(k_total):
        edges.append((f"s{c // cfg.leaves_per_super}", str(c)))
    hierarchy = HierarchyEdges(edges, [str(c) for c in range(k_total)])
    return dataset, embeddings, hierarchy


def make_kshot_split(dataset: FewShotDataset, k: int, trial_index: int) -> FewShotSplit:
    """Pick k train samples per novel category; deterministic per
    (dataset seed, k, trial_index)."""
    if k < 1:
        raise DataError("k must be >= 1")
    if trial_index < 0:
        raise DataError("trial_index must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([dataset.seed, k, trial_index]))
    chosen = {}
    for pos in dataset.positions(novel=True):
        pool = dataset.train_ids[pos]
        if k > pool.size:
            raise DataError(
                f"category {int(dataset.category_ids[pos])}: k={k} exceeds pool of {pool.size}"
            )
        chosen[int(pos)] = np.sort(rng.choice(pool, size=k, replace=False))
    return FewShotSplit(k=k, trial_index=trial_index, chosen=chosen)


# -- binary feature files -------------------------------------------------------


def save_features(path, dataset: FewShotDataset):
    """Binary layout (little-endian): magic `KGFS`, version byte,
    u32 N/K/d, N records of (u32 label, d f64 values), then the category
    table (u32 count; per category u32 id, u8 is_novel).  A trailing split
    section (per category: u32 n_train, u32 n_test, then the u32 sample
    indices) carries the train/test partition; readers treat it as optional
    so externally produced files without it still load."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(bytes([FEATURE_VERSION]))
        fh.write(struct.pack("<III", dataset.n, dataset.k, dataset.d))
        for i in range(dataset.n):
            fh.write(struct.pack("<I", int(dataset.labels[i])))
            fh.write(dataset.features[i].astype("<f8").tobytes())
        fh.write(struct.pack("<I", dataset.k))
        for pos in range(dataset.k):
            fh.write(struct.pack("<IB", int(dataset.category_ids[pos]),
                                 int(dataset.is_novel[pos])))
        for pos in range(dataset.k):
            tr, te = dataset.train_ids[pos], dataset.test_ids[pos]
            fh.write(struct.pack("<II", tr.size, te.size))
            fh.write(tr.astype("<u4").tobytes())
            fh.write(te.astype("<u4").tobytes())


def load_features(path) -> FewShotDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 5 or blob[4] != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature-file version")
    pos = 5
    try:
        n, k, d = struct.unpack_from("<III", blob, pos)
        pos += 12
        labels = np.empty(n, dtype=np.int64)
        features = np.empty((n, d))
        rec = 4 + 8 * d
        if len(blob) < pos + n * rec:
            raise struct.error("truncated sample records")
        for i in range(n):
            (labels[i],) = struct.unpack_from("<I", blob, pos)
            features[i] = np.frombuffer(blob, dtype="<f8", count=d, offset=pos + 4)
            pos += rec
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if count != k:
            raise FormatError(f"{path}: category table has {count} entries, header says {k}")
        ids = np.empty(k, dtype=np.int64)
        flags = np.empty(k, dtype=bool)
        for i in range(k):
            cid, flag = struct.unpack_from("<IB", blob, pos)
            pos += 5
            ids[i], flags[i] = cid, bool(flag)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated feature file ({exc})") from None

    if n == 0 and k > 0:
        raise FormatError(f"{path}: no samples but a non-empty category table")
    if n and not np.isin(labels, ids).all():
        bad = int(labels[~np.isin(labels, ids)][0])
        raise FormatError(f"{path}: label {bad} out of range of the category table")

    if pos < len(blob):
        train_ids, test_ids = [], []
        try:
            for _ in range(k):
                n_tr, n_te = struct.unpack_from("<II", blob, pos)
                pos += 8
                need = 4 * (n_tr + n_te)
                if len(blob) < pos + need:
                    raise struct.error("truncated split section")
                tr = np.frombuffer(blob, dtype="<u4", count=n_tr, offset=pos).astype(np.int64)
                pos += 4 * n_tr
                te = np.frombuffer(blob, dtype="<u4", count=n_te, offset=pos).astype(np.int64)
                pos += 4 * n_te
                train_ids.append(tr)
                test_ids.append(te)
        except struct.error as exc:
            raise FormatError(f"{path}: truncated feature file ({exc})") from None
        if pos != len(blob):
            raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    else:
        # external file without a split section: everything is train data
        train_ids = [np.nonzero(labels == cid)[0] for cid in ids]
        test_ids = [np.zeros(0, dtype=np.int64) for _ in range(k)]

    try:
        return FewShotDataset(features, labels, ids, flags, train_ids, test_ids)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_features_text(path, dataset: FewShotDataset):
    """Debugging export: one `label v1 ... vd` line per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(dataset.n):
            row = " ".join(repr(float(v)) for v in dataset.features[i])
            fh.write(f"{int(dataset.labels[i])} {row}\n")
