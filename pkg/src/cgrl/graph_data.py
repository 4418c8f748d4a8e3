"""Attributed graph container, dataset I/O, synthetic graphs and noise injection.

On-disk dataset layout (one directory per dataset)::

    meta.json     {"num_nodes", "feat_dim", "num_classes", "num_relations", "features_file"}
    edges.tsv     src<TAB>dst[<TAB>relation[<TAB>weight]]
    features.bin  row-major little-endian float32, num_nodes x feat_dim
    features.tsv  node_id<TAB>f_1 ... f_d   (alternative to features.bin)
    labels.tsv    node_id<TAB>class_id
    splits.json   {"train": [...], "val": [...], "test": [...]}
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ValidationError

SPLIT_NAMES = ("train", "val", "test")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable attributed graph.

    Edges are stored directed as ``edge_index[0] -> edge_index[1]``; messages
    flow from source to destination. Self-loops are never stored, the encoders
    add them implicitly. Features are held as float64 in memory and written as
    float32 by :func:`save_dataset`.
    """

    num_nodes: int
    features: np.ndarray
    edge_index: np.ndarray
    edge_relation: np.ndarray
    edge_weight: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    num_classes: int
    num_relations: int = 1

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "features", _frozen(np.asarray(self.features, dtype=np.float64)))
        ei = np.asarray(self.edge_index, dtype=np.int64).reshape(2, -1)
        set_(self, "edge_index", _frozen(ei))
        set_(self, "edge_relation", _frozen(np.asarray(self.edge_relation, dtype=np.int64).reshape(-1)))
        set_(self, "edge_weight", _frozen(np.asarray(self.edge_weight, dtype=np.float64).reshape(-1)))
        set_(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64).reshape(-1)))
        splits = {k: _frozen(np.asarray(self.splits.get(k, []), dtype=np.int64).reshape(-1)) for k in SPLIT_NAMES}
        set_(self, "splits", splits)
        self._validate()

    def _validate(self) -> None:
        n = self.num_nodes
        if n <= 0:
            raise ValidationError("num_nodes must be positive")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError(f"features must have shape ({n}, d), got {self.features.shape}")
        e = self.num_edges
        if self.edge_relation.shape[0] != e or self.edge_weight.shape[0] != e:
            raise ValidationError("edge_relation / edge_weight length differs from edge count")
        if e:
            if self.edge_index.min() < 0 or self.edge_index.max() >= n:
                raise ValidationError("edge endpoint outside [0, num_nodes)")
            if np.any(self.edge_index[0] == self.edge_index[1]):
                raise ValidationError("self-loops must not be stored; encoders add them implicitly")
            if np.any(self.edge_weight < 0) or np.any(self.edge_weight > 1):
                raise ValidationError("edge weights must lie in [0, 1]")
            if self.edge_relation.min() < 0 or self.edge_relation.max() >= self.num_relations:
                raise ValidationError("relation id outside [0, num_relations)")
        if self.labels.shape[0] != n:
            raise ValidationError("labels length differs from num_nodes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("label outside [0, num_classes)")
        seen: set[int] = set()
        for name in SPLIT_NAMES:
            ids = self.splits[name]
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise ValidationError(f"split '{name}' contains an out-of-range node id")
            s = set(ids.tolist())
            if len(s) != ids.size:
                raise ValidationError(f"split '{name}' contains duplicate ids")
            if seen & s:
                raise ValidationError(f"split '{name}' overlaps another split")
            seen |= s

    @property
    def num_edges(self) -> int:
        return int(self.edge_index.shape[1])

    @property
    def feat_dim(self) -> int:
        return int(self.features.shape[1])

    def replace(self, **changes) -> "Graph":
        kw = dict(
            num_nodes=self.num_nodes,
            features=self.features,
            edge_index=self.edge_index,
            edge_relation=self.edge_relation,
            edge_weight=self.edge_weight,
            labels=self.labels,
            splits=self.splits,
            num_classes=self.num_classes,
            num_relations=self.num_relations,
        )
        kw.update(changes)
        return Graph(**kw)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.num_classes == other.num_classes
            and self.num_relations == other.num_relations
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edge_index, other.edge_index)
            and np.array_equal(self.edge_relation, other.edge_relation)
            and np.array_equal(self.edge_weight, other.edge_weight)
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(self.splits[k], other.splits[k]) for k in SPLIT_NAMES)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass
class DatasetStats:
    degree_histogram: dict[int, int]
    class_histogram: dict[int, int]

    def to_json(self) -> dict:
        return {
            "degree_histogram": {str(k): v for k, v in sorted(self.degree_histogram.items())},
            "class_histogram": {str(k): v for k, v in sorted(self.class_histogram.items())},
        }


# --------------------------------------------------------------------------- I/O


def _read_meta(path: Path) -> dict:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON at line {exc.lineno} col {exc.colno}") from exc
    for key in ("num_nodes", "feat_dim", "num_classes"):
        if key not in meta:
            raise FormatError(f"{path}: missing key '{key}'")
    meta.setdefault("num_relations", 1)
    meta.setdefault("features_file", "features.bin")
    if meta["features_file"] not in ("features.bin", "features.tsv"):
        raise FormatError(f"{path}: features_file must be features.bin or features.tsv")
    return meta


def _require(d: Path, name: str) -> Path:
    p = d / name
    if not p.is_file():
        raise FormatError(f"missing dataset file: {p}")
    return p


def _parse_edges(path: Path, n: int, num_relations: int):
    src, dst, rel, w = [], [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2 or len(parts) > 4:
                raise FormatError(f"{path}:{lineno}: expected 2-4 tab-separated fields")
            try:
                s, t = int(parts[0]), int(parts[1])
                r = int(parts[2]) if len(parts) > 2 else 0
                wt = float(parts[3]) if len(parts) > 3 else 1.0
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not (0 <= s < n and 0 <= t < n):
                raise ValidationError(f"{path}:{lineno}: node id out of range [0, {n})")
            if s == t:
                raise ValidationError(f"{path}:{lineno}: self-loop")
            if not 0 <= r < num_relations:
                raise ValidationError(f"{path}:{lineno}: relation {r} outside [0, {num_relations})")
            if not 0.0 <= wt <= 1.0:
                raise ValidationError(f"{path}:{lineno}: weight {wt} outside [0, 1]")
            src.append(s)
            dst.append(t)
            rel.append(r)
            w.append(wt)
    return np.array([src, dst], dtype=np.int64).reshape(2, -1), np.array(rel, dtype=np.int64), np.array(w)


def _parse_labels(path: Path, n: int, num_classes: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected node_id<TAB>class_id")
            try:
                i, c = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not 0 <= i < n:
                raise ValidationError(f"{path}:{lineno}: node id {i} out of range [0, {n})")
            if not 0 <= c < num_classes:
                raise ValidationError(f"{path}:{lineno}: class {c} outside [0, {num_classes})")
            labels[i] = c
    if np.any(labels < 0):
        raise ValidationError(f"{path}: {int((labels < 0).sum())} nodes have no label")
    return labels


def _parse_features_tsv(path: Path, n: int, d: int) -> np.ndarray:
    x = np.zeros((n, d), dtype=np.float32)
    seen = np.zeros(n, dtype=bool)
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != d + 1:
                raise FormatError(f"{path}:{lineno}: expected node id plus {d} values")
            try:
                i = int(parts[0])
                row = np.array(parts[1:], dtype=np.float32)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not 0 <= i < n:
                raise ValidationError(f"{path}:{lineno}: node id {i} out of range [0, {n})")
            x[i] = row
            seen[i] = True
    if not seen.all():
        raise ValidationError(f"{path}: missing feature rows for {int((~seen).sum())} nodes")
    return x


def load_dataset(directory: str | Path) -> Graph:
    """Read a dataset directory into a validated :class:`Graph`."""
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"dataset directory not found: {d}")
    meta = _read_meta(_require(d, "meta.json"))
    n, dim = int(meta["num_nodes"]), int(meta["feat_dim"])
    num_relations = int(meta["num_relations"])

    edge_index, rel, w = _parse_edges(_require(d, "edges.tsv"), n, num_relations)
    labels = _parse_labels(_require(d, "labels.tsv"), n, int(meta["num_classes"]))

    feat_path = _require(d, meta["features_file"])
    if meta["features_file"] == "features.bin":
        raw = np.fromfile(feat_path, dtype="<f4")
        if raw.size != n * dim:
            raise FormatError(f"{feat_path}: expected {n * dim} float32 values, found {raw.size}")
        features = raw.reshape(n, dim)
    else:
        features = _parse_features_tsv(feat_path, n, dim)

    splits_path = _require(d, "splits.json")
    try:
        splits = json.loads(splits_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{splits_path}: malformed JSON at line {exc.lineno} col {exc.colno}") from exc
    missing = [k for k in SPLIT_NAMES if k not in splits]
    if missing:
        raise FormatError(f"{splits_path}: missing split(s) {missing}")

    return Graph(
        num_nodes=n,
        features=features,
        edge_index=edge_index,
        edge_relation=rel,
        edge_weight=w,
        labels=labels,
        splits={k: splits[k] for k in SPLIT_NAMES},
        num_classes=int(meta["num_classes"]),
        num_relations=num_relations,
    )


def save_dataset(g: Graph, directory: str | Path, features_file: str = "features.bin") -> Path:
    """Write ``g`` in the canonical directory format; returns the directory."""
    if features_file not in ("features.bin", "features.tsv"):
        raise ParameterError("features_file must be 'features.bin' or 'features.tsv'")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": g.num_nodes,
        "feat_dim": g.feat_dim,
        "num_classes": g.num_classes,
        "num_relations": g.num_relations,
        "features_file": features_file,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with (d / "edges.tsv").open("w") as fh:
        for s, t, r, w in zip(g.edge_index[0], g.edge_index[1], g.edge_relation, g.edge_weight):
            fh.write(f"{s}\t{t}\t{r}\t{float(w)!r}\n")
    with (d / "labels.tsv").open("w") as fh:
        for i, c in enumerate(g.labels):
            fh.write(f"{i}\t{c}\n")
    if features_file == "features.bin":
        g.features.astype("<f4").tofile(d / "features.bin")
    else:
        with (d / "features.tsv").open("w") as fh:
            for i, row in enumerate(g.features):
                fh.write(str(i) + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    splits = {k: g.splits[k].tolist() for k in SPLIT_NAMES}
    (d / "splits.json").write_text(json.dumps(splits) + "\n")
    return d


# ---------------------------------------------------------------- generators


def _default_splits(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n = labels.size
    train = []
    for c in range(num_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, min(20, members.size // 5))
        train.extend(members[:k].tolist())
    rest = rng.permutation(np.setdiff1d(np.arange(n), train))
    n_val = max(1, int(round(0.2 * n)))
    return {"train": np.sort(train), "val": np.sort(rest[:n_val]), "test": np.sort(rest[n_val:])}


def make_synthetic(
    num_nodes: int,
    num_classes: int,
    p_in: float,
    p_out: float,
    feat_dim: int,
    seed: int,
    feature_noise: float = 1.0,
) -> Graph:
    """Stochastic block model with a noisy one-hot class signal as features.

    Each unordered pair is stored once (``src < dst``); use :func:`symmetrize`
    for message passing in both directions. Splits take up to 20 nodes per
    class for training, 20% of all nodes for validation and the rest for
    testing.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ParameterError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if num_classes < 1 or num_nodes < num_classes:
        raise ParameterError("num_nodes must be >= num_classes >= 1")
    if feat_dim < num_classes:
        raise ParameterError("feat_dim must be >= num_classes to carry the class signal")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % num_classes)

    iu, ju = np.triu_indices(num_nodes, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(iu.size) < prob
    edge_index = np.stack([iu[keep], ju[keep]])

    x = rng.normal(0.0, feature_noise, size=(num_nodes, feat_dim))
    x[np.arange(num_nodes), labels] += 1.0

    return Graph(
        num_nodes=num_nodes,
        features=x.astype(np.float32),
        edge_index=edge_index,
        edge_relation=np.zeros(edge_index.shape[1], dtype=np.int64),
        edge_weight=np.ones(edge_index.shape[1]),
        labels=labels,
        splits=_default_splits(labels, num_classes, rng),
        num_classes=num_classes,
    )


def inject_edge_noise(g: Graph, rate: float, seed: int) -> Graph:
    """Append ``floor(rate * |E|)`` uniformly random spurious edges.

    New edges connect distinct nodes whose pair (in either direction) is not
    already an edge; they get relation 0 and weight 1. Existing edges keep
    their position, relation and weight.
    """
    if not 0.0 <= rate <= 1.0:
        raise ParameterError(f"noise rate must be in [0, 1], got {rate}")
    k = int(math.floor(rate * g.num_edges))
    if k == 0:
        return g
    n = g.num_nodes
    existing = {(int(s), int(t)) for s, t in g.edge_index.T}
    existing |= {(t, s) for s, t in existing}
    free_pairs = n * (n - 1) // 2 - len(existing) // 2
    if k > free_pairs:
        raise ParameterError(f"cannot add {k} edges: only {free_pairs} free node pairs")

    rng = np.random.default_rng(seed)
    added: list[tuple[int, int]] = []
    while len(added) < k:
        cand = rng.integers(0, n, size=(2 * (k - len(added)) + 16, 2))
        for s, t in cand:
            s, t = int(s), int(t)
            if s == t or (s, t) in existing:
                continue
            existing.add((s, t))
            existing.add((t, s))
            added.append((s, t))
            if len(added) == k:
                break
    new = np.array(added, dtype=np.int64).T
    return g.replace(
        edge_index=np.concatenate([g.edge_index, new], axis=1),
        edge_relation=np.concatenate([g.edge_relation, np.zeros(k, dtype=np.int64)]),
        edge_weight=np.concatenate([g.edge_weight, np.ones(k)]),
    )


def symmetrize(g: Graph) -> Graph:
    """Add every missing reverse edge (same relation and weight); drops duplicates."""
    src, dst = g.edge_index
    seen: dict[tuple[int, int, int], int] = {}
    order_s, order_t, order_r, order_w = [], [], [], []
    for s, t, r, w in zip(src.tolist(), dst.tolist(), g.edge_relation.tolist(), g.edge_weight.tolist()):
        if (s, t, r) in seen:
            continue
        seen[(s, t, r)] = len(order_s)
        order_s.append(s)
        order_t.append(t)
        order_r.append(r)
        order_w.append(w)
    for idx in range(len(order_s)):
        s, t, r, w = order_s[idx], order_t[idx], order_r[idx], order_w[idx]
        if (t, s, r) not in seen:
            seen[(t, s, r)] = len(order_s)
            order_s.append(t)
            order_t.append(s)
            order_r.append(r)
            order_w.append(w)
    return g.replace(
        edge_index=np.array([order_s, order_t], dtype=np.int64).reshape(2, -1),
        edge_relation=np.array(order_r, dtype=np.int64),
        edge_weight=np.array(order_w, dtype=np.float64),
    )


def relabel_nodes(g: Graph, perm: np.ndarray) -> Graph:
    """Rename node ``i`` to ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.num_nodes)):
        raise ParameterError("perm must be a permutation of range(num_nodes)")
    inv = np.argsort(perm)
    return g.replace(
        features=g.features[inv],
        edge_index=perm[g.edge_index],
        labels=g.labels[inv],
        splits={k: np.sort(perm[v]) for k, v in g.splits.items()},
    )


def dataset_stats(g: Graph) -> DatasetStats:
    neigh: list[set[int]] = [set() for _ in range(g.num_nodes)]
    for s, t in g.edge_index.T.tolist():
        neigh[s].add(t)
        neigh[t].add(s)
    degrees = Counter(len(nb) for nb in neigh)
    classes = Counter(g.labels.tolist())
    return DatasetStats(degree_histogram=dict(sorted(degrees.items())), class_histogram=dict(sorted(classes.items())))


def normalize_features(g: Graph) -> Graph:
    """Row-normalize features so every row with a nonzero sum sums to one."""
    x = g.features.astype(np.float64)
    sums = x.sum(axis=1, keepdims=True)
    nz = sums[:, 0] != 0
    x[nz] = x[nz] / sums[nz]
    return g.replace(features=x)
