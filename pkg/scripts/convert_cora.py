#!/usr/bin/env python3
"""Convert the LINQS Cora release (cora.content / cora.cites) to the canonical layout.

Usage::

    python scripts/convert_cora.py RAW_DIR OUT_DIR [--split-seed 0]

Nodes are numbered in cora.content order, classes in sorted-name order. A
citation line ``cited citing`` becomes the edge ``citing -> cited``; exact
duplicates and self-citations are dropped. Splits follow the usual
semi-supervised protocol: 20 training nodes per class, 500 validation and
1000 test nodes, drawn with ``--split-seed``.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from cgrl.graph_data import Graph, save_dataset  # noqa: E402


def convert(raw: Path, out: Path, split_seed: int = 0) -> Graph:
    ids, rows, names = [], [], []
    for line in (raw / "cora.content").read_text().splitlines():
        parts = line.split()
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:-1]])
        names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names])

    edges = []
    seen = set()
    for line in (raw / "cora.cites").read_text().splitlines():
        cited, citing = line.split()
        s, t = index[citing], index[cited]
        if s == t or (s, t) in seen:
            continue
        seen.add((s, t))
        edges.append((s, t))
    edge_index = np.array(edges).T

    rng = np.random.default_rng(split_seed)
    train = []
    for c in range(len(classes)):
        train.extend(rng.permutation(np.flatnonzero(labels == c))[:20].tolist())
    rest = rng.permutation(np.setdiff1d(np.arange(len(ids)), train))
    splits = {"train": sorted(train), "val": sorted(rest[:500].tolist()), "test": sorted(rest[500:1500].tolist())}

    g = Graph(
        num_nodes=len(ids),
        features=np.array(rows, dtype=np.float32),
        edge_index=edge_index,
        edge_relation=np.zeros(edge_index.shape[1], dtype=np.int64),
        edge_weight=np.ones(edge_index.shape[1]),
        labels=labels,
        splits=splits,
        num_classes=len(classes),
    )
    save_dataset(g, out)
    (out / "classes.txt").write_text("\n".join(classes) + "\n")
    return g


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("raw", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--split-seed", type=int, default=0)
    args = ap.parse_args()
    g = convert(args.raw, args.out, args.split_seed)
    print(f"wrote {args.out}: {g.num_nodes} nodes, {g.num_edges} edges, {g.num_classes} classes")


if __name__ == "__main__":
    main()
