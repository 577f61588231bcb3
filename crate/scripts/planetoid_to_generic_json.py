#!/usr/bin/env python3
"""Convert a Planetoid `ind.<name>.*` directory to the generic_json layout.

Writes `graph.json` and `features.bin` into the output directory. Test
indices missing from the pickles (CiteSeer) become isolated nodes with zero
features and class 0, which keeps N at the usual 3327.
"""

import argparse
import json
import pickle
import struct
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp


def load(directory: Path, name: str, part: str):
    with open(directory / f"ind.{name}.{part}", "rb") as f:
        return pickle.load(f, encoding="latin1")


def convert(directory: Path, name: str, out: Path) -> None:
    allx, tx = load(directory, name, "allx"), load(directory, name, "tx")
    ally, ty = load(directory, name, "ally"), load(directory, name, "ty")
    adjacency = load(directory, name, "graph")
    test_index = [int(line) for line in (directory / f"ind.{name}.test.index").read_text().split()]
    test_sorted = np.sort(test_index)

    lo, hi = int(test_sorted[0]), int(test_sorted[-1])
    if hi - lo + 1 != tx.shape[0]:
        full_tx = sp.lil_matrix((hi - lo + 1, tx.shape[1]))
        full_tx[test_sorted - lo, :] = tx
        tx = full_tx
        full_ty = np.zeros((hi - lo + 1, ty.shape[1]))
        full_ty[test_sorted - lo, :] = ty
        ty = full_ty

    features = sp.vstack((allx, tx)).tolil()
    features[test_index, :] = features[test_sorted, :]
    labels = np.vstack((ally, ty))
    labels[test_index, :] = labels[test_sorted, :]

    n = features.shape[0]
    edges = sorted(
        {(min(u, v), max(u, v)) for u, nbrs in adjacency.items() for v in nbrs if u != v and u < n and v < n}
    )
    dense = np.asarray(features.todense(), dtype="<f8")

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.bin", "wb") as f:
        f.write(b"GREF")
        f.write(struct.pack("<QQ", *dense.shape))
        f.write(dense.tobytes(order="C"))
    graph = {
        "nodes": list(range(n)),
        "edges": [list(e) for e in edges],
        "labels": [int(k) for k in labels.argmax(axis=1)],
        "num_features": int(dense.shape[1]),
        "features_file": "features.bin",
        "num_classes": int(labels.shape[1]),
    }
    (out / "graph.json").write_text(json.dumps(graph))
    print(f"{name}: {n} nodes, {2 * len(edges)} edge entries, {dense.shape[1]} features, {labels.shape[1]} classes")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("planetoid_dir", type=Path)
    ap.add_argument("name", help="dataset prefix, e.g. cora, citeseer or pubmed")
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    convert(args.planetoid_dir, args.name, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
