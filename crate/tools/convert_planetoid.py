#!/usr/bin/env python3
"""Convert the standard planetoid citation-network files into the text
dataset format used by this project.

The raw files are the widely mirrored pickled planetoid artifacts
(ind.<name>.x, .y, .tx, .ty, .allx, .ally, .graph, .test.index) for
cora, citeseer and pubmed. Obtain them from the public GCN/planetoid
repositories and point --raw-dir at the directory holding them.

Output: <out>/edges.tsv, <out>/features.tsv, <out>/labels.tsv in the
formats described in the README (edge list; `N d_in` header plus dense
feature rows; `node class split` lines with the standard 140/500/1000
style planetoid splits).

Usage:
    python3 tools/convert_planetoid.py --raw-dir raw/ --dataset cora --out data/cora
"""

import argparse
import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp


def parse_index_file(path):
    with open(path) as f:
        return [int(line.strip()) for line in f if line.strip()]


def load_planetoid(raw_dir, name):
    objects = []
    for suffix in ["x", "y", "tx", "ty", "allx", "ally", "graph"]:
        path = os.path.join(raw_dir, f"ind.{name}.{suffix}")
        with open(path, "rb") as f:
            objects.append(pickle.load(f, encoding="latin1"))
    x, y, tx, ty, allx, ally, graph = objects
    test_idx_reorder = parse_index_file(os.path.join(raw_dir, f"ind.{name}.test.index"))
    test_idx_range = np.sort(test_idx_reorder)

    if name == "citeseer":
        # Isolated test nodes: pad the test features/labels over the full
        # index range so row ids line up.
        full = range(min(test_idx_reorder), max(test_idx_reorder) + 1)
        tx_ext = sp.lil_matrix((len(full), x.shape[1]))
        tx_ext[test_idx_range - min(test_idx_range), :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full), y.shape[1]))
        ty_ext[test_idx_range - min(test_idx_range), :] = ty
        ty = ty_ext

    features = sp.vstack((allx, tx)).tolil()
    features[test_idx_reorder, :] = features[test_idx_range, :]
    labels = np.vstack((np.asarray(ally), np.asarray(ty)))
    labels[test_idx_reorder, :] = labels[test_idx_range, :]

    idx_test = test_idx_range.tolist()
    idx_train = list(range(len(y)))
    idx_val = list(range(len(y), len(y) + 500))
    return features.tocsr(), labels, graph, idx_train, idx_val, idx_test


def write_dataset(out_dir, features, labels, graph, idx_train, idx_val, idx_test):
    os.makedirs(out_dir, exist_ok=True)
    n, d = features.shape

    # Each undirected pair once; ingestion symmetrizes.
    seen = set()
    with open(os.path.join(out_dir, "edges.tsv"), "w") as f:
        for u in sorted(graph):
            for v in graph[u]:
                if u == v:
                    continue
                key = (min(u, v), max(u, v))
                if key in seen:
                    continue
                seen.add(key)
                f.write(f"{key[0]}\t{key[1]}\n")

    with open(os.path.join(out_dir, "features.tsv"), "w") as f:
        f.write(f"{n} {d}\n")
        for i in range(n):
            row = features.getrow(i).toarray().ravel()
            cells = "\t".join(repr(float(v)) if v % 1 else str(int(v)) for v in row)
            f.write(f"{i}\t{cells}\n")

    with open(os.path.join(out_dir, "labels.tsv"), "w") as f:
        for split, idx in (("train", idx_train), ("val", idx_val), ("test", idx_test)):
            for i in idx:
                onehot = labels[i]
                if onehot.sum() == 0:
                    continue  # unlabeled (isolated citeseer test rows)
                f.write(f"{i}\t{int(np.argmax(onehot))}\t{split}\n")

    print(f"{out_dir}: N={n} d={d} edges={len(seen)} "
          f"train={len(idx_train)} val={len(idx_val)} test={len(idx_test)}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--raw-dir", required=True)
    ap.add_argument("--dataset", required=True, choices=["cora", "citeseer", "pubmed"])
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    try:
        data = load_planetoid(args.raw_dir, args.dataset)
    except FileNotFoundError as e:
        sys.exit(f"missing raw file: {e}")
    write_dataset(args.out, *data)


if __name__ == "__main__":
    main()
