"""Regenerates hdbscan_reference.json from scikit-learn's HDBSCAN.

Run once; the output is committed and the C++ tests compare against it.

Mutual reachability produces many exactly equal MST weights. scikit-learn
orders MST edges with numpy's default (unstable) argsort, so the merge order
among ties is unspecified. The reference is generated with a stable sort,
which keeps Prim insertion order among equal weights, the rule the C++ code
documents.
"""
import json

import numpy as np
import sklearn
from sklearn.cluster import HDBSCAN
from sklearn.cluster._hdbscan import hdbscan as _impl
from sklearn.datasets import make_blobs, make_moons

_argsort = np.argsort


def _stable_argsort(a, *args, **kwargs):
    kwargs["kind"] = "stable"
    return _argsort(a, *args, **kwargs)


def cases():
    rng = np.random.default_rng(20240501)
    x, _ = make_blobs(n_samples=300, centers=4, cluster_std=0.6, random_state=1)
    yield "blobs4", x, 10, 10
    yield "blobs4_ms5", x, 15, 5
    x, _ = make_moons(n_samples=250, noise=0.06, random_state=2)
    yield "moons", x, 12, 12
    yield "uniform20", rng.uniform(-100, 100, size=(20, 3)), 10, 10
    dense = rng.normal(0, 0.2, size=(120, 3))
    sparse = rng.normal(4, 1.2, size=(80, 3))
    yield "mixed_density", np.vstack([dense, sparse, rng.uniform(-6, 10, size=(40, 3))]), 10, 10
    centers = rng.normal(0, 3, size=(6, 16))
    blobs = np.vstack([c + rng.normal(0, 0.5, size=(60, 16)) for c in centers])
    yield "blobs16d", blobs, 10, 10
    nested = np.vstack([rng.normal(0, 0.3, size=(60, 2)), rng.normal([1.5, 0], 0.3, size=(60, 2)),
                        rng.normal([10, 10], 0.5, size=(90, 2))])
    yield "nested", nested, 20, 20


def main():
    _impl.np.argsort = _stable_argsort
    out = {"sklearn_version": sklearn.__version__, "mst_edge_sort": "stable", "cases": []}
    for name, x, mcs, ms in cases():
        labels = HDBSCAN(min_cluster_size=mcs, min_samples=ms).fit_predict(x)
        out["cases"].append({"name": name, "min_cluster_size": mcs, "min_samples": ms,
                             "points": x.tolist(), "labels": labels.tolist()})
        print(name, len(x), "clusters", labels.max() + 1, "noise", int((labels < 0).sum()))
    with open("hdbscan_reference.json", "w") as f:
        json.dump(out, f)


if __name__ == "__main__":
    main()
