"""From-scratch CART trees and a bagging ensemble that keeps its bootstrap
multiplicity vectors.

Each bootstrap dataset is n draws with replacement, recorded as an integer
count vector w_b; tree b is fit with sample weights w_b. Rows with zero weight
take no part in split search or leaf counts but stay addressable for
out-of-bag scoring.
"""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as _data
from ._rng import substream, substream_seed
from ._tree import build_tree, predict_rows

_UNLIMITED_DEPTH = 1 << 60
SERIAL_FORMAT_VERSION = 1


class ForestError(ValueError):
    pass


@dataclass
class TreeConfig:
    """max_features defaults to floor(sqrt(d)) at fit time; no depth cap."""

    max_features: int | None = None
    min_samples_split: int = 2
    max_depth: int | None = None
    seed: int = 0

    def resolved_max_features(self, d):
        m = self.max_features
        if m is None:
            m = max(1, int(math.floor(math.sqrt(d))))
        if not 1 <= m <= d:
            raise ForestError(f"max_features {m} outside [1, {d}]")
        return m

    def to_dict(self):
        return {
            "max_features": self.max_features,
            "min_samples_split": self.min_samples_split,
            "max_depth": self.max_depth,
            "seed": self.seed,
        }


@dataclass
class DecisionTree:
    """Flat node arrays; feature[v] == -1 marks a leaf.

    Splits send rows with value <= threshold to the left child. Leaves carry
    the weighted class-count vector seen at fit time; the predicted class is
    its argmax with ties toward the smallest class index.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_class: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def predict(self, X):
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        return predict_rows(
            self.feature, self.threshold, self.left, self.right, self.leaf_class, X
        )


@dataclass
class BootstrapWeights:
    w: np.ndarray  # (B, n) int32 multiplicities

    def __post_init__(self):
        self.w = np.ascontiguousarray(self.w, dtype=np.int32)
        n = self.w.shape[1]
        sums = self.w.sum(axis=1)
        if not (sums == n).all():
            bad = int(np.argmax(sums != n))
            raise ForestError(f"bootstrap row {bad} sums to {sums[bad]}, expected {n}")

    @property
    def B(self):
        return self.w.shape[0]

    @property
    def n(self):
        return self.w.shape[1]


@dataclass
class BaggingEnsemble:
    trees: list
    weights: BootstrapWeights
    class_count: int
    config: TreeConfig
    seed: int
    train_fingerprint: str
    elapsed_seconds: float = 0.0

    @property
    def B(self):
        return len(self.trees)


def draw_bootstrap_weights(n, B, seed):
    """B multiplicity rows, each the tally of n uniform draws from [0, n).

    Row b depends only on (seed, b), never on how rows are scheduled.
    """
    if n < 1 or B < 1:
        raise ForestError("need n >= 1 and B >= 1")
    w = np.empty((B, n), dtype=np.int32)
    for b in range(B):
        draws = substream(seed, "bootstrap", b).integers(0, n, size=n)
        w[b] = np.bincount(draws, minlength=n)
    return BootstrapWeights(w)


def presort_features(X):
    """Per-feature stable argsort of the rows; shared by all trees on X."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, d = X.shape
    order = np.empty((d, n), dtype=np.int32)
    for f in range(d):
        order[f] = np.argsort(X[:, f], kind="stable")
    return order


def _active_order(presorted, active_mask):
    n_active = int(active_mask.sum())
    return presorted[active_mask[presorted]].reshape(presorted.shape[0], n_active)


def fit_tree(train, sample_weights, cfg, presorted=None, kernel_seed=None):
    """Weighted CART: at each node a seeded draw of max_features candidate
    features, thresholds at midpoints between consecutive distinct values,
    split chosen to minimize weighted Gini impurity.

    A tree fit with weights w equals a tree fit on the multiset where row j
    is repeated w_j times.
    """
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (train.n,):
        raise ForestError(f"sample_weights shape {w.shape}, expected ({train.n},)")
    if (w < 0).any():
        raise ForestError("negative sample weight")
    active = w > 0
    if not active.any():
        raise ForestError("all sample weights are zero")
    if presorted is None:
        presorted = presort_features(train.features)
    order = _active_order(presorted, active)
    if kernel_seed is None:
        kernel_seed = substream_seed(cfg.seed, "tree")
    max_depth = _UNLIMITED_DEPTH if cfg.max_depth is None else int(cfg.max_depth)
    out = build_tree(
        train.features,
        train.labels,
        w,
        train.class_count,
        order,
        cfg.resolved_max_features(train.d),
        float(cfg.min_samples_split),
        max_depth,
        np.uint64(kernel_seed),
    )
    return DecisionTree(*out[:6])


def fit_ensemble(train, B, cfg, workers=1):
    """Draw bootstrap weights, then fit tree b with weights w_b.

    Tree b's internal randomness is seeded by a substream of (cfg.seed,
    "tree", b), so any worker count yields bit-identical ensembles.
    """
    if train.n < 2:
        raise ForestError("need at least 2 training rows")
    t0 = time.perf_counter()
    weights = draw_bootstrap_weights(train.n, B, cfg.seed)
    presorted = presort_features(train.features)
    seeds = [substream_seed(cfg.seed, "tree", b) for b in range(B)]

    def _fit(b):
        return fit_tree(train, weights.w[b], cfg, presorted=presorted,
                        kernel_seed=seeds[b])

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(_fit, range(B)))
    else:
        trees = [_fit(b) for b in range(B)]
    elapsed = time.perf_counter() - t0
    return BaggingEnsemble(
        trees=trees,
        weights=weights,
        class_count=train.class_count,
        config=cfg,
        seed=cfg.seed,
        train_fingerprint=_data.fingerprint(train),
        elapsed_seconds=elapsed,
    )


def predict_tree(tree, x):
    """Route one point root-to-leaf; leaf ties already resolved at fit time."""
    return int(tree.predict(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def predict_ensemble(ens, x):
    """Plurality vote over all trees, ties toward the smallest class index."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    votes = np.zeros(ens.class_count, dtype=np.int64)
    for tree in ens.trees:
        votes[tree.predict(x)[0]] += 1
    return int(np.argmax(votes))


def predict_ensemble_matrix(ens, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    votes = np.zeros((X.shape[0], ens.class_count), dtype=np.int64)
    for tree in ens.trees:
        pred = tree.predict(X)
        votes[np.arange(X.shape[0]), pred] += 1
    return votes.argmax(axis=1)


def save_ensemble(ens, path):
    """Versioned binary dump: node arrays concatenated with offsets, plus the
    bootstrap weights, seed, and config, so valuation can reuse a trained model."""
    offsets = np.zeros(len(ens.trees) + 1, dtype=np.int64)
    for b, t in enumerate(ens.trees):
        offsets[b + 1] = offsets[b] + t.n_nodes
    meta = {
        "version": SERIAL_FORMAT_VERSION,
        "B": ens.B,
        "class_count": ens.class_count,
        "seed": ens.seed,
        "config": ens.config.to_dict(),
        "train_fingerprint": ens.train_fingerprint,
        "elapsed_seconds": ens.elapsed_seconds,
    }
    np.savez_compressed(
        path,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        offsets=offsets,
        feature=np.concatenate([t.feature for t in ens.trees]),
        threshold=np.concatenate([t.threshold for t in ens.trees]),
        left=np.concatenate([t.left for t in ens.trees]),
        right=np.concatenate([t.right for t in ens.trees]),
        leaf_class=np.concatenate([t.leaf_class for t in ens.trees]),
        counts=np.concatenate([t.counts for t in ens.trees]),
        weights=ens.weights.w,
    )


def load_ensemble(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != SERIAL_FORMAT_VERSION:
            raise ForestError(f"unsupported ensemble format version {meta['version']}")
        offsets = z["offsets"]
        trees = []
        for b in range(meta["B"]):
            s, e = offsets[b], offsets[b + 1]
            trees.append(
                DecisionTree(
                    feature=z["feature"][s:e].copy(),
                    threshold=z["threshold"][s:e].copy(),
                    left=z["left"][s:e].copy(),
                    right=z["right"][s:e].copy(),
                    leaf_class=z["leaf_class"][s:e].copy(),
                    counts=z["counts"][s:e].copy(),
                )
            )
        cfg = TreeConfig(**meta["config"])
        return BaggingEnsemble(
            trees=trees,
            weights=BootstrapWeights(z["weights"]),
            class_count=meta["class_count"],
            config=cfg,
            seed=meta["seed"],
            train_fingerprint=meta["train_fingerprint"],
            elapsed_seconds=meta["elapsed_seconds"],
        )
