"""Experiment harness: mislabeled-point detection metrics, point-removal
curves with logistic-regression retraining, 2-PC projections, and timing
benchmarks.

Plotting stays out of scope; everything here emits plain arrays/records that
the CLI serializes to tidy CSV plus a JSON summary.
"""

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import data as _data
from . import forest as _forest
from . import oob as _oob
from ._rng import substream


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

@dataclass
class PRCurve:
    thresholds: np.ndarray  # value at each prefix cut, ascending
    precision: np.ndarray
    recall: np.ndarray
    auprc: float
    undefined_count: int = 0


@dataclass
class TwoMeansResult:
    in_lower: np.ndarray  # bool mask over points, True = lower-mean cluster
    boundary: float
    wcss: float
    degenerate: bool


@dataclass
class DetectionResult:
    predicted: np.ndarray  # indices predicted mislabeled (lower cluster)
    f1: float
    precision: float
    recall: float
    boundary: float
    degenerate: bool


def _ascending_value_order(values):
    """Ascending by value with ties broken by index; NaN (undefined) first."""
    values = np.asarray(values, dtype=np.float64)
    undefined = np.isnan(values)
    if undefined.any():
        warnings.warn(
            f"{int(undefined.sum())} undefined value(s) ranked first", stacklevel=3
        )
    key = np.where(undefined, -np.inf, values)
    return np.argsort(key, kind="stable"), int(undefined.sum())


def precision_recall_curve(values, truth):
    """Sweep prefixes of the ascending-value ranking against the flipped set."""
    if isinstance(values, _oob.ValueVector):
        values = values.psi
    flipped = truth.flipped_indices if isinstance(truth, _data.CorruptionRecord) else np.asarray(sorted(truth))
    if len(flipped) == 0:
        raise EvalError("empty truth set")
    n = len(values)
    order, undefined_count = _ascending_value_order(values)
    is_flipped = np.zeros(n, dtype=bool)
    is_flipped[np.asarray(flipped, dtype=np.int64)] = True
    hits = np.cumsum(is_flipped[order]).astype(np.float64)
    ks = np.arange(1, n + 1, dtype=np.float64)
    precision = hits / ks
    recall = hits / len(flipped)
    # anchor the trapezoid at recall 0 with the first prefix's precision
    auprc = float(
        np.trapezoid(np.concatenate([[precision[0]], precision]),
                     np.concatenate([[0.0], recall]))
    )
    thresholds = np.asarray(values, dtype=np.float64)[order]
    return PRCurve(thresholds, precision, recall, auprc, undefined_count)


def two_means_1d(values):
    """Exact 1-D two-cluster K-means by enumerating every contiguous split.

    All n-1 boundaries between consecutive distinct sorted values are scored
    by total within-cluster sum of squares; the lower-mean cluster is the
    "predicted mislabeled" side. All-equal input is degenerate: no prediction.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise EvalError("need at least 2 values")
    order = np.argsort(values, kind="stable")
    v = values[order]
    if v[0] == v[-1]:
        return TwoMeansResult(np.zeros(n, dtype=bool), math.nan, 0.0, True)
    c1 = np.cumsum(v)
    c2 = np.cumsum(v * v)
    total1, total2 = c1[-1], c2[-1]
    best_t = -1
    best_wcss = math.inf
    for t in range(1, n):
        if v[t] <= v[t - 1]:
            continue
        left = c2[t - 1] - c1[t - 1] ** 2 / t
        right = (total2 - c2[t - 1]) - (total1 - c1[t - 1]) ** 2 / (n - t)
        wcss = left + right
        if wcss < best_wcss:
            best_wcss = wcss
            best_t = t
    in_lower = np.zeros(n, dtype=bool)
    in_lower[order[:best_t]] = True
    boundary = 0.5 * (v[best_t - 1] + v[best_t])
    return TwoMeansResult(in_lower, float(boundary), float(max(best_wcss, 0.0)), False)


def f1_detection(values, truth):
    """Two-cluster split of the values; lower cluster vs the true flipped set."""
    if isinstance(values, _oob.ValueVector):
        values = np.where(values.undefined_mask, -np.inf, values.psi)
    clusters = two_means_1d(values)
    predicted = np.flatnonzero(clusters.in_lower)
    flipped = truth.flipped_set if isinstance(truth, _data.CorruptionRecord) else set(truth)
    tp = len(set(predicted.tolist()) & flipped)
    precision = tp / len(predicted) if len(predicted) else 0.0
    recall = tp / len(flipped) if flipped else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return DetectionResult(
        predicted=predicted,
        f1=f1,
        precision=precision,
        recall=recall,
        boundary=clusters.boundary,
        degenerate=clusters.degenerate,
    )


# ---------------------------------------------------------------------------
# logistic regression (IRLS / Newton)
# ---------------------------------------------------------------------------

@dataclass
class LinearClassifier:
    """Multinomial logit over the classes present at fit time; classes absent
    from the fit are never predicted."""

    weights: np.ndarray  # (c_eff - 1, d); empty for a constant predictor
    intercepts: np.ndarray  # (c_eff - 1,)
    classes: np.ndarray  # global class ids, sorted
    constant: bool = False

    def decision_scores(self, X):
        scores = X @ self.weights.T + self.intercepts
        return np.hstack([scores, np.zeros((len(X), 1))])

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.constant:
            return np.full(len(X), self.classes[0], dtype=np.int64)
        idx = np.argmax(self.decision_scores(X), axis=1)
        return self.classes[idx]


def _logistic_objective(X1, y_eff, theta, c_eff, d):
    scores = X1 @ theta.T
    scores = np.hstack([scores, np.zeros((len(X1), 1))])
    scores -= scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(scores).sum(axis=1))
    nll = float(np.sum(logz - scores[np.arange(len(X1)), y_eff]))
    penalty = 0.5 * float((theta[:, :d] ** 2).sum())
    return nll + penalty


def logistic_fit(train, grad_tol=1e-6, max_iter=100):
    """Multinomial logistic regression with unit L2 penalty on the weights,
    fit by Newton steps (with halving) to gradient norm < 1e-6.

    Single-class input degenerates to a constant predictor.
    """
    classes = np.flatnonzero(np.bincount(train.labels, minlength=train.class_count))
    if len(classes) < 2:
        only = int(classes[0]) if len(classes) else 0
        return LinearClassifier(
            weights=np.zeros((0, train.d)),
            intercepts=np.zeros(0),
            classes=np.array([only], dtype=np.int64),
            constant=True,
        )
    c_eff = len(classes)
    remap = {int(c): i for i, c in enumerate(classes)}
    y_eff = np.array([remap[int(c)] for c in train.labels], dtype=np.int64)
    n, d = train.n, train.d
    X1 = np.hstack([train.features, np.ones((n, 1))])
    p = d + 1
    k = c_eff - 1
    theta = np.zeros((k, p))
    onehot = np.zeros((n, k))
    rows = y_eff < k
    onehot[np.flatnonzero(rows), y_eff[rows]] = 1.0

    obj = _logistic_objective(X1, y_eff, theta, c_eff, d)
    for _ in range(max_iter):
        scores = X1 @ theta.T
        scores = np.hstack([scores, np.zeros((n, 1))])
        scores -= scores.max(axis=1, keepdims=True)
        expv = np.exp(scores)
        probs = expv / expv.sum(axis=1, keepdims=True)
        pk = probs[:, :k]
        grad = (pk - onehot).T @ X1
        grad[:, :d] += theta[:, :d]
        gnorm = float(np.linalg.norm(grad))
        if gnorm < grad_tol:
            break
        hess = np.zeros((k * p, k * p))
        for a in range(k):
            for b in range(a, k):
                wvec = pk[:, a] * ((1.0 if a == b else 0.0) - pk[:, b])
                block = X1.T @ (X1 * wvec[:, None])
                hess[a * p : (a + 1) * p, b * p : (b + 1) * p] = block
                if b != a:
                    hess[b * p : (b + 1) * p, a * p : (a + 1) * p] = block
        for a in range(k):
            for j in range(d):
                hess[a * p + j, a * p + j] += 1.0
        hess[np.diag_indices_from(hess)] += 1e-10
        step = np.linalg.solve(hess, grad.ravel()).reshape(k, p)
        scale = 1.0
        for _ in range(50):
            cand = theta - scale * step
            cand_obj = _logistic_objective(X1, y_eff, cand, c_eff, d)
            if cand_obj < obj:
                theta = cand
                obj = cand_obj
                break
            scale *= 0.5
        else:
            break
    return LinearClassifier(
        weights=theta[:, :d].copy(),
        intercepts=theta[:, d].copy(),
        classes=classes.astype(np.int64),
    )


def accuracy(clf, ds):
    return float(np.mean(clf.predict(ds.features) == ds.labels))


# ---------------------------------------------------------------------------
# point removal
# ---------------------------------------------------------------------------

@dataclass
class RemovalCurve:
    fractions: np.ndarray
    accuracies: np.ndarray
    order: np.ndarray  # removal order, lowest value first
    method: str
    degenerate_flags: np.ndarray  # True where only one class remained


def removal_fractions(stride):
    if not 0.0 < stride <= 0.5:
        raise EvalError("stride must be in (0, 0.5]")
    steps = int(math.floor(0.95 / stride + 1e-9))
    return np.array([i * stride for i in range(steps + 1)])


def point_removal_curve(values, train, test, stride=0.05, method="values"):
    """Remove the lowest-valued fraction, refit logistic regression on the
    remainder, and record test accuracy at each grid fraction.

    ``values`` may also be a seeded permutation to produce the random-removal
    baseline through the identical machinery. stride=1/n reproduces the
    one-by-one protocol.
    """
    if test.n == 0:
        raise EvalError("empty test set")
    if isinstance(values, _oob.ValueVector):
        values = np.where(values.undefined_mask, np.nan, values.psi)
    order, _ = _ascending_value_order(values)
    n = train.n
    fractions = removal_fractions(stride)
    accs = np.empty(len(fractions))
    flags = np.zeros(len(fractions), dtype=bool)
    for i, f in enumerate(fractions):
        drop = int(round(f * n))
        keep = order[drop:]
        sub = train.subset(np.sort(keep))
        clf = logistic_fit(sub)
        flags[i] = clf.constant
        accs[i] = accuracy(clf, test)
    return RemovalCurve(fractions, accs, order, method, flags)


def random_removal_values(n, seed):
    """A seeded random ranking, usable anywhere a value vector is expected."""
    return substream(seed, "removal-random").permutation(n).astype(np.float64)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PCA2Result:
    scores: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, d) orthonormal rows
    explained: np.ndarray  # top-2 eigenvalues of the sample covariance
    rank_deficient: bool


def pca2_projection(features):
    """First two principal-component scores with a fixed sign convention
    (largest-magnitude loading positive)."""
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    if d < 2 or n < 2:
        raise EvalError("need n >= 2 and d >= 2")
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    comps = evecs[:, ::-1][:, :2].T.copy()
    explained = evals[::-1][:2].copy()
    rank_deficient = bool(explained[1] <= max(explained[0], 1.0) * 1e-12)
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    scores = Xc @ comps.T
    if rank_deficient:
        scores[:, 1] = 0.0
    return PCA2Result(scores, comps, explained, rank_deficient)


# ---------------------------------------------------------------------------
# timing benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchRecord:
    method: str
    n: int
    d: int
    B: int
    seconds: list
    mean_seconds: float
    half_width: float  # 95% normal-approximation CI half-width
    censored: bool = False


def bench_method_dataoob(B, tree_config=None):
    def run(train, val, seed):
        cfg = tree_config or _forest.TreeConfig(seed=seed)
        _oob.dataoob_streaming(train, B, cfg, workers=1)

    return "dataoob", run


def bench_method_knn_shapley(k_fraction=0.1):
    from .baselines import knn_shapley

    def run(train, val, seed):
        knn_shapley(train, val, k=max(1, int(round(k_fraction * train.n))))

    return "knn-shapley", run


def bench_timing(methods, n_grid, d, B, repetitions=5, seed=0, timeout=None):
    """Wall-clock per (method, n) on synthetic data; Data-OOB timings include
    ensemble training. Runs are strictly serial for honest clocks.

    Returns (records, slopes) where slopes maps method -> log-log slope of
    mean time against n.
    """
    eta = _data.draw_coefficients(d, seed)
    records = []
    for name, run in methods:
        for n in n_grid:
            seconds = []
            censored = False
            for rep in range(repetitions):
                data_seed = _rng_int(seed, "bench-data", n, rep)
                cfg = _data.SyntheticConfig(
                    n=n + max(1, int(round(0.1 * n))), d=d, seed=data_seed, eta=eta
                )
                ds = _data.generate_synthetic(cfg)
                ds, _ = _data.normalize(ds)
                train = ds.subset(np.arange(n))
                val = ds.subset(np.arange(n, ds.n))
                t0 = time.perf_counter()
                run(train, val, data_seed)
                elapsed = time.perf_counter() - t0
                seconds.append(elapsed)
                if timeout is not None and elapsed > timeout:
                    censored = True
                    break
            arr = np.asarray(seconds)
            half = (
                0.0
                if len(arr) < 2
                else 1.96 * float(arr.std(ddof=1)) / math.sqrt(len(arr))
            )
            records.append(
                BenchRecord(
                    method=name,
                    n=n,
                    d=d,
                    B=B,
                    seconds=seconds,
                    mean_seconds=float(arr.mean()),
                    half_width=half,
                    censored=censored,
                )
            )
    slopes = {}
    for name, _ in methods:
        pts = [(r.n, r.mean_seconds) for r in records if r.method == name and not r.censored]
        if len(pts) >= 2:
            ln = np.log([p[0] for p in pts])
            lt = np.log([p[1] for p in pts])
            slopes[name] = float(np.polyfit(ln, lt, 1)[0])
    return records, slopes


def _rng_int(seed, tag, *more):
    return int(substream(seed, tag, *more).integers(0, 2**31 - 1))
