"""Out-of-bag data values for a bagging ensemble.

A point's value is its average score under exactly those weak learners whose
bootstrap sample missed it. The module also exposes the per-bootstrap
normalized scores q_b with their variance V_B, the infinitesimal-jackknife
influence values built from them, and a checker for the order-consistency
property linking the two rankings.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as _data
from . import forest as _forest
from ._rng import substream, substream_seed

CORRECTNESS = "correctness"
NEG_SQUARED_ERROR = "negative-squared-error"
_KINDS = (CORRECTNESS, NEG_SQUARED_ERROR)


class FingerprintMismatch(ValueError):
    """Ensemble was trained on a different dataset than the one supplied."""


class UndefinedValueError(ValueError):
    """An operation touched a point that was never out-of-bag."""


@dataclass
class ScoreFunction:
    """Pointwise goodness of a prediction: 0/1 correctness for classification
    or the negative squared error for numeric targets."""

    kind: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")

    def __call__(self, y_true, y_pred):
        y_true = np.asarray(y_true, dtype=np.float64)
        y_pred = np.asarray(y_pred, dtype=np.float64)
        if self.kind == CORRECTNESS:
            return (y_true == y_pred).astype(np.float64)
        return -((y_true - y_pred) ** 2)


def _pack(mask):
    return np.packbits(mask)


def _unpack(bits, n):
    return np.unpackbits(bits, count=n).astype(bool)


@dataclass
class ScoreMatrix:
    """Per-(learner, point) scores with the out-of-bag mask.

    Correctness scores are stored as packed bits (1 bit per cell) so large
    (B, n) instances stay cheap; the dense views are materialized on demand.
    """

    kind: str
    n: int
    B: int
    oob_bits: np.ndarray  # (B, ceil(n/8)) uint8
    score_bits: np.ndarray | None = None  # correctness kind
    score_values: np.ndarray | None = None  # (B, n) float64, squared-error kind
    fingerprint: str = ""

    def mask_row(self, b):
        return _unpack(self.oob_bits[b], self.n)

    def score_row(self, b):
        if self.kind == CORRECTNESS:
            return _unpack(self.score_bits[b], self.n).astype(np.float64)
        return self.score_values[b]

    @property
    def oob_mask(self):
        return np.vstack([self.mask_row(b) for b in range(self.B)])

    @property
    def s(self):
        return np.vstack([self.score_row(b) for b in range(self.B)])


@dataclass
class ValueVector:
    """Per-point values; entries with no out-of-bag appearance are NaN and
    flagged in undefined_mask rather than silently zeroed."""

    psi: np.ndarray
    oob_counts: np.ndarray | None = None
    undefined_mask: np.ndarray | None = None

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        if self.oob_counts is not None:
            self.oob_counts = np.asarray(self.oob_counts, dtype=np.int64)
        if self.undefined_mask is None:
            self.undefined_mask = np.zeros(len(self.psi), dtype=bool)
        else:
            self.undefined_mask = np.asarray(self.undefined_mask, dtype=bool)

    @property
    def n(self):
        return len(self.psi)


@dataclass
class OOBScores:
    q: np.ndarray  # q_b = (1/n) sum_j 1(w_bj = 0) T(y_j, f_b(x_j))
    q_bar: float
    v_b: float  # (1/B) sum_b (q_b - q_bar)^2


@dataclass
class InfluenceVector:
    psi_ij: np.ndarray
    term1: np.ndarray  # (2 + 1/(n-1)) (psi_i - h) / n
    term2: np.ndarray  # (1 - 1/n)^{-n} (1/B) sum_b (w_bi - 1) q_b


@dataclass
class OrderConsistencyReport:
    checked_pairs: int
    hypothesis_pairs: int
    violations: int
    threshold: float
    sampled: bool
    violating_examples: list


def score_matrix(ens, train, score=ScoreFunction(CORRECTNESS), workers=1):
    """Evaluate every tree on every training point and derive the OOB mask.

    The full matrix is computed (in-bag cells included, for diagnostics); the
    mask is true exactly where the bootstrap multiplicity is zero.
    """
    fp = _data.fingerprint(train)
    if ens.train_fingerprint != fp:
        raise FingerprintMismatch(
            "ensemble was fit on a different training set than supplied"
        )
    if isinstance(score, str):
        score = ScoreFunction(score)
    n, B = train.n, ens.B
    X = train.features
    y = train.labels
    oob_bits = np.empty((B, (n + 7) // 8), dtype=np.uint8)
    score_bits = (
        np.empty_like(oob_bits) if score.kind == CORRECTNESS else None
    )
    score_values = (
        np.empty((B, n), dtype=np.float64) if score.kind != CORRECTNESS else None
    )

    def _one(b):
        pred = ens.trees[b].predict(X)
        oob_bits[b] = _pack(ens.weights.w[b] == 0)
        if score.kind == CORRECTNESS:
            score_bits[b] = _pack(y == pred)
        else:
            score_values[b] = score(y, pred)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_one, range(B)))
    else:
        for b in range(B):
            _one(b)
    return ScoreMatrix(
        kind=score.kind,
        n=n,
        B=B,
        oob_bits=oob_bits,
        score_bits=score_bits,
        score_values=score_values,
        fingerprint=fp,
    )


def score_matrix_from_dense(oob_mask, scores, kind=CORRECTNESS, fingerprint=""):
    """Build a ScoreMatrix from dense (B, n) mask/score arrays, e.g. for
    synthetic studies of the estimator itself."""
    oob_mask = np.asarray(oob_mask, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if oob_mask.shape != scores.shape or oob_mask.ndim != 2:
        raise ValueError("mask and scores must share a (B, n) shape")
    B, n = oob_mask.shape
    oob_bits = np.packbits(oob_mask, axis=1)
    if kind == CORRECTNESS:
        if not np.isin(scores, (0.0, 1.0)).all():
            raise ValueError("correctness scores must be 0/1")
        return ScoreMatrix(
            kind=kind, n=n, B=B, oob_bits=oob_bits,
            score_bits=np.packbits(scores.astype(bool), axis=1),
            fingerprint=fingerprint,
        )
    return ScoreMatrix(
        kind=kind, n=n, B=B, oob_bits=oob_bits,
        score_values=np.ascontiguousarray(scores),
        fingerprint=fingerprint,
    )


def data_oob_values(sm):
    """psi_i = sum_b 1(w_bi = 0) s_bi / sum_b 1(w_bi = 0).

    Accumulation runs over learners in ascending b (the documented summation
    order); points never out-of-bag come back NaN with undefined_mask set.
    """
    n = sm.n
    den = np.zeros(n, dtype=np.int64)
    if sm.kind == CORRECTNESS:
        num = np.zeros(n, dtype=np.int64)
        for b in range(sm.B):
            mask = np.unpackbits(sm.oob_bits[b], count=n)
            hits = np.unpackbits(np.bitwise_and(sm.oob_bits[b], sm.score_bits[b]),
                                 count=n)
            num += hits
            den += mask
        num = num.astype(np.float64)
    else:
        num = np.zeros(n, dtype=np.float64)
        for b in range(sm.B):
            mask = sm.mask_row(b)
            num += np.where(mask, sm.score_values[b], 0.0)
            den += mask
    undefined = den == 0
    psi = np.divide(num, den, out=np.full(n, np.nan), where=~undefined)
    defined = psi[~undefined]
    if sm.kind == CORRECTNESS:
        assert defined.size == 0 or (0.0 <= defined.min() and defined.max() <= 1.0)
    else:
        assert defined.size == 0 or defined.max() <= 0.0
    return ValueVector(psi=psi, oob_counts=den, undefined_mask=undefined)


def oob_estimate(v):
    """Mean of the per-point values, which is the classical OOB estimate."""
    if v.undefined_mask.any():
        k = int(v.undefined_mask.sum())
        raise UndefinedValueError(f"{k} point(s) were never out-of-bag")
    return float(np.mean(v.psi))


def oob_scores(sm):
    """Per-bootstrap normalized scores q_b (1/n normalization, not 1/|OOB_b|),
    their mean, and the biased variance V_B."""
    n = sm.n
    q = np.empty(sm.B, dtype=np.float64)
    for b in range(sm.B):
        if sm.kind == CORRECTNESS:
            hits = np.bitwise_and(sm.oob_bits[b], sm.score_bits[b])
            q[b] = float(int(np.unpackbits(hits, count=n).sum())) / n
        else:
            row = sm.score_values[b]
            q[b] = float(np.sum(row[sm.mask_row(b)])) / n
    q_bar = float(np.mean(q))
    v_b = float(np.mean((q - q_bar) ** 2))
    return OOBScores(q=q, q_bar=q_bar, v_b=v_b)


def infinitesimal_jackknife(ens, sm, v, scores):
    """Influence of an epsilon-tilt of the empirical distribution toward each
    point, by the closed form

        (2 + 1/(n-1)) (psi_i - h) / n  +  (1 - 1/n)^{-n} (1/B) sum_b (w_bi - 1) q_b

    with h the mean of the values. The second term keeps the uncentered q_b
    exactly as written; see order_consistency_report for the pairwise use.
    """
    n = sm.n
    if n < 2:
        raise ValueError("influence values need n >= 2")
    h = oob_estimate(v)  # raises if any value is undefined
    w = ens.weights.w
    q = scores.q
    acc = np.zeros(n, dtype=np.float64)
    for b in range(sm.B):  # ascending b, worker-count independent
        acc += w[b] * q[b]
    coef = (2.0 + 1.0 / (n - 1)) / n
    growth = (1.0 - 1.0 / n) ** (-n)
    term1 = coef * (v.psi - h)
    term2 = growth * (acc - q.sum()) / sm.B
    return InfluenceVector(psi_ij=term1 + term2, term1=term1, term2=term2)


def order_consistency_report(v, inf, scores, max_pairs=1_000_000, seed=0):
    """Check the ordering implication: for every ordered pair with
    psi_IJ(i) - psi_IJ(j) > 4 sqrt(2) V_B^(1/2), verify psi_i > psi_j.

    All ordered pairs are enumerated when there are at most ``max_pairs``;
    otherwise a seeded sample of that many pairs is drawn. Pairs touching an
    undefined value are skipped.
    """
    defined = ~v.undefined_mask
    idx = np.flatnonzero(defined)
    m = len(idx)
    thr = 4.0 * math.sqrt(2.0) * math.sqrt(scores.v_b)
    psi = v.psi
    pij = inf.psi_ij
    examples = []
    if m * (m - 1) <= max_pairs:
        gap = pij[idx][:, None] - pij[idx][None, :]
        hyp = gap > thr
        np.fill_diagonal(hyp, False)
        holds = (psi[idx][:, None] - psi[idx][None, :]) > 0.0
        viol = hyp & ~holds
        checked = m * (m - 1)
        n_hyp = int(hyp.sum())
        n_viol = int(viol.sum())
        if n_viol:
            ii, jj = np.nonzero(viol)
            for a, bzz in zip(ii[:10], jj[:10]):
                examples.append((int(idx[a]), int(idx[bzz])))
        sampled = False
    else:
        rng = substream(seed, "order-pairs")
        n_hyp = 0
        n_viol = 0
        checked = 0
        chunk = 65536
        remaining = max_pairs
        while remaining > 0:
            k = min(chunk, remaining)
            a = idx[rng.integers(0, m, size=k)]
            b = idx[rng.integers(0, m, size=k)]
            keep = a != b
            a, b = a[keep], b[keep]
            checked += len(a)
            hyp = (pij[a] - pij[b]) > thr
            viol = hyp & ~(psi[a] > psi[b])
            n_hyp += int(hyp.sum())
            n_viol += int(viol.sum())
            if viol.any() and len(examples) < 10:
                for ia, ib in zip(a[viol][:10], b[viol][:10]):
                    examples.append((int(ia), int(ib)))
            remaining -= k
        sampled = True
    return OrderConsistencyReport(
        checked_pairs=checked,
        hypothesis_pairs=n_hyp,
        violations=n_viol,
        threshold=thr,
        sampled=sampled,
        violating_examples=examples,
    )


def dataoob_streaming(train, B, cfg, score=ScoreFunction(CORRECTNESS), workers=1,
                      batch_size=32):
    """End-to-end Data-OOB without retaining trees: fit each tree, score its
    out-of-bag points, accumulate, and discard.

    Produces exactly the values of the fit_ensemble -> score_matrix ->
    data_oob_values pipeline (same bootstrap substreams, same per-tree seeds,
    integer accumulation for correctness scores) while holding only O(n)
    state, so it scales to large n. Returns (ValueVector, OOBScores, info).
    """
    if isinstance(score, str):
        score = ScoreFunction(score)
    t0 = time.perf_counter()
    n = train.n
    presorted = _forest.presort_features(train.features)
    X, y = train.features, train.labels
    den = np.zeros(n, dtype=np.int64)
    if score.kind == CORRECTNESS:
        num = np.zeros(n, dtype=np.int64)
    else:
        num = np.zeros(n, dtype=np.float64)
    q = np.empty(B, dtype=np.float64)

    def _one(b):
        w_b = np.bincount(
            substream(cfg.seed, "bootstrap", b).integers(0, n, size=n), minlength=n
        ).astype(np.int32)
        tree = _forest.fit_tree(
            train, w_b, cfg, presorted=presorted,
            kernel_seed=substream_seed(cfg.seed, "tree", b),
        )
        pred = tree.predict(X)
        return w_b == 0, score(y, pred)

    batched = range(0, B, batch_size)
    if workers and workers > 1:
        pool = ThreadPoolExecutor(max_workers=workers)
    else:
        pool = None
    try:
        for start in batched:
            bs = list(range(start, min(start + batch_size, B)))
            if pool is not None:
                results = list(pool.map(_one, bs))
            else:
                results = [_one(b) for b in bs]
            for b, (mask, s_row) in zip(bs, results):  # ascending b
                den += mask
                if score.kind == CORRECTNESS:
                    num += (mask & (s_row > 0.5)).astype(np.int64)
                    q[b] = float(int(s_row[mask].sum())) / n
                else:
                    num += np.where(mask, s_row, 0.0)
                    q[b] = float(np.sum(s_row[mask])) / n
    finally:
        if pool is not None:
            pool.shutdown()

    undefined = den == 0
    psi = np.divide(num.astype(np.float64), den,
                    out=np.full(n, np.nan), where=~undefined)
    q_bar = float(np.mean(q))
    v_b = float(np.mean((q - q_bar) ** 2))
    info = {
        "elapsed_seconds": time.perf_counter() - t0,
        "trees": B,
        "fingerprint": _data.fingerprint(train),
    }
    return (
        ValueVector(psi=psi, oob_counts=den, undefined_mask=undefined),
        OOBScores(q=q, q_bar=q_bar, v_b=v_b),
        info,
    )


def write_values_csv(path, v, influence=None, fingerprint="", method="dataoob",
                     manifest_hash=""):
    """Tidy CSV: index, psi, oob_count, psi_ij, undefined; provenance in a
    leading comment line."""
    lines = [
        f"# method={method} fingerprint={fingerprint} manifest_hash={manifest_hash}",
        "index,psi,oob_count,psi_ij,undefined",
    ]
    for i in range(v.n):
        psi = repr(float(v.psi[i]))
        cnt = "" if v.oob_counts is None else str(int(v.oob_counts[i]))
        pij = "" if influence is None else repr(float(influence.psi_ij[i]))
        und = "1" if v.undefined_mask[i] else "0"
        lines.append(f"{i},{psi},{cnt},{pij},{und}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
