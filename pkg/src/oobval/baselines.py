"""Comparison valuators: closed-form KNN Shapley, Monte-Carlo semivalues with
Gelman-Rubin stopping, and the average-marginal-effect estimator backed by a
cross-validated LASSO.

All of them share one utility function: subset of training rows -> validation
accuracy of a decision tree fit on the subset (the empty set scores as the
best constant predictor).
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from ._rng import substream, substream_seed
from .forest import TreeConfig, fit_tree
from .oob import ValueVector


class BaselineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# utility function
# ---------------------------------------------------------------------------

class TreeUtility:
    """U(S) = validation accuracy of a decision tree trained on rows S.

    Deterministic per (S, seed): the tree kernel seed is fixed, so identical
    subsets always produce identical trees. Every call counts as one utility
    evaluation; nothing is cached or reused.
    """

    def __init__(self, train, val, config=None, seed=0):
        if val.n == 0:
            raise BaselineError("utility needs a nonempty validation set")
        self.train = train
        self.val = val
        self.config = config if config is not None else TreeConfig(seed=seed)
        self.eval_count = 0
        counts = np.bincount(val.labels, minlength=val.class_count)
        self.empty_set_value = float(counts.max()) / val.n
        self._kernel_seed = substream_seed(self.config.seed, "utility-tree")

    def __call__(self, subset):
        self.eval_count += 1
        rows = np.asarray(sorted(int(i) for i in subset), dtype=np.int64)
        if len(rows) == 0:
            return self.empty_set_value
        sub = self.train.subset(rows)
        tree = fit_tree(sub, np.ones(len(rows)), self.config,
                        kernel_seed=self._kernel_seed)
        pred = tree.predict(self.val.features)
        return float(np.mean(pred == self.val.labels))


def utility_eval(utility, subset):
    """Evaluate U(S); the empty set scores as the best constant predictor."""
    return utility(subset)


# ---------------------------------------------------------------------------
# KNN Shapley
# ---------------------------------------------------------------------------

def knn_shapley(train, val, k=None, chunk=64):
    """Closed-form Shapley values of the k-nearest-neighbor utility.

    Per validation point, train points are sorted by ascending Euclidean
    distance (ties by ascending index) as alpha_1..alpha_n, then

        s[alpha_n] = 1(y_{alpha_n} = y~) / n
        s[alpha_m] = s[alpha_{m+1}]
                     + (1(y_{alpha_m} = y~) - 1(y_{alpha_{m+1}} = y~))
                       * min(k, m) / (k m)          for m = n-1 .. 1

    and the final value averages over validation points. ``k`` defaults to
    round(0.1 n) and is clamped to n with a warning when larger.
    """
    if val.n == 0:
        raise BaselineError("knn_shapley needs a nonempty validation set")
    n = train.n
    if k is None:
        k = max(1, int(round(0.1 * n)))
    k = int(k)
    if k < 1:
        raise BaselineError("k must be >= 1")
    if k > n:
        warnings.warn(f"k={k} exceeds n={n}; clamping to n", stacklevel=2)
        k = n

    coef = np.minimum(k, np.arange(1, n)) / (k * np.arange(1, n))
    values = np.zeros(n, dtype=np.float64)
    Xt = train.features
    sq_t = (Xt * Xt).sum(axis=1)
    for start in range(0, val.n, chunk):
        Xv = val.features[start : start + chunk]
        yv = val.labels[start : start + chunk]
        d2 = sq_t[None, :] - 2.0 * (Xv @ Xt.T)  # + ||xv||^2, constant per row
        idx = np.argsort(d2, axis=1, kind="stable")
        match = (train.labels[idx] == yv[:, None]).astype(np.float64)
        s_sorted = np.empty_like(match)
        s_sorted[:, n - 1] = match[:, n - 1] / n
        if n > 1:
            diffs = (match[:, :-1] - match[:, 1:]) * coef[None, :]
            suffix = np.cumsum(diffs[:, ::-1], axis=1)[:, ::-1]
            s_sorted[:, :-1] = s_sorted[:, n - 1 : n] + suffix
        for r in range(len(Xv)):
            values[idx[r]] += s_sorted[r]
    values /= val.n
    return ValueVector(psi=values)


# ---------------------------------------------------------------------------
# Monte-Carlo marginal contributions
# ---------------------------------------------------------------------------

def gelman_rubin(chains):
    """Classical R-hat over equal-length sample chains.

    W is the mean within-chain sample variance and the between-chain term is
    the variance of the chain means; all-identical constant chains define
    R-hat = 1, and disjoint constant chains give +inf.
    """
    chains = np.asarray(chains, dtype=np.float64)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise BaselineError("gelman_rubin needs at least 2 chains")
    n_chains, m = chains.shape
    if m < 2:
        raise BaselineError("gelman_rubin needs at least 2 samples per chain")
    w = float(np.mean(np.var(chains, axis=1, ddof=1)))
    var_means = float(np.var(chains.mean(axis=1), ddof=1))
    if w == 0.0:
        return 1.0 if var_means == 0.0 else math.inf
    return math.sqrt(((m - 1) / m * w + var_means) / w)


def gelman_rubin_per_point(chains_by_point):
    """R-hat for every point's chain set plus the max across points."""
    rhats = np.array([gelman_rubin(c) for c in chains_by_point])
    return rhats, float(np.max(rhats))


@dataclass
class MarginalChains:
    """Per-chain marginal-contribution samples for one target point."""

    point: int
    deltas: np.ndarray  # (chains, m)
    cardinalities: np.ndarray  # (chains, m) the drawn j
    r_hat: float
    converged: bool
    utility_evals: int

    def samples_by_cardinality(self):
        out = {}
        for j, delta in zip(self.cardinalities.ravel(), self.deltas.ravel()):
            out.setdefault(int(j), []).append(float(delta))
        return {j: np.asarray(v) for j, v in out.items()}


def mc_marginal_chains(utility, z, n, chains=10, max_evals_per_chain=100,
                       check_every=10, threshold=1.05, seed=0):
    """Sample marginal contributions of point z over independent chains.

    Each chain repeatedly draws a cardinality j uniform on [1, n], then a
    uniform subset S of the other points with |S| = j - 1, and records
    U(S + {z}) - U(S). Chains advance in lockstep; every ``check_every``
    draws the Gelman-Rubin statistic is tested against ``threshold``. If the
    per-chain budget (two evaluations per draw) runs out first, the estimate
    is returned flagged as unconverged.
    """
    if chains < 2:
        raise BaselineError("need at least 2 chains")
    others = np.array([i for i in range(n) if i != z], dtype=np.int64)
    max_deltas = max(2, max_evals_per_chain // 2)
    rngs = [substream(seed, "chain", z, c) for c in range(chains)]
    deltas = np.zeros((chains, max_deltas))
    cards = np.zeros((chains, max_deltas), dtype=np.int64)
    evals = 0
    converged = False
    r_hat = math.inf
    m = 0
    while m < max_deltas:
        for c in range(chains):
            j = int(rngs[c].integers(1, n + 1))
            subset = rngs[c].choice(others, size=j - 1, replace=False)
            with_z = np.append(subset, z)
            deltas[c, m] = utility(with_z) - utility(subset)
            cards[c, m] = j
            evals += 2
        m += 1
        if m >= 2 and m % check_every == 0:
            r_hat = gelman_rubin(deltas[:, :m])
            if r_hat < threshold:
                converged = True
                break
    if not converged and m >= 2:
        r_hat = gelman_rubin(deltas[:, :m])
        converged = r_hat < threshold
    return MarginalChains(
        point=z,
        deltas=deltas[:, :m].copy(),
        cardinalities=cards[:, :m].copy(),
        r_hat=r_hat,
        converged=converged,
        utility_evals=evals,
    )


@dataclass
class SemivalueWeights:
    """Simplex weights over cardinalities j in [1, n]."""

    beta: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if abs(self.beta.sum() - 1.0) > 1e-12 or (self.beta < 0).any():
            raise BaselineError("weights must lie on the simplex (tol 1e-12)")

    @classmethod
    def uniform(cls, n):
        """Data Shapley: beta_j = 1/n."""
        return cls(np.full(n, 1.0 / n), name="uniform")

    @classmethod
    def beta_induced(cls, n, alpha=16.0, beta=1.0):
        """Weights proportional to Beta(j - 1 + beta, n - j + alpha) / Beta(alpha, beta)."""
        j = np.arange(1, n + 1, dtype=np.float64)
        log_b = (
            _lbeta(j - 1.0 + beta, n - j + alpha) - _lbeta(alpha, beta)
        )
        w = np.exp(log_b - log_b.max())
        return cls(w / w.sum(), name=f"beta({alpha:g},{beta:g})")


def _lbeta(a, b):
    return _lgamma_vec(a) + _lgamma_vec(b) - _lgamma_vec(a + b)


def _lgamma_vec(x):
    return np.vectorize(math.lgamma)(np.asarray(x, dtype=np.float64))


def semivalue_aggregate(per_point_samples, weights):
    """psi_z = sum_j beta_j * mean(deltas at cardinality j).

    ``per_point_samples`` maps each point to {cardinality: delta samples}.
    Cardinalities with no samples fall back to the point's global sample mean
    and are counted in the returned flags.
    """
    n = len(weights.beta)
    psi = np.zeros(len(per_point_samples))
    missing = np.zeros(len(per_point_samples), dtype=np.int64)
    for z, samples in enumerate(per_point_samples):
        if not samples:
            raise BaselineError(f"point {z} has no marginal samples")
        all_deltas = np.concatenate([np.asarray(v, dtype=np.float64)
                                     for v in samples.values()])
        global_mean = float(all_deltas.mean())
        total = 0.0
        for j in range(1, n + 1):
            if j in samples and len(samples[j]):
                d_j = float(np.mean(samples[j]))
            else:
                d_j = global_mean
                missing[z] += 1
            total += weights.beta[j - 1] * d_j
        psi[z] = total
    return ValueVector(psi=psi), missing


def monte_carlo_semivalues(utility, n, weights=None, chains=10,
                           max_evals_per_chain=100, check_every=10,
                           threshold=1.05, seed=0):
    """Run per-point chains until each point's R-hat clears the threshold
    (or its budget runs out), then aggregate with the given weights."""
    if weights is None:
        weights = SemivalueWeights.uniform(n)
    per_point = []
    stats = []
    for z in range(n):
        mc = mc_marginal_chains(
            utility, z, n, chains=chains,
            max_evals_per_chain=max_evals_per_chain,
            check_every=check_every, threshold=threshold,
            seed=seed,
        )
        stats.append(mc)
        per_point.append(mc.samples_by_cardinality())
    values, missing = semivalue_aggregate(per_point, weights)
    info = {
        "max_r_hat": float(max(s.r_hat for s in stats)),
        "all_converged": all(s.converged for s in stats),
        "utility_evals": int(sum(s.utility_evals for s in stats)),
        "missing_cardinalities": missing,
    }
    return values, info


# ---------------------------------------------------------------------------
# AME via LASSO
# ---------------------------------------------------------------------------

@dataclass
class SubsetDesign:
    """Bernoulli(p) inclusion design: ``subsets_per_p`` draws per probability."""

    probabilities: tuple = (0.2, 0.4, 0.6, 0.8)
    subsets_per_p: int = 200

    def __post_init__(self):
        for p in self.probabilities:
            if not 0.0 < p < 1.0:
                raise BaselineError("inclusion probabilities must be in (0, 1)")

    @property
    def rows(self):
        return len(self.probabilities) * self.subsets_per_p


@dataclass
class AmeDesignResult:
    design: np.ndarray  # (m, n) standardized inclusion rows
    responses: np.ndarray  # (m,) centered utilities
    response_mean: float
    raw_responses: np.ndarray
    utility_evals: int


def ame_design(utility, n, design=None, seed=0):
    """Draw the subsets, evaluate their utilities, build the regression design.

    Row encoding g maps inclusion bits to (1_S - p) / sqrt(p (1 - p)) so each
    coordinate has mean 0 and variance 1 under its own p; responses are
    centered by their grand mean. Empty draws are evaluated (best-constant
    rule), never resampled.
    """
    if design is None:
        design = SubsetDesign()
    rng = substream(seed, "ame-design")
    m = design.rows
    X = np.empty((m, n), dtype=np.float64)
    y = np.empty(m, dtype=np.float64)
    r = 0
    for p in design.probabilities:
        scale = 1.0 / math.sqrt(p * (1.0 - p))
        for _ in range(design.subsets_per_p):
            include = rng.random(n) < p
            y[r] = utility(np.flatnonzero(include))
            X[r] = (include.astype(np.float64) - p) * scale
            r += 1
    mean = float(y.mean())
    return AmeDesignResult(
        design=X,
        responses=y - mean,
        response_mean=mean,
        raw_responses=y,
        utility_evals=m,
    )


@njit(cache=True, nogil=True)
def _lasso_cd(X, y, lam, gamma, tol, max_sweeps):
    """Cyclic coordinate descent on (1/m)||y - X g||^2 + lam * ||g||_1."""
    m, n = X.shape
    col_a = np.empty(n)
    for k in range(n):
        s = 0.0
        for i in range(m):
            s += X[i, k] * X[i, k]
        col_a[k] = 2.0 * s / m
    resid = y.copy()
    for k in range(n):
        if gamma[k] != 0.0:
            for i in range(m):
                resid[i] -= X[i, k] * gamma[k]
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = 0.0
        for k in range(n):
            if col_a[k] == 0.0:
                continue
            old = gamma[k]
            rho = 0.0
            for i in range(m):
                rho += X[i, k] * (resid[i] + X[i, k] * old)
            rho *= 2.0 / m
            if rho > lam:
                new = (rho - lam) / col_a[k]
            elif rho < -lam:
                new = (rho + lam) / col_a[k]
            else:
                new = 0.0
            if new != old:
                diff = new - old
                for i in range(m):
                    resid[i] -= X[i, k] * diff
                gamma[k] = new
                change = abs(diff)
                if change > max_change:
                    max_change = change
        if max_change < tol:
            break
    return sweeps


def lasso_fit(X, y, lam, tol=1e-7, max_sweeps=10_000, init=None):
    """Coordinate-descent LASSO coefficients at one regularization level."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise BaselineError("non-finite design or responses")
    if lam < 0:
        raise BaselineError("lambda must be >= 0")
    gamma = np.zeros(X.shape[1]) if init is None else init.astype(np.float64).copy()
    _lasso_cd(X, y, float(lam), gamma, float(tol), int(max_sweeps))
    return gamma


def lasso_objective(X, y, lam, gamma):
    r = y - X @ gamma
    return float((r @ r) / len(y) + lam * np.abs(gamma).sum())


@dataclass
class LassoPath:
    lambdas: np.ndarray
    coefs: np.ndarray  # (n_lambdas, n)
    cv_errors: np.ndarray
    selected_lambda: float
    selected_index: int


def lasso_cv_path(X, y, seed=0, n_lambdas=100, eps=1e-3, folds=5, tol=1e-7):
    """Warm-started path from lambda_max down, scored by 5-fold CV MSE.

    Folds are contiguous blocks of a seeded shuffle of the rows; the winning
    lambda (ties to the largest) is refit on all rows.
    """
    m, n = X.shape
    lam_max = float(np.max(np.abs(2.0 / m * (X.T @ y))))
    if lam_max == 0.0:
        lam_max = 1.0  # constant responses: any positive grid, all-zero fits
    lambdas = np.geomspace(lam_max, eps * lam_max, n_lambdas)
    perm = substream(seed, "ame-cv").permutation(m)
    bounds = np.linspace(0, m, folds + 1).astype(int)
    cv = np.zeros(n_lambdas)
    for f in range(folds):
        hold = perm[bounds[f] : bounds[f + 1]]
        keep = np.setdiff1d(perm, hold)
        Xf, yf = np.ascontiguousarray(X[keep]), y[keep]
        gamma = np.zeros(n)
        for li, lam in enumerate(lambdas):
            _lasso_cd(Xf, yf, float(lam), gamma, tol, 10_000)
            resid = y[hold] - X[hold] @ gamma
            cv[li] += float(resid @ resid) / len(hold)
    cv /= folds
    best = int(np.argmin(cv))
    coefs = np.zeros((n_lambdas, n))
    gamma = np.zeros(n)
    for li, lam in enumerate(lambdas):
        _lasso_cd(X, y, float(lam), gamma, tol, 10_000)
        coefs[li] = gamma
    return LassoPath(
        lambdas=lambdas,
        coefs=coefs,
        cv_errors=cv,
        selected_lambda=float(lambdas[best]),
        selected_index=best,
    )


def ame_values(utility, n, design=None, seed=0):
    """Average marginal effects: LASSO coefficients of utilities regressed on
    the standardized inclusion design, at the CV-chosen lambda."""
    built = ame_design(utility, n, design=design, seed=seed)
    path = lasso_cv_path(built.design, built.responses, seed=seed)
    gamma = path.coefs[path.selected_index]
    info = {
        "selected_lambda": path.selected_lambda,
        "sparsity": float(np.mean(gamma == 0.0)),
        "utility_evals": built.utility_evals,
        "response_mean": built.response_mean,
    }
    return ValueVector(psi=gamma.copy()), path, info
