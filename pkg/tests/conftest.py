import numpy as np
import pytest

from oobval import data, forest


@pytest.fixture(scope="session")
def toy_train():
    cfg = data.SyntheticConfig(n=120, d=4, seed=21)
    ds = data.generate_synthetic(cfg)
    ds, _ = data.normalize(ds)
    return ds


@pytest.fixture(scope="session")
def toy_ensemble(toy_train):
    return forest.fit_ensemble(toy_train, B=60, cfg=forest.TreeConfig(seed=9))


def random_instance(rng, n_lo=2, n_hi=20, b_lo=2, b_hi=50, kind="correctness",
                    require_defined=False):
    """A synthetic (weights, mask, scores) triple with honest multinomial rows."""
    while True:
        n = int(rng.integers(n_lo, n_hi + 1))
        B = int(rng.integers(b_lo, b_hi + 1))
        w = rng.multinomial(n, np.full(n, 1.0 / n), size=B)
        mask = w == 0
        if require_defined and not (mask.sum(axis=0) > 0).all():
            continue
        if kind == "correctness":
            s = rng.integers(0, 2, size=(B, n)).astype(np.float64)
        else:
            s = -(rng.random((B, n)) ** 2)
        return w, mask, s
