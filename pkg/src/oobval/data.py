"""Dataset ingestion, synthesis, normalization, splitting, and label corruption.

The input pipeline shared by every valuator and experiment. All functions are
pure (inputs are never mutated) and deterministic under a fixed seed.
"""

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from ._rng import substream

OPENML_API_URL = "https://api.openml.org/api/v1/json/data/{id}"
CACHE_ENV_VAR = "OOBVAL_CACHE_DIR"


class DataError(ValueError):
    """Malformed or unusable input data."""


class OpenMLNetworkError(RuntimeError):
    """Download failed; retriable, distinct from a parse failure."""


@dataclass
class TabularDataset:
    """Feature matrix with dense integer class labels.

    features : (n, d) float64 array, finite everywhere
    labels   : (n,) int64 array with values in [0, class_count)
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_names: tuple | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or len(self.labels) != self.features.shape[0]:
            raise DataError(
                f"label count {self.labels.shape} does not match "
                f"{self.features.shape[0]} feature rows"
            )
        if not np.isfinite(self.features).all():
            bad = np.argwhere(~np.isfinite(self.features))[0]
            raise DataError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        if self.class_count < 1:
            raise DataError("class_count must be positive")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.class_count
        ):
            raise DataError("labels outside [0, class_count)")
        if self.feature_names is not None:
            self.feature_names = tuple(self.feature_names)
            if len(self.feature_names) != self.features.shape[1]:
                raise DataError("feature_names length does not match column count")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows)
        return TabularDataset(
            self.features[rows], self.labels[rows], self.class_count, self.feature_names
        )

    def with_labels(self, labels):
        return TabularDataset(self.features, labels, self.class_count, self.feature_names)


def fingerprint(ds):
    """Stable content hash of a dataset (shape + raw bytes), for provenance."""
    import hashlib

    h = hashlib.sha256()
    h.update(repr((ds.features.shape, ds.class_count)).encode())
    h.update(ds.features.tobytes())
    h.update(ds.labels.tobytes())
    return h.hexdigest()


@dataclass
class SplitSpec:
    train_size: int
    val_fraction: float = 0.10
    test_size: int = 3000
    seed: int = 0

    @property
    def val_size(self):
        return int(round(self.val_fraction * self.train_size))


@dataclass
class CorruptionRecord:
    flipped_indices: np.ndarray  # sorted training-row indices
    original_labels: dict  # index -> original class
    rate: float

    def __post_init__(self):
        self.flipped_indices = np.asarray(self.flipped_indices, dtype=np.int64)

    @property
    def flipped_set(self):
        return set(int(i) for i in self.flipped_indices)


@dataclass
class SyntheticConfig:
    """Gaussian features with Bernoulli labels through a fixed logistic link.

    ``eta`` is drawn once per config (from the seed's "eta" substream when not
    supplied) and reused, so datasets of different sizes can share one
    coefficient vector.
    """

    n: int
    d: int
    seed: int = 0
    eta: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise DataError("synthetic config needs n >= 1 and d >= 1")
        if self.eta is None:
            self.eta = draw_coefficients(self.d, self.seed)
        self.eta = np.ascontiguousarray(self.eta, dtype=np.float64)
        if self.eta.shape != (self.d,):
            raise DataError(f"eta must have shape ({self.d},)")


def draw_coefficients(d, seed):
    """The logistic coefficient vector, standard Gaussian entries."""
    return substream(seed, "eta").standard_normal(d)


@dataclass
class NormalizationStats:
    """Per-feature center/scale; scale 0 marks a constant column (maps to 0)."""

    mean: np.ndarray
    scale: np.ndarray


def load_csv(path, label_column):
    """Parse a UTF-8, comma-separated file with a header row.

    ``label_column`` is a column name or an integer index. Labels are
    re-encoded as dense class indices in order of first appearance; all other
    columns must parse as finite real numbers.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = list(reader)

    if isinstance(label_column, int) or (
        isinstance(label_column, str) and label_column.lstrip("-").isdigit()
    ):
        label_idx = int(label_column)
        if not (-len(header) <= label_idx < len(header)):
            raise DataError(f"label column index {label_idx} out of range")
        label_idx %= len(header)
    else:
        try:
            label_idx = header.index(label_column)
        except ValueError:
            raise DataError(
                f"label column {label_column!r} not in header {header}"
            ) from None

    feat_cols = [j for j in range(len(header)) if j != label_idx]
    n = len(rows)
    features = np.empty((n, len(feat_cols)), dtype=np.float64)
    raw_labels = []
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {i + 2}: expected {len(header)} cells, got {len(row)}")
        for out_j, j in enumerate(feat_cols):
            try:
                v = float(row[j])
            except ValueError:
                raise DataError(
                    f"row {i + 2}, column {header[j]!r}: cannot parse {row[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"row {i + 2}, column {header[j]!r}: non-finite value")
            features[i, out_j] = v
        raw_labels.append(row[label_idx])

    encoding = {}
    labels = np.empty(n, dtype=np.int64)
    for i, lab in enumerate(raw_labels):
        if lab not in encoding:
            encoding[lab] = len(encoding)
        labels[i] = encoding[lab]
    if len(encoding) < 2:
        raise DataError(f"{path}: found {len(encoding)} class(es), need at least 2")

    names = tuple(header[j] for j in feat_cols)
    return TabularDataset(features, labels, len(encoding), names)


def normalize(ds):
    """Center and scale each feature to mean 0, population sd 1.

    Constant columns map to all-zeros. Returns the transformed dataset and
    the stats needed to apply the identical transform to held-out splits.
    """
    mean = ds.features.mean(axis=0)
    sd = np.sqrt(((ds.features - mean) ** 2).mean(axis=0))
    scale = np.where(sd > 0.0, sd, 0.0)
    stats = NormalizationStats(mean=mean, scale=scale)
    return apply_normalization(ds, stats), stats


def apply_normalization(ds, stats):
    safe = np.where(stats.scale > 0.0, stats.scale, 1.0)
    feats = (ds.features - stats.mean) / safe
    feats[:, stats.scale == 0.0] = 0.0
    return TabularDataset(feats, ds.labels, ds.class_count, ds.feature_names)


def split(ds, spec):
    """Seeded shuffle, then consecutive train/val/test blocks.

    Normalization statistics are computed on the training block only and
    applied to all three splits.
    """
    needed = spec.train_size + spec.val_size + spec.test_size
    if needed > ds.n:
        raise DataError(
            f"need {needed} rows (train {spec.train_size} + val {spec.val_size} "
            f"+ test {spec.test_size}) but dataset has {ds.n}"
        )
    perm = substream(spec.seed, "split").permutation(ds.n)
    tr = ds.subset(perm[: spec.train_size])
    va = ds.subset(perm[spec.train_size : spec.train_size + spec.val_size])
    te = ds.subset(perm[spec.train_size + spec.val_size : needed])
    tr, stats = normalize(tr)
    return tr, apply_normalization(va, stats), apply_normalization(te, stats)


def flip_labels(train, rate, seed):
    """Flip exactly round(rate * n) labels, each to a uniformly chosen other class."""
    if train.class_count < 2:
        raise DataError("label flipping needs at least 2 classes")
    if not 0.0 < rate < 1.0:
        raise DataError("rate must be in (0, 1)")
    n = train.n
    m = int(round(rate * n))
    rng = substream(seed, "corruption")
    if m == 0:
        return train, CorruptionRecord(np.empty(0, dtype=np.int64), {}, rate)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    labels = train.labels.copy()
    offsets = rng.integers(1, train.class_count, size=m)
    original = {}
    for j, i in enumerate(idx):
        original[int(i)] = int(labels[i])
        labels[i] = (labels[i] + offsets[j]) % train.class_count
    return train.with_labels(labels), CorruptionRecord(idx, original, rate)


def generate_synthetic(cfg):
    """Draw X ~ N(0, I_d) rows and Y ~ Bernoulli(sigmoid(x . eta))."""
    x = substream(cfg.seed, "x").standard_normal((cfg.n, cfg.d))
    p = 1.0 / (1.0 + np.exp(-(x @ cfg.eta)))
    y = (substream(cfg.seed, "y").random(cfg.n) < p).astype(np.int64)
    return TabularDataset(x, y, 2)


def default_cache_dir():
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "oobval")


def _atomic_write(path, data):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_arff(text, dataset_id):
    """Minimal dense-ARFF reader: numeric attributes plus nominal columns."""
    attrs = []  # (name, is_nominal)
    data_lines = []
    in_data = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        low = line.lower()
        if in_data:
            data_lines.append(line)
        elif low.startswith("@attribute"):
            rest = line[len("@attribute") :].strip()
            if rest.startswith(("'", '"')):
                quote = rest[0]
                end = rest.index(quote, 1)
                name, kind = rest[1:end], rest[end + 1 :].strip()
            else:
                parts = rest.split(None, 1)
                if len(parts) != 2:
                    raise DataError(f"openml {dataset_id}: bad @attribute line: {line}")
                name, kind = parts
            attrs.append((name, kind.startswith("{")))
        elif low.startswith("@data"):
            in_data = True
    if not attrs or not data_lines:
        raise DataError(f"openml {dataset_id}: no attributes or no data section")
    rows = []
    for line in data_lines:
        cells = next(csv.reader([line]))
        if len(cells) != len(attrs):
            raise DataError(
                f"openml {dataset_id}: row with {len(cells)} cells, "
                f"expected {len(attrs)}"
            )
        rows.append([c.strip().strip("'\"") for c in cells])
    return [a[0] for a in attrs], [a[1] for a in attrs], rows


def _http_get(url, session):
    import requests

    try:
        resp = (session or requests).get(url, timeout=60)
    except Exception as exc:  # noqa: BLE001 - any transport failure is retriable
        raise OpenMLNetworkError(f"download failed for {url}: {exc}") from exc
    if resp.status_code != 200:
        raise OpenMLNetworkError(f"HTTP {resp.status_code} for {url}")
    return resp


def fetch_openml(dataset_id, cache_dir=None, session=None):
    """Download a dataset by numeric ID, cache it on disk, parse it.

    The raw payload is cached as downloaded bytes plus a parsed canonical CSV
    keyed by the ID; warm-cache calls make no network requests.
    """
    dataset_id = int(dataset_id)
    cache_dir = cache_dir or default_cache_dir()
    canonical = os.path.join(cache_dir, f"openml_{dataset_id}.csv")
    meta_path = os.path.join(cache_dir, f"openml_{dataset_id}.meta.json")
    raw_path = os.path.join(cache_dir, f"openml_{dataset_id}.arff")

    if not (os.path.exists(canonical) and os.path.exists(meta_path)):
        if os.path.exists(raw_path):
            raw = open(raw_path, "rb").read()
            target = None
            if os.path.exists(meta_path):
                target = json.load(open(meta_path)).get("target")
        else:
            resp = _http_get(OPENML_API_URL.format(id=dataset_id), session)
            try:
                desc = resp.json()["data_set_description"]
                url = desc["url"]
            except (KeyError, ValueError) as exc:
                raise DataError(f"openml {dataset_id}: unexpected metadata: {exc}") from exc
            target = desc.get("default_target_attribute")
            raw = _http_get(url, session).content
            _atomic_write(raw_path, raw)
        names, _, rows = _parse_arff(raw.decode("utf-8", errors="replace"), dataset_id)
        if target is None or target not in names:
            target = names[-1]
        label_idx = names.index(target)
        out = [",".join(_csv_cell(c) for c in names)]
        for row in rows:
            out.append(",".join(_csv_cell(c) for c in row))
        _atomic_write(canonical, ("\n".join(out) + "\n").encode("utf-8"))
        _atomic_write(
            meta_path,
            json.dumps({"id": dataset_id, "target": target, "label_idx": label_idx}).encode(),
        )

    meta = json.load(open(meta_path))
    return load_csv(canonical, meta["target"])


def _csv_cell(value):
    if "," in value or '"' in value:
        return '"' + value.replace('"', '""') + '"'
    return value
