"""Command-line entry point: value | detect | removal | bench | fetch.

All randomness flows from one 64-bit seed through named substreams; resolved
configuration is dumped to a JSON manifest whose hash is embedded in every
output file, and re-running a command with a manifest reproduces its outputs
byte for byte (timing measurements excepted, since wall clocks are not
reproducible).

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time


from . import __version__
from . import baselines as _baselines
from . import data as _data
from . import evaluation as _eval
from . import forest as _forest
from . import oob as _oob
from ._rng import substream


class ConfigError(ValueError):
    pass


METHODS = ("dataoob", "knn-shapley", "data-shapley", "beta-shapley", "ame", "random")

DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "workers": 1,
    "cache_dir": None,
    "csv": None,
    "label_column": None,
    "openml_id": None,
    "synthetic": None,
    "synthetic_d": 10,
    "train_size": 1000,
    "val_fraction": 0.10,
    "test_size": 3000,
    "rate": 0.10,
    "method": "dataoob",
    "trees": 800,
    "knn_k": None,
    "chains": 10,
    "gr_threshold": 1.05,
    "max_evals_per_chain": 100,
    "subsets_per_p": 200,
    "inclusion_probs": [0.2, 0.4, 0.6, 0.8],
    "weights_preset": "uniform",
    "beta_alpha": 16.0,
    "beta_beta": 1.0,
    "stride": 0.05,
    "score": "correctness",
    "streaming_threshold": 20000,
    "n_grid": [10000, 25000, 50000, 100000],
    "reps": 5,
    "bench_methods": ["dataoob", "knn-shapley"],
    "bench_d": 10,
    "bench_timeout": None,
}

_METHOD_FLAGS = {
    "trees": {"dataoob"},
    "knn_k": {"knn-shapley"},
    "chains": {"data-shapley", "beta-shapley"},
    "gr_threshold": {"data-shapley", "beta-shapley"},
    "max_evals_per_chain": {"data-shapley", "beta-shapley"},
    "subsets_per_p": {"ame"},
    "inclusion_probs": {"ame"},
    "beta_alpha": {"beta-shapley"},
    "beta_beta": {"beta-shapley"},
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="oobval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, method=True):
        p.add_argument("--config", help="JSON config or a previous run manifest")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--workers", type=int)
        p.add_argument("--cache-dir", dest="cache_dir")
        if dataset:
            p.add_argument("--csv")
            p.add_argument("--label-column", dest="label_column")
            p.add_argument("--openml-id", dest="openml_id", type=int)
            p.add_argument("--synthetic", action="store_const", const=True,
                           default=None,
                           help="draw synthetic logistic data sized to the splits")
            p.add_argument("--synthetic-d", dest="synthetic_d", type=int)
            p.add_argument("--train-size", dest="train_size", type=int)
            p.add_argument("--val-fraction", dest="val_fraction", type=float)
            p.add_argument("--test-size", dest="test_size", type=int)
        if method:
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--trees", type=int)
            p.add_argument("--knn-k", dest="knn_k", type=int)
            p.add_argument("--chains", type=int)
            p.add_argument("--gr-threshold", dest="gr_threshold", type=float)
            p.add_argument("--max-evals-per-chain", dest="max_evals_per_chain", type=int)
            p.add_argument("--subsets-per-p", dest="subsets_per_p", type=int)
            p.add_argument("--weights-preset", dest="weights_preset",
                           choices=("uniform", "beta"))
            p.add_argument("--beta-alpha", dest="beta_alpha", type=float)
            p.add_argument("--beta-beta", dest="beta_beta", type=float)

    p_value = sub.add_parser("value", help="compute data values")
    common(p_value)

    p_detect = sub.add_parser("detect", help="corrupt labels, value, score detection")
    common(p_detect)
    p_detect.add_argument("--rate", type=float)

    p_removal = sub.add_parser("removal", help="point-removal accuracy curves")
    common(p_removal)
    p_removal.add_argument("--rate", type=float)
    p_removal.add_argument("--stride", type=float)

    p_bench = sub.add_parser("bench", help="timing benchmarks on synthetic data")
    common(p_bench, dataset=False, method=False)
    p_bench.add_argument("--trees", type=int)
    p_bench.add_argument("--n-grid", dest="n_grid",
                         help="comma-separated sample sizes")
    p_bench.add_argument("--reps", type=int)
    p_bench.add_argument("--bench-methods", dest="bench_methods",
                         help="comma-separated subset of dataoob,knn-shapley")
    p_bench.add_argument("--bench-d", dest="bench_d", type=int)
    p_bench.add_argument("--bench-timeout", dest="bench_timeout", type=float)

    p_fetch = sub.add_parser("fetch", help="download an OpenML dataset into the cache")
    p_fetch.add_argument("--config", help="JSON config or a previous run manifest")
    p_fetch.add_argument("--openml-id", dest="openml_id", type=int)
    p_fetch.add_argument("--cache-dir", dest="cache_dir")
    p_fetch.add_argument("--seed", type=int)
    p_fetch.add_argument("--out-dir", dest="out_dir")
    return parser


def resolve_config(args):
    """defaults < config file < explicit CLI flags.

    Returns (config, cli_explicit) where cli_explicit holds only the keys the
    user typed on the command line; strict method-flag validation applies to
    those (a manifest legitimately carries every key).
    """
    cfg = dict(DEFAULTS)
    cli_explicit = set()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = json.load(fh)
        if "config" in loaded and isinstance(loaded["config"], dict):
            loaded = loaded["config"]  # a manifest
        unknown = set(loaded) - set(DEFAULTS) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in loaded.items():
            if key != "command":
                cfg[key] = value
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            if key in ("n_grid", "bench_methods", "inclusion_probs") and isinstance(value, str):
                parts = [s for s in value.split(",") if s]
                value = (
                    [int(s) for s in parts] if key == "n_grid"
                    else [float(s) for s in parts] if key == "inclusion_probs"
                    else parts
                )
            cfg[key] = value
            cli_explicit.add(key)
    return cfg, cli_explicit


def validate_config(command, cfg, explicit):
    sources = [cfg["csv"] is not None, cfg["openml_id"] is not None,
               bool(cfg["synthetic"])]
    if command in ("value", "detect", "removal"):
        if sum(sources) != 1:
            raise ConfigError(
                "exactly one dataset source required: --csv, --openml-id, "
                "or --synthetic"
            )
        if cfg["csv"] is not None and cfg["label_column"] is None:
            raise ConfigError("--csv needs --label-column")
        if cfg["method"] not in METHODS:
            raise ConfigError(f"unknown method {cfg['method']!r}")
        for key, owners in _METHOD_FLAGS.items():
            if key in explicit and cfg["method"] not in owners:
                raise ConfigError(
                    f"--{key.replace('_', '-')} applies to {sorted(owners)}, "
                    f"not method {cfg['method']!r}"
                )
        if cfg["train_size"] < 2:
            raise ConfigError("train_size must be >= 2")
        if not 0.0 <= cfg["val_fraction"] < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
    if command in ("detect", "removal"):
        if not 0.0 <= cfg["rate"] < 1.0:
            raise ConfigError("rate must be in [0, 1)")
        if int(round(cfg["rate"] * cfg["train_size"])) == 0:
            raise ConfigError("empty truth: rate flips zero points")
    if command == "removal" and not 0.0 < cfg["stride"] <= 0.5:
        raise ConfigError("stride must be in (0, 0.5]")
    if command == "bench":
        bad = set(cfg["bench_methods"]) - {"dataoob", "knn-shapley"}
        if bad:
            raise ConfigError(f"unknown bench methods: {sorted(bad)}")
        if cfg["reps"] < 1:
            raise ConfigError("reps must be >= 1")
    if command == "fetch" and cfg["openml_id"] is None:
        raise ConfigError("fetch needs --openml-id")


# keys that never change what gets computed, only where/how it runs
_NON_SEMANTIC_KEYS = ("out_dir", "cache_dir", "workers")


def manifest_hash(command, cfg):
    semantic = {k: v for k, v in cfg.items() if k not in _NON_SEMANTIC_KEYS}
    payload = json.dumps({"command": command, "config": semantic}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def write_manifest(out_dir, command, cfg, provenance):
    doc = {
        "command": command,
        "config": cfg,
        "manifest_hash": manifest_hash(command, cfg),
        "provenance": provenance,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return path


def _load_source(cfg):
    if cfg["csv"] is not None:
        return _data.load_csv(cfg["csv"], cfg["label_column"])
    if cfg["openml_id"] is not None:
        return _data.fetch_openml(cfg["openml_id"], cache_dir=cfg["cache_dir"])
    total = cfg["train_size"] + int(round(cfg["val_fraction"] * cfg["train_size"]))
    total += cfg["test_size"]
    syn = _data.SyntheticConfig(n=total, d=cfg["synthetic_d"], seed=cfg["seed"])
    return _data.generate_synthetic(syn)


def _split(cfg, ds):
    spec = _data.SplitSpec(
        train_size=cfg["train_size"],
        val_fraction=cfg["val_fraction"],
        test_size=cfg["test_size"],
        seed=cfg["seed"],
    )
    return _data.split(ds, spec)


def _compute_values(cfg, train, val):
    """Run the selected valuator; returns (ValueVector, influence|None, info)."""
    method = cfg["method"]
    seed = cfg["seed"]
    info = {"utility_evaluations": 0, "trees_trained": 0}
    if method == "dataoob":
        tree_cfg = _forest.TreeConfig(seed=seed)
        info["trees_trained"] = cfg["trees"]
        if train.n > cfg["streaming_threshold"]:
            v, scores, _ = _oob.dataoob_streaming(
                train, cfg["trees"], tree_cfg,
                score=cfg["score"], workers=cfg["workers"],
            )
            return v, None, info
        ens = _forest.fit_ensemble(train, cfg["trees"], tree_cfg,
                                   workers=cfg["workers"])
        sm = _oob.score_matrix(ens, train, _oob.ScoreFunction(cfg["score"]),
                               workers=cfg["workers"])
        v = _oob.data_oob_values(sm)
        scores = _oob.oob_scores(sm)
        influence = None
        if not v.undefined_mask.any():
            influence = _oob.infinitesimal_jackknife(ens, sm, v, scores)
        return v, influence, info
    if method == "knn-shapley":
        v = _baselines.knn_shapley(train, val, k=cfg["knn_k"])
        return v, None, info
    if method == "random":
        psi = substream(seed, "random-values").permutation(train.n).astype(float)
        return _oob.ValueVector(psi=psi), None, info
    utility = _baselines.TreeUtility(train, val, _forest.TreeConfig(seed=seed))
    if method == "ame":
        design = _baselines.SubsetDesign(
            probabilities=tuple(cfg["inclusion_probs"]),
            subsets_per_p=cfg["subsets_per_p"],
        )
        v, _, ame_info = _baselines.ame_values(utility, train.n, design=design,
                                               seed=seed)
        info["utility_evaluations"] = utility.eval_count
        info["ame"] = {k: ame_info[k] for k in ("selected_lambda", "sparsity")}
        return v, None, info
    if method == "data-shapley" or (
        method == "beta-shapley" and cfg["weights_preset"] == "uniform"
    ):
        weights = _baselines.SemivalueWeights.uniform(train.n)
    else:
        weights = _baselines.SemivalueWeights.beta_induced(
            train.n, alpha=cfg["beta_alpha"], beta=cfg["beta_beta"]
        )
    v, mc_info = _baselines.monte_carlo_semivalues(
        utility, train.n, weights=weights, chains=cfg["chains"],
        max_evals_per_chain=cfg["max_evals_per_chain"],
        threshold=cfg["gr_threshold"], seed=seed,
    )
    info["utility_evaluations"] = utility.eval_count
    info["max_r_hat"] = mc_info["max_r_hat"]
    info["all_converged"] = mc_info["all_converged"]
    return v, None, info


def _write_curve_csv(path, header, rows, mhash):
    lines = [f"# manifest_hash={mhash}", header]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def cmd_value(cfg):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    t0 = time.perf_counter()
    ds = _load_source(cfg)
    train, val, test = _split(cfg, ds)
    v, influence, info = _compute_values(cfg, train, val)
    mhash = manifest_hash("value", cfg)
    out_csv = os.path.join(cfg["out_dir"], "values.csv")
    _oob.write_values_csv(
        out_csv, v, influence=influence,
        fingerprint=_data.fingerprint(train), method=cfg["method"],
        manifest_hash=mhash,
    )
    write_manifest(
        cfg["out_dir"], "value", cfg,
        {
            "dataset_fingerprint": _data.fingerprint(train),
            "wall_clock_seconds": time.perf_counter() - t0,
            "package_version": __version__,
            **info,
        },
    )
    print(f"wrote {out_csv}")
    return 0


def _corrupt_and_value(cfg, command):
    ds = _load_source(cfg)
    train, val, test = _split(cfg, ds)
    corrupted, record = _data.flip_labels(train, cfg["rate"], cfg["seed"])
    if len(record.flipped_indices) == 0:
        raise ConfigError("empty truth: rate flips zero points")
    v, influence, info = _compute_values(cfg, corrupted, val)
    return corrupted, val, test, record, v, influence, info


def cmd_detect(cfg):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    t0 = time.perf_counter()
    train, val, test, record, v, influence, info = _corrupt_and_value(cfg, "detect")
    curve = _eval.precision_recall_curve(v, record)
    det = _eval.f1_detection(v, record)
    mhash = manifest_hash("detect", cfg)

    _oob.write_values_csv(
        os.path.join(cfg["out_dir"], "values.csv"), v, influence=influence,
        fingerprint=_data.fingerprint(train), method=cfg["method"],
        manifest_hash=mhash,
    )
    _write_curve_csv(
        os.path.join(cfg["out_dir"], "pr_curve.csv"),
        "k,threshold,precision,recall",
        [
            (i + 1, float(curve.thresholds[i]), float(curve.precision[i]),
             float(curve.recall[i]))
            for i in range(len(curve.precision))
        ],
        mhash,
    )
    detection = {
        "f1": det.f1,
        "precision": det.precision,
        "recall": det.recall,
        "boundary": None if math.isnan(det.boundary) else det.boundary,
        "degenerate": det.degenerate,
        "auprc": curve.auprc,
        "predicted_count": int(len(det.predicted)),
        "truth_count": int(len(record.flipped_indices)),
        "cluster_solver": "exact 1-D split enumeration (not iterative k-means++)",
        "manifest_hash": mhash,
    }
    with open(os.path.join(cfg["out_dir"], "detection.json"), "w") as fh:
        json.dump(detection, fh, indent=2, sort_keys=True)
    with open(os.path.join(cfg["out_dir"], "corruption.json"), "w") as fh:
        json.dump(
            {
                "rate": record.rate,
                "flipped_indices": [int(i) for i in record.flipped_indices],
                "original_labels": {str(k): v2 for k, v2 in record.original_labels.items()},
                "manifest_hash": mhash,
            },
            fh, indent=2, sort_keys=True,
        )
    write_manifest(
        cfg["out_dir"], "detect", cfg,
        {
            "dataset_fingerprint": _data.fingerprint(train),
            "wall_clock_seconds": time.perf_counter() - t0,
            "package_version": __version__,
            **info,
        },
    )
    print(f"F1={det.f1:.4f} AUPRC={curve.auprc:.4f} -> {cfg['out_dir']}")
    return 0


def cmd_removal(cfg):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    t0 = time.perf_counter()
    train, val, test, record, v, influence, info = _corrupt_and_value(cfg, "removal")
    mhash = manifest_hash("removal", cfg)
    curve = _eval.point_removal_curve(v, train, test, stride=cfg["stride"],
                                      method=cfg["method"])
    rand_vals = _eval.random_removal_values(train.n, cfg["seed"])
    rand_curve = _eval.point_removal_curve(rand_vals, train, test,
                                           stride=cfg["stride"], method="random")
    for c in (curve, rand_curve):
        _write_curve_csv(
            os.path.join(cfg["out_dir"], f"removal_{c.method}.csv"),
            "fraction_removed,test_accuracy,single_class",
            [
                (float(c.fractions[i]), float(c.accuracies[i]),
                 int(c.degenerate_flags[i]))
                for i in range(len(c.fractions))
            ],
            mhash,
        )
    write_manifest(
        cfg["out_dir"], "removal", cfg,
        {
            "dataset_fingerprint": _data.fingerprint(train),
            "wall_clock_seconds": time.perf_counter() - t0,
            "package_version": __version__,
            **info,
        },
    )
    print(f"wrote removal curves -> {cfg['out_dir']}")
    return 0


def cmd_bench(cfg):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    t0 = time.perf_counter()
    methods = []
    for name in cfg["bench_methods"]:
        if name == "dataoob":
            methods.append(_eval.bench_method_dataoob(cfg["trees"]))
        else:
            methods.append(_eval.bench_method_knn_shapley())
    records, slopes = _eval.bench_timing(
        methods, cfg["n_grid"], d=cfg["bench_d"], B=cfg["trees"],
        repetitions=cfg["reps"], seed=cfg["seed"], timeout=cfg["bench_timeout"],
    )
    mhash = manifest_hash("bench", cfg)
    _write_curve_csv(
        os.path.join(cfg["out_dir"], "bench.csv"),
        "method,n,d,B,repetitions,mean_seconds,ci_half_width,censored",
        [
            (r.method, r.n, r.d, r.B, len(r.seconds), r.mean_seconds,
             r.half_width, int(r.censored))
            for r in records
        ],
        mhash,
    )
    with open(os.path.join(cfg["out_dir"], "bench_summary.json"), "w") as fh:
        json.dump({"slopes": slopes, "manifest_hash": mhash}, fh, indent=2,
                  sort_keys=True)
    write_manifest(
        cfg["out_dir"], "bench", cfg,
        {
            "wall_clock_seconds": time.perf_counter() - t0,
            "package_version": __version__,
        },
    )
    for name, slope in slopes.items():
        print(f"{name}: log-log slope {slope:.3f}")
    return 0


def cmd_fetch(cfg):
    ds = _data.fetch_openml(cfg["openml_id"], cache_dir=cfg["cache_dir"])
    print(
        f"openml {cfg['openml_id']}: {ds.n} rows, {ds.d} features, "
        f"{ds.class_count} classes (cached)"
    )
    return 0


_COMMANDS = {
    "value": cmd_value,
    "detect": cmd_detect,
    "removal": cmd_removal,
    "bench": cmd_bench,
    "fetch": cmd_fetch,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, explicit = resolve_config(args)
        validate_config(args.command, cfg, explicit)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _data.OpenMLNetworkError as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
