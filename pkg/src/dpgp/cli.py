"""Batch command-line front end.

Subcommands ``regress``, ``classify``, ``select-hypers`` and ``bench`` read
an optional JSON config, let flags override its scalar fields, run with RNG
streams derived from ``--seed`` and write ``results.json`` (plus
``table.csv`` / ``plotdata.csv`` where relevant) into ``--out``.  Every
``results.json`` embeds the resolved config and seed.

Exit status: 0 on success, 2 for invalid configuration or input, 3 for a
numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from ._linalg import NumericalError
from .classification import (ClassifyTask, accuracy, classify, fit_laplace, predict_latent,
                             redraw)
from .cloaking import PrivacySpec
from .data import (bundled_path, gen_stripes, labels_to_pm1, load_csv, load_mnist_binary,
                   stripes_test_grid)
from .hyperselect import ConfigGrid, build_selection_table, epsilon_sweep, expected_rmse
from .kernels import HyperConfig, LengthscaleFunction
from .regression import RegressionTask, fit_linear, rmse_cv
from .sparse import kmeans_place

BUNDLED = "bundled:kung_like"

DEFAULTS = {
    "regress": {
        "data": {"path": BUNDLED, "output": "height", "features": None},
        "kernel": {"family": "EQ", "lengthscales": 10.0, "variance": 900.0,
                   "noise_variance": 25.0, "n": 10.0, "m": None,
                   "kde_bandwidth": None, "neighbourhood_radius": None},
        "prior_mean": 100.0,
        "test": {"path": None, "points_per_dim": None},
        "epsilon": 1.0, "delta": 0.01, "sensitivity": 100.0,
        "sparse": None, "gibbs": False, "cloak_iterations": 200,
    },
    "classify": {
        "data": {"kind": "stripes", "n": 200, "flip_prob": 0.1,
                 "path": None, "output": "label", "features": None, "test_path": None,
                 "images": None, "labels": None, "n_train": 256, "n_test": 100},
        "kernel": {"lengthscales": 3.5, "variance": 1.0},
        "epsilon": 1.0, "delta": 0.01, "sensitivity": 2.0,
        "sparse": None, "newton_iterations": 1, "cloak_iterations": 200,
    },
    "select-hypers": {
        "data": {"path": BUNDLED, "output": "height", "features": ["age"]},
        "grid": {"lengthscale": [1, 5, 25, 125, 625], "noise_variance": [0.2, 1, 5, 25],
                 "kernel_variance": [1, 5, 25, 125]},
        "prior_mean": 100.0, "holdout_fraction": 0.5,
        "kappa": 5, "noise_draws": 20, "epsilon_select": 1.0, "sensitivity_threshold": None,
        "epsilon": 1.0, "delta": 0.01, "sensitivity": 100.0,
        "sweep_epsilons": None, "cloak_iterations": 200,
    },
    "bench": {
        "kind": "rmse",
        "data": {"path": BUNDLED, "output": "height", "features": ["age"],
                 "kind": "stripes", "n": 200, "flip_prob": 0.1,
                 "images": None, "labels": None, "n_train": 256, "n_test": 100},
        "kernel": {"lengthscales": 10.0, "variance": 900.0, "noise_variance": 25.0,
                   "n": 10.0, "m": None},
        "prior_mean": 100.0,
        "methods": ["standard", "sparse"], "dp": [True, False],
        "folds": 14, "noise_draws": 5,
        "inducing_counts": [4, 8, 16], "lengthscales": [1.0, 3.5],
        "epsilon": 1.0, "delta": 0.01, "sensitivity": 100.0,
        "sparse": 5, "cloak_iterations": 200,
    },
}


class ConfigError(ValueError):
    pass


def inducing_sweep_counts(lo: int = 4, hi: int = 200, num: int = 16) -> list:
    """``num`` exponentially spaced integers from ``lo`` to ``hi``."""
    return sorted({int(round(v)) for v in np.geomspace(lo, hi, num)})


# ------------------------------------------------------------------ helpers

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_to_jsonable(payload), sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _privacy(cfg: dict) -> PrivacySpec:
    eps = cfg["epsilon"]
    eps = math.inf if eps is None or (isinstance(eps, str) and eps.lower() == "inf") else float(eps)
    return PrivacySpec(eps, float(cfg["delta"]), float(cfg["sensitivity"]))


def _tabular(data: dict):
    path = data.get("path")
    if path is None:
        raise ConfigError("data.path is required")
    if path == BUNDLED:
        path = bundled_path()
    elif not Path(path).exists():
        raise ConfigError(f"data file {path} does not exist")
    return load_csv(path, data["output"], data.get("features"))


def _hyper(kernel: dict) -> HyperConfig:
    return HyperConfig(kernel["lengthscales"], float(kernel["variance"]),
                       float(kernel.get("noise_variance", 0.0)))


def _lengthscale_fn(kernel: dict, X, theta: HyperConfig) -> LengthscaleFunction:
    m = kernel.get("m") or 5.0 * theta.lengthscale_scalar
    return LengthscaleFunction(float(kernel.get("n") or 10.0), float(m), X,
                               kernel.get("kde_bandwidth"), kernel.get("neighbourhood_radius"))


def _test_inputs(test: dict, X: np.ndarray) -> np.ndarray:
    if test.get("path"):
        if not Path(test["path"]).exists():
            raise ConfigError(f"test file {test['path']} does not exist")
        with open(test["path"], newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return np.array([[float(v) for v in r] for r in rows if r])
    dim = X.shape[1]
    per = test.get("points_per_dim") or (60 if dim == 1 else 15 if dim == 2 else 5)
    axes = [np.linspace(X[:, j].min(), X[:, j].max(), per) for j in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


# ----------------------------------------------------------------- commands

def run_regress(cfg: dict, streams, out: Path) -> dict:
    ds = _tabular(cfg["data"])
    theta = _hyper(cfg["kernel"])
    X_star = _test_inputs(cfg["test"], ds.X)
    mode = "sparse" if cfg.get("sparse") else "gibbs" if cfg.get("gibbs") else "standard"
    task = RegressionTask(ds.X, ds.y, X_star, theta, _privacy(cfg), mode=mode,
                          m_count=cfg.get("sparse"),
                          lengthscale_fn=_lengthscale_fn(cfg["kernel"], ds.X, theta)
                          if mode == "gibbs" else None,
                          prior_mean=float(cfg["prior_mean"]),
                          cloak_iterations=int(cfg["cloak_iterations"]))
    pred = fit_linear(task, streams["inducing"]).release(task.privacy, streams["noise"])
    res = pred.cloaking
    out_json = {
        "dp_mean": pred.dp_mean, "gp_variance": pred.gp_variance,
        "dp_noise_std": pred.dp_noise_std,
        "delta": None if res is None else res.Delta,
        "noise_scale": 0.0 if res is None else res.noise_scale,
        "grad_norm": None if res is None else res.grad_norm,
        "optimizer_iterations": None if res is None else res.iterations,
        "epsilon": task.privacy.epsilon, "delta_dp": task.privacy.delta,
        "sensitivity": task.privacy.sensitivity,
        "inducing_inputs": [] if pred.Z is None else pred.Z,
        "test_inputs": X_star, "mode": mode,
    }
    if not cfg["privacy_mode"]:
        out_json["clean_mean"] = pred.clean_mean
    names = list(ds.feature_names)
    _write_csv(out / "plotdata.csv", names + ["dp_mean", "dp_noise_std", "gp_variance"],
               [list(x) + [m, s, v] for x, m, s, v in
                zip(X_star, pred.dp_mean, pred.dp_noise_std, pred.gp_variance)])
    return out_json


def _classification_data(data: dict, streams):
    kind = data.get("kind", "stripes")
    if kind == "stripes":
        train = gen_stripes(int(data["n"]), float(data["flip_prob"]), streams["data"])
        test = stripes_test_grid()
        return train.X, train.y, test.X, test.y, ["x1", "x2"]
    if kind == "csv":
        train = _tabular({"path": data["path"], "output": data["output"],
                          "features": data.get("features")})
        y = labels_to_pm1(train.y)
        if data.get("test_path"):
            test = _tabular({"path": data["test_path"], "output": data["output"],
                             "features": train.feature_names})
            return train.X, y, test.X, labels_to_pm1(test.y), train.feature_names
        return train.X, y, _test_inputs({}, train.X), None, train.feature_names
    if kind == "mnist":
        for key in ("images", "labels"):
            if not data.get(key) or not Path(data[key]).exists():
                raise ConfigError(f"data.{key} must name an existing IDX file")
        tr, te = load_mnist_binary(data["images"], data["labels"], int(data["n_train"]),
                                   int(data["n_test"]), streams["data"])
        return tr.images, tr.labels, te.images, te.labels, None
    raise ConfigError(f"unknown classification data kind {kind!r}")


def run_classify(cfg: dict, streams, out: Path) -> dict:
    X, y, X_star, y_star, names = _classification_data(cfg["data"], streams)
    theta = HyperConfig(cfg["kernel"]["lengthscales"], float(cfg["kernel"]["variance"]), 0.0)
    m_count = cfg.get("sparse")
    task = ClassifyTask(X, y, theta, _privacy(cfg), X_star=X_star, m_count=m_count,
                        newton_iterations=int(cfg["newton_iterations"]),
                        cloak_iterations=int(cfg["cloak_iterations"]))
    if m_count:
        task.Z = kmeans_place(X, int(m_count), streams["inducing"]).Z
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = classify(task, streams["noise"])
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out_json = {
        "latent_mean": res.latent_mean, "latent_var": res.latent_var,
        "class_prob": res.class_prob,
        "delta": None if res.cloaking is None else res.cloaking.Delta,
        "noise_scale": 0.0 if res.cloaking is None else res.cloaking.noise_scale,
        "epsilon": task.privacy.epsilon, "delta_dp": task.privacy.delta,
        "sensitivity": task.privacy.sensitivity,
        "newton_iterations": task.newton_iterations,
        "inducing_inputs": [] if res.Z is None else res.Z,
        "warnings": [str(w.message) for w in caught],
    }
    if y_star is not None:
        out_json["test_accuracy"] = accuracy(res.latent_mean, y_star)
    if names is not None:
        _write_csv(out / "plotdata.csv", list(names) + ["latent_mean", "latent_var", "class_prob"],
                   [list(x) + [m, v, p] for x, m, v, p in
                    zip(X_star, res.latent_mean, res.latent_var, res.class_prob)])
    return out_json


def run_select(cfg: dict, streams, out: Path) -> dict:
    ds = _tabular(cfg["data"])
    g = cfg["grid"]
    privacy = _privacy(cfg)
    grid = ConfigGrid.from_axes(g["lengthscale"], g["noise_variance"], g["kernel_variance"],
                                kappa=int(cfg["kappa"]), d=privacy.sensitivity,
                                epsilon_select=float(cfg["epsilon_select"]),
                                sensitivity_threshold=cfg.get("sensitivity_threshold"),
                                noise_draws=int(cfg["noise_draws"]), privacy=privacy,
                                prior_mean=float(cfg["prior_mean"]),
                                cloak_iterations=int(cfg["cloak_iterations"]))
    frac = float(cfg["holdout_fraction"])
    if not 0 <= frac < 1:
        raise ConfigError("holdout_fraction must lie in [0, 1)")
    perm = streams["data"].permutation(ds.n)
    n_hold = int(round(frac * ds.n))
    sel, hold = perm[n_hold:], perm[:n_hold]
    kwargs = {}
    if n_hold:
        kwargs = {"X_hold": ds.X[hold], "y_hold": ds.y[hold]}
    table = build_selection_table(ds.X[sel], ds.y[sel], grid, streams["noise"], **kwargs)
    rows = table.rows()
    _write_csv(out / "table.csv",
               ["lengthscale", "noise_var", "kernel_var", "probability", "rmse", "sse",
                "delta_u", "excluded"],
               [[r["lengthscale"], r["noise_var"], r["kernel_var"], r["probability"],
                 "" if r["rmse"] is None else r["rmse"], r["sse"], r["delta_u"],
                 int(r["excluded"])] for r in rows])
    chosen = grid.configs[table.chosen]
    out_json = {
        "chosen": {"lengthscale": chosen.lengthscale_scalar,
                   "noise_variance": chosen.noise_variance,
                   "kernel_variance": chosen.kernel_variance, "index": table.chosen},
        "global_delta_u": table.global_delta_u, "n_configs": len(grid),
        "n_excluded": int(table.excluded.sum()),
        "epsilon_select": grid.epsilon_select, "epsilon": privacy.epsilon,
        "delta_dp": privacy.delta, "sensitivity": privacy.sensitivity,
    }
    if table.rmse is not None:
        out_json["expected_rmse"] = expected_rmse(table.probability, table.rmse)
        out_json["mean_rmse"] = float(np.mean(table.rmse))
    if cfg.get("sweep_epsilons"):
        eps = [math.inf if str(e).lower() == "inf" else float(e) for e in cfg["sweep_epsilons"]]
        sweep = epsilon_sweep(ds.X[sel], ds.y[sel], grid, eps, streams["sweep"])
        _write_csv(out / "plotdata.csv", ["epsilon", "lengthscale", "probability"],
                   [[e, ls, sweep.probability[i, j]] for i, e in enumerate(sweep.epsilons)
                    for j, ls in enumerate(sweep.lengthscales)])
        out_json["sweep_mean_log_lengthscale"] = sweep.mean_log_lengthscale
    return out_json


def run_bench(cfg: dict, streams, out: Path) -> dict:
    kind = cfg["kind"]
    if kind == "rmse":
        return _bench_rmse(cfg, streams, out)
    if kind == "inducing":
        return _bench_inducing(cfg, streams, out)
    raise ConfigError(f"bench kind must be 'rmse' or 'inducing', got {kind!r}")


def _bench_rmse(cfg, streams, out):
    ds = _tabular(cfg["data"])
    theta = _hyper(cfg["kernel"])
    privacy = _privacy(cfg)
    rows = []
    for dp in cfg["dp"]:
        pr = privacy if dp else PrivacySpec(math.inf, privacy.delta, privacy.sensitivity)
        for method in cfg["methods"]:
            task = RegressionTask(ds.X, ds.y, ds.X[:1], theta, pr, mode=method,
                                  m_count=int(cfg["sparse"]) if method == "sparse" else None,
                                  lengthscale_fn=_lengthscale_fn(cfg["kernel"], ds.X, theta)
                                  if method == "gibbs" else None,
                                  prior_mean=float(cfg["prior_mean"]),
                                  cloak_iterations=int(cfg["cloak_iterations"]))
            # each row sees the same fold split
            rng = np.random.default_rng(streams["seed"])
            cv = rmse_cv(task, int(cfg["folds"]), int(cfg["noise_draws"]), rng)
            rows.append([method, int(bool(dp)), cv.mean, cv.std])
    _write_csv(out / "table.csv", ["method", "dp", "rmse_mean", "rmse_std"], rows)
    return {"rows": [{"method": r[0], "dp": bool(r[1]), "rmse_mean": r[2], "rmse_std": r[3]}
                     for r in rows],
            "epsilon": privacy.epsilon, "delta_dp": privacy.delta,
            "sensitivity": privacy.sensitivity}


def _bench_inducing(cfg, streams, out):
    data = dict(cfg["data"])
    X, y, X_star, y_star, _ = _classification_data(data, streams)
    if y_star is None:
        raise ConfigError("the inducing sweep needs labelled test data")
    privacy = _privacy({**cfg, "sensitivity": cfg.get("sensitivity") or 2.0})
    counts = [int(c) for c in cfg["inducing_counts"] if int(c) <= X.shape[0]]
    rows = []
    for count in counts:
        Z = kmeans_place(X, count, np.random.default_rng(streams["seed"])).Z
        for ls in cfg["lengthscales"]:
            theta = HyperConfig(float(ls), 1.0, 0.0)
            for dp in cfg["dp"]:
                pr = privacy if dp else PrivacySpec(math.inf, privacy.delta, privacy.sensitivity)
                draws = int(cfg["noise_draws"]) if dp else 1
                task = ClassifyTask(X, y, theta, pr, X_star=X_star, Z=Z,
                                    cloak_iterations=int(cfg["cloak_iterations"]))
                fit = fit_laplace(task, streams["noise"])
                accs = [accuracy(predict_latent(X_star, X, redraw(fit, pr, streams["noise"]),
                                                theta, Z=Z)[0], y_star)
                        for _ in range(draws)]
                rows.append([count, float(ls), int(bool(dp)), float(np.mean(accs)),
                             float(np.std(accs))])
    _write_csv(out / "table.csv", ["inducing", "lengthscale", "dp", "accuracy_mean",
                                   "accuracy_std"], rows)
    return {"rows": len(rows), "epsilon": privacy.epsilon, "delta_dp": privacy.delta}


COMMANDS = {"regress": run_regress, "classify": run_classify,
            "select-hypers": run_select, "bench": run_bench}


# ------------------------------------------------------------------ parsing

def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (64-bit unsigned)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sensitivity", type=float, help="data sensitivity d")
    p.add_argument("--sparse", type=int, metavar="M", help="number of inducing inputs")
    p.add_argument("--privacy-mode", action=argparse.BooleanOptionalAction, default=None,
                   help="suppress clean (non-private) outputs; on by default")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="dpgp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("regress", parents=[common], help="DP GP regression")
    r.add_argument("--gibbs", action="store_true", help="variable-lengthscale kernel")
    c = sub.add_parser("classify", parents=[common], help="DP GP classification")
    c.add_argument("--iterations", type=int, help="Newton iterations (budget split)")
    s = sub.add_parser("select-hypers", parents=[common], help="DP hyperparameter selection")
    s.add_argument("--kappa", type=int)
    b = sub.add_parser("bench", parents=[common], help="RMSE or inducing-count benchmarks")
    b.add_argument("--kind", choices=["rmse", "inducing"])
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS[args.command])
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} does not exist")
        try:
            loaded = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, loaded)
    cfg.setdefault("seed", None)
    cfg.setdefault("privacy_mode", True)
    for key in ("epsilon", "delta", "sensitivity", "sparse", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.privacy_mode is not None:
        cfg["privacy_mode"] = args.privacy_mode
    if getattr(args, "gibbs", False):
        cfg["gibbs"] = True
    if getattr(args, "iterations", None) is not None:
        cfg["newton_iterations"] = args.iterations
    if getattr(args, "kappa", None) is not None:
        cfg["kappa"] = args.kappa
    if getattr(args, "kind", None) is not None:
        cfg["kind"] = args.kind
    seed = cfg.get("seed")
    if seed is None:
        if cfg["privacy_mode"]:
            raise ConfigError("--seed is required in privacy mode")
        seed = int(np.random.SeedSequence().entropy % 2 ** 64)
        cfg["seed"] = seed
    if not 0 <= int(seed) < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return cfg


def make_streams(seed: int) -> dict:
    """Independent generators for data, inducing placement, noise and sweeps."""
    ss = np.random.SeedSequence(int(seed))
    data, inducing, noise, sweep = ss.spawn(4)
    return {"seed": ss.spawn(1)[0], "data": np.random.default_rng(data),
            "inducing": np.random.default_rng(inducing), "noise": np.random.default_rng(noise),
            "sweep": np.random.default_rng(sweep)}


def run(cfg: dict, command: str, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    streams = make_streams(cfg["seed"])
    payload = COMMANDS[command](cfg, streams, out)
    payload.update({"command": command, "seed": int(cfg["seed"]), "config": cfg})
    _write_json(out / "results.json", payload)
    return payload


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        cfg["command"] = args.command
        run(cfg, args.command, args.out)
    except NumericalError as exc:
        print(f"dpgp: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dpgp: invalid configuration or input: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
