"""Command-line entry point: ``rfdebias importance|explain|simulate``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_csv, load_titanic
from .explain import (Cover, cfc_forest, cover_prediction, node_values, shap_forest,
                      split_importance)
from .experiments import (NoisyConfig, StroblConfig, run_noisy, run_null_power,
                          run_null_split_bias, run_titanic)
from .forest import ForestParams, fit_forest
from .scoring import compute_scores, validate_method

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STUDIES = ("null", "power", "noisy", "splitbias", "titanic")

log = logging.getLogger("rfdebias")


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def metadata_header(config: dict) -> str:
    return (f"# tool=rfdebias version={__version__} seed={config.get('seed')} "
            f"config_hash={config_hash(config)}\n"
            f"# config={json.dumps(config, sort_keys=True, default=str)}\n")


class Outputs:
    """Tracks written files so a failed run can remove its partial outputs."""

    def __init__(self, outdir):
        self.outdir = Path(outdir)
        self.paths = []

    def write(self, name: str, text: str) -> Path:
        self.outdir.mkdir(parents=True, exist_ok=True)
        path = self.outdir / name
        path.write_text(text)
        self.paths.append(path)
        return path

    def remove(self):
        for p in self.paths:
            p.unlink(missing_ok=True)


def _safe(name: str) -> str:
    return name.replace(":", "-").replace(".", "p")


def _load(args):
    if args.label is None:
        return load_titanic(args.data, shuffle_ids=args.shuffle_ids, seed=args.seed)
    if not args.features:
        raise UsageError("--features is required together with --label")
    return load_csv(args.data, args.label, args.features.split(","))


def _params(args) -> ForestParams:
    return ForestParams(n_trees=args.trees, mtry=args.mtry, min_leaf=args.min_leaf,
                        max_depth=args.max_depth, seed=args.seed,
                        sample_fraction=args.sample_fraction)


def _base_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out", "jobs", "verbose")}
    cfg["data"] = None if args.data is None else str(args.data)
    return cfg


def _format_report(rep, fmt: str, header: str, config: dict) -> str:
    if fmt == "json":
        return json.dumps({"metadata": {"tool": "rfdebias", "version": __version__,
                                        "seed": config.get("seed"),
                                        "config_hash": config_hash(config), "config": config},
                           "report": rep.to_dict()}, indent=2, default=str) + "\n"
    return header + rep.to_csv()


def cmd_importance(args, out: Outputs) -> int:
    try:
        methods = [validate_method(m) for m in args.methods.split(",") if m]
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not methods:
        raise UsageError("no methods given")
    ds = _load(args)
    forest = fit_forest(ds, _params(args), n_jobs=args.jobs)
    config = _base_config(args)
    header = metadata_header(config)
    reports = compute_scores(forest, ds, methods, np.random.default_rng(args.seed))
    for m, rep in reports.items():
        if not np.all(np.isfinite(rep.scores)):
            raise NumericError(f"non-finite scores from {m}")
        out.write(f"importance_{_safe(m)}_{args.seed}.{args.format}",
                  _format_report(rep, args.format, header, config))
    return EXIT_OK


def cmd_explain(args, out: Outputs) -> int:
    ds = _load(args)
    forest = fit_forest(ds, _params(args), n_jobs=args.jobs)
    config = _base_config(args)
    header = metadata_header(config)
    build = cfc_forest if args.kind == "cfc" else shap_forest
    attr = build(forest, ds.features, Cover(args.cover), args.aggregate,
                 feature_names=ds.column_names)
    stem = f"{args.kind}_{args.cover}_{args.seed}"
    if args.format == "json":
        out.write(f"{stem}.json", json.dumps({"metadata": {"config": config,
                                                           "config_hash": config_hash(config)},
                                              "attributions": attr.to_dict()}) + "\n")
    else:
        out.write(f"{stem}.csv", header + f"# base_value_mean={attr.base_value.mean()!r}\n"
                  + attr.to_csv())
    if args.weighted or args.split != "all":
        rep = split_importance(attr, ds.labels, args.split, weighted=args.weighted,
                               normalize=args.normalize)
        out.write(f"{stem}_{rep.method}.{args.format}", _format_report(rep, args.format, header, config))
    if args.verify:
        pred = _leaf_prediction(forest, ds.features, Cover(args.cover), attr)
        lines = ["sample_id,prediction,base_plus_sum"]
        lines += [f"{i},{p!r},{q!r}" for i, p, q in zip(attr.sample_ids, pred, attr.prediction())]
        out.write(f"{stem}_predictions.csv", header + "\n".join(lines) + "\n")
        err = float(np.max(np.abs(pred - attr.prediction())))
        if err > 1e-9:
            raise NumericError(f"local accuracy violated: max error {err:.3g}")
        print(f"local accuracy ok (max error {err:.3g})")
    return EXIT_OK


def _leaf_prediction(forest, X, cover, attr):
    """Forest output computed from leaves only, averaged like ``attr``."""
    if attr.aggregate == "all":
        return cover_prediction(forest, X, cover)
    mask = (attr.membership == 0) if attr.aggregate == "oob" else (attr.membership > 0)
    leaf = np.stack([node_values(t, cover)[t.apply(X)] for t in forest.trees])
    return (mask * leaf).sum(axis=0) / mask.sum(axis=0)


def cmd_simulate(args, out: Outputs) -> int:
    config = _base_config(args)
    header = metadata_header(config)
    params = ForestParams(n_trees=args.trees, mtry=args.mtry, min_leaf=args.min_leaf,
                          max_depth=args.max_depth)
    if args.study == "splitbias":
        sizes = [int(s) for s in args.sizes.split(",")]
        res = run_null_split_bias(sizes, args.reps, np.random.default_rng(args.seed))
        res.seed = args.seed
    elif args.study == "noisy":
        cfg = NoisyConfig(reps=args.reps, seed=args.seed,
                          forest_params=replace(params, mtry=args.mtry or 3))
        res = run_noisy(cfg)
    elif args.study in ("null", "power"):
        cfg = StroblConfig(case=args.study, reps=args.reps, seed=args.seed,
                           forest_params=replace(params, mtry=args.mtry or 2))
        res = run_null_power(cfg)
    else:
        res = run_titanic(args.data, replace(params, mtry=args.mtry or 2),
                          seeds=range(args.seed, args.seed + args.reps),
                          shuffle_ids=args.shuffle_ids)
    stem = f"{res.study}_{args.seed}"
    out.write(f"{stem}.csv", header + res.to_csv())
    out.write(f"{stem}.json", res.to_json() + "\n")
    _print_summary(res)
    return EXIT_OK


def _print_summary(res):
    s = res.summary
    if res.study == "noisy":
        for m, v in s["auc"].items():
            print(f"{m:22s} AUC {v['mean']:.3f} +- {v['se']:.3f}")
    elif res.study == "splitbias":
        for n, v in s.items():
            print(f"N={n:>5s} dG {v['mean_dG']:.5f} +- {v['se_dG']:.5f} (target {v['target_dG']:.5f})"
                  f"  dG_hat {v['mean_dG_hat']:.5f} +- {v['se_dG_hat']:.5f}")
    else:
        for m, feats in s.items():
            key = "median" if "median" in next(iter(feats.values())) else "mean"
            print(f"{m:24s} " + " ".join(f"{f}={v[key]:+.4f}" for f, v in feats.items()))


def build_parser() -> argparse.ArgumentParser:
    env_out = os.environ.get("RFDEBIAS_OUTPUT_DIR", "out")
    env_jobs = int(os.environ.get("RFDEBIAS_JOBS", "1"))

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=env_out, help="output directory (env RFDEBIAS_OUTPUT_DIR)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--jobs", type=int, default=env_jobs, help="worker threads (env RFDEBIAS_JOBS)")
    common.add_argument("--trees", type=int, default=100)
    common.add_argument("--mtry", type=int, default=None)
    common.add_argument("--min-leaf", type=int, default=1)
    common.add_argument("--max-depth", type=int, default=None)
    common.add_argument("--sample-fraction", type=float, default=None,
                        help="subsample without replacement instead of bootstrapping")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="CSV file (default: bundled Titanic data); Titanic schema unless --label is given")
    data.add_argument("--label")
    data.add_argument("--features", help="comma-separated feature columns")
    data.add_argument("--shuffle-ids", action="store_true", help="Titanic: permute PassengerId")

    p = argparse.ArgumentParser(prog="rfdebias", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    imp = sub.add_parser("importance", parents=[common, data], help="global importance reports")
    imp.add_argument("--methods", default="mdi",
                     help="comma list: mdi, mdi_oob, mda, cfc, pg:<a>:<l>[:corrected], shap[_in|_oob][_w]")
    imp.set_defaults(func=cmd_importance)

    exp = sub.add_parser("explain", parents=[common, data], help="per-sample attributions")
    exp.add_argument("--kind", choices=("cfc", "shap"), default="cfc")
    exp.add_argument("--cover", choices=("inbag", "oob"), default="inbag")
    exp.add_argument("--aggregate", choices=("all", "inbag", "oob"), default="all")
    exp.add_argument("--split", choices=("all", "inbag", "oob"), default="all",
                     help="samples used for the global score")
    exp.add_argument("--weighted", action="store_true", help="multiply attributions by y")
    exp.add_argument("--normalize", action="store_true", help="scale global scores to max 1")
    exp.add_argument("--verify", action="store_true", help="check base + row sum = prediction")
    exp.set_defaults(func=cmd_explain)

    sim = sub.add_parser("simulate", parents=[common, data], help="reproduce a study")
    sim.add_argument("study", choices=STUDIES)
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--sizes", default="10,50,200", help="splitbias node sizes")
    sim.set_defaults(func=cmd_simulate)
    return p


DEFAULT_REPS = {"null": 50, "power": 50, "noisy": 100, "splitbias": 100_000, "titanic": 10}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "reps", 0) is None:
        args.reps = DEFAULT_REPS[args.study]
    out = Outputs(args.out)
    try:
        return args.func(args, out)
    except UsageError as e:
        out.remove()
        print(f"rfdebias: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        out.remove()
        print(f"rfdebias: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, ZeroDivisionError) as e:
        out.remove()
        print(f"rfdebias: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        out.remove()
        print(f"rfdebias: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
