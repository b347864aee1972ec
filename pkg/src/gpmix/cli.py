"""Command-line workbench: ``gpmix {fit,cv,simulate,bench,diagnose}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from sklearn.decomposition import PCA

from .bench import SAMPLER_COLUMNS, bench_linalg, bench_sampler, simulate_component
from .chain import SAMPLERS, RunConfig, effective_sample_size, gelman_rubin, run_chains, summarise
from .cv import cross_validate
from .data import DatasetError, load_dataset, save_dataset, simulate
from .hyper import HyperPrior
from .linalg import NotPositiveDefiniteError
from .mixture import MARGINALISED, SAMPLED_FUNCTION, DirichletConfig

log = logging.getLogger("gpmix")

SCHEMA = 1
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _floats(text):
    return [float(v) for v in text.split(",")]


def _add_run_flags(p, iterations=20000, burnin=10000):
    g = p.add_argument_group("sampler")
    g.add_argument("--iterations", type=int, default=iterations)
    g.add_argument("--burnin", type=int, default=burnin)
    g.add_argument("--thin", type=int, default=5)
    g.add_argument("--hyper-every", type=int, default=5, help="hyperparameter refresh interval")
    g.add_argument("--sampler", choices=SAMPLERS, default="hmc")
    g.add_argument("--mode", choices=(SAMPLED_FUNCTION, MARGINALISED), default=SAMPLED_FUNCTION)
    g.add_argument("--chains", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prior-mean", type=_floats, default=[0.0], help="one value or three, comma separated")
    g.add_argument("--prior-sd", type=_floats, default=[1.0])
    g.add_argument("--alpha", type=float, default=1.0, help="Dirichlet concentration")
    g.add_argument("--no-outlier", action="store_true", help="drop the outlier component")
    g.add_argument("--jobs", type=int, default=-1, help="parallel workers for chains")


def _add_data_flags(p):
    p.add_argument("data", type=Path, help="CSV with header id,f1..fD,marker")
    p.add_argument("--center", action="store_true", help="subtract the global mean profile")


def _run_config(args) -> RunConfig:
    def vec(v):
        return v[0] if len(v) == 1 else v

    return RunConfig(
        iterations=args.iterations,
        burnin=args.burnin,
        thin=args.thin,
        hyper_update_every=args.hyper_every,
        sampler=args.sampler,
        chains=args.chains,
        seed=args.seed,
        mode=args.mode,
        prior=HyperPrior(vec(args.prior_mean), vec(args.prior_sd)),
        dirichlet=DirichletConfig(args.alpha),
        outlier=not args.no_outlier,
        n_jobs=args.jobs,
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_json(path, payload):
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_echo(config: RunConfig):
    d = asdict(config)
    d.pop("n_jobs")
    return d


def cmd_fit(args):
    ds = load_dataset(args.data, center=args.center)
    config = _run_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    records = run_chains(ds, config)
    s = summarise(records)
    names = ds.niche_names
    pred = np.array(names)[np.argmax(s.localisation, axis=1)]

    with (out / "allocation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "marker", *(f"p_{n}" for n in names), "p_outlier", "entropy", "prediction"])
        for i in range(ds.N):
            w.writerow([ds.ids[i], ds.labels[i], *(repr(float(v)) for v in s.allocation[i]),
                        repr(float(s.entropy[i])), pred[i]])

    coords = PCA(n_components=2, svd_solver="full").fit_transform(ds.X)
    with (out / "pca.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "pc1", "pc2", "marker", "prediction", "p_outlier"])
        for i in range(ds.N):
            w.writerow([ds.ids[i], repr(float(coords[i, 0])), repr(float(coords[i, 1])), ds.labels[i], pred[i],
                        repr(float(s.allocation[i, -1]))])

    hypers = {
        name: {
            "mean": s.hyper_mean[k],
            "lower95": s.hyper_lower[k],
            "upper95": s.hyper_upper[k],
        }
        for k, name in enumerate(names)
    }
    _write_json(out / "summary.json", {
        "schema": SCHEMA,
        "config": _config_echo(config),
        "data": {"path": str(args.data), "N": ds.N, "D": ds.D, "niches": names, "centered": args.center},
        "hyperparameters": hypers,
        "eps_mean": s.eps_mean,
        "pi_mean": dict(zip(names, s.pi_mean)),
        "rhat": {k: {"rhat": v[0], "upper95": v[1]} for k, v in s.rhat.items()},
        "ess": s.ess,
        "hyper_acceptance": [r.hyper_accept for r in records],
        "numerical_warnings": sum(r.warnings for r in records),
    })
    np.savez(out / "traces.npz", theta=np.array([r.theta for r in records]), eps=np.array([r.eps for r in records]),
             niches=np.array(names))
    _write_json(out / "timing.json", {
        "schema": SCHEMA,
        "total_seconds": time.perf_counter() - t0,
        "chain_seconds": [r.wall_seconds for r in records],
        "ess_per_second": s.ess_per_second,
    })
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_cv(args):
    ds = load_dataset(args.data, center=args.center)
    config = _run_config(args)
    t0 = time.perf_counter()
    rep = cross_validate(ds, config, splits=args.splits, seed=args.seed, test_fraction=args.test_fraction,
                         include_unlabelled=args.include_unlabelled, permute_test=args.permute_test,
                         n_jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "cv.json", {
        "schema": SCHEMA,
        "config": _config_echo(config),
        "splits": args.splits,
        "test_fraction": args.test_fraction,
        "permute_test": args.permute_test,
        "losses": rep.losses,
        "median_loss": rep.median,
        "split_seeds": [str(s) for s in rep.seeds],
        "test_sizes": rep.test_sizes,
    })
    _write_json(args.out / "timing.json", {
        "schema": SCHEMA, "total_seconds": time.perf_counter() - t0, "split_seconds": rep.seconds,
    })
    print(f"median quadratic loss {rep.median:.6g} over {args.splits} splits")
    return EXIT_OK


def cmd_simulate(args):
    theta = np.array(args.theta, dtype=float)
    if theta.size == 3 * args.K:
        theta = theta.reshape(args.K, 3)
    elif theta.size != 3:
        raise ValueError(f"--theta needs 3 or 3*K values, got {theta.size}")
    ds, truth = simulate(args.K, args.D, args.n_per, theta, args.eps, args.seed,
                         marker_fraction=args.marker_fraction, marker_selection=args.marker_selection)
    save_dataset(ds, args.out)
    if args.truth is not None:
        with args.truth.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "component", "outlier"])
            for pid, z, o in zip(ds.ids, truth.z, truth.outlier):
                w.writerow([pid, ds.niche_names[z], int(o)])
    return EXIT_OK


def cmd_bench(args):
    t0 = time.perf_counter()
    if args.suite == "linalg":
        rows = bench_linalg(tuple(args.dims), n=args.n, seed=args.seed)
        for r in rows:
            dense = "refused" if r["dense_refused"] else f"{r['dense_seconds']:.3e}"
            print(f"D={r['D']:5d} n={r['n']:3d} fast={r['fast_seconds']:.3e}s dense={dense}")
    else:
        data = simulate_component(n=args.n, D=args.dims[0], seed=args.seed)
        rows = bench_sampler(data, mh_iterations=args.mh_iterations, hmc_iterations=args.hmc_iterations,
                             seed=args.seed)
        print("\t".join(SAMPLER_COLUMNS))
        for r in rows:
            print("\t".join(f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in SAMPLER_COLUMNS))
    if args.out is not None:
        _write_json(args.out, {"schema": SCHEMA, "suite": args.suite, "rows": rows,
                               "total_seconds": time.perf_counter() - t0})
    return EXIT_OK


def cmd_diagnose(args):
    with np.load(args.traces) as f:
        theta, eps, niches = f["theta"], f["eps"], f["niches"]
    scalars = {}
    for k, name in enumerate(niches):
        for j in range(3):
            scalars[f"theta{j + 1}[{name}]"] = theta[:, :, k, j]
    scalars["eps"] = eps
    rows = {}
    for name, chains in scalars.items():
        r = gelman_rubin(chains) if chains.shape[1] >= 4 else (math.nan, math.nan)
        ess = sum(effective_sample_size(c)[0] for c in chains) if chains.shape[1] >= 4 else math.nan
        rows[name] = {"rhat": r[0], "upper95": r[1], "ess": ess}
        print(f"{name:24s} rhat={r[0]:.4f} upper95={r[1]:.4f} ess={ess:.1f}")
    if args.out is not None:
        _write_json(args.out, {"schema": SCHEMA, "diagnostics": rows})
    bad = [n for n, v in rows.items() if not v["rhat"] < args.threshold]
    if bad:
        print(f"{len(bad)} scalar(s) at or above R-hat {args.threshold} (or undefined)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpmix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="run the sampler and write allocations and summaries")
    _add_data_flags(p)
    _add_run_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="repeated stratified 80/20 hold-out with quadratic loss")
    _add_data_flags(p)
    _add_run_flags(p, iterations=10000, burnin=1000)
    p.add_argument("--splits", type=int, default=100)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--include-unlabelled", action="store_true")
    p.add_argument("--permute-test", action="store_true", help="negative control: shuffle test profiles")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--D", type=int, default=8)
    p.add_argument("--n-per", type=int, default=50)
    p.add_argument("--theta", type=_floats, default=[0.5, 0.0, -1.5], help="3 or 3*K log hyperparameters")
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--marker-fraction", type=float, default=0.3)
    p.add_argument("--marker-selection", choices=("random", "low_noise"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth", type=Path, help="also write hidden components and outlier flags")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="linear-algebra or sampler benchmark")
    p.add_argument("--suite", choices=("linalg", "sampler"), default="linalg")
    p.add_argument("--dims", type=int, nargs="+", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--mh-iterations", type=int, default=10000)
    p.add_argument("--hmc-iterations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diagnose", help="R-hat and ESS from a fit's traces.npz")
    p.add_argument("traces", type=Path)
    p.add_argument("--threshold", type=float, default=1.1)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "bench":
        if args.dims is None:
            args.dims = [16, 64, 128, 256, 512] if args.suite == "linalg" else [10]
        if args.n is None:
            args.n = 10 if args.suite == "linalg" else 50
    try:
        return args.func(args)
    # LinAlgError subclasses ValueError, so it must be caught first
    except (NotPositiveDefiniteError, np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
