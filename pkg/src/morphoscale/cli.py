"""``morphoscale`` command line.

Exit status: 0 on success, 1 on validation or data errors, 2 on usage
errors. Every subcommand echoes its resolved configuration as one JSON line
on stderr; results go to stdout or to the paths named in flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from morphoscale import dirmult, gp, oracles, runstore, scalefit, toytrain, votesim
from morphoscale.demo import demo_campaigns
from morphoscale.schema import SchemaError, build_global_index, dumps_campaigns, load_campaigns, validate_campaign

log = logging.getLogger("morphoscale")

DEFAULT_SEED = 0


class DataError(Exception):
    pass


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _write_text(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _log_base(value: str) -> float:
    if value in ("e", "ln"):
        return math.e
    try:
        base = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"log base must be a number or 'e', got {value!r}") from None
    if base <= 0 or base == 1:
        raise argparse.ArgumentTypeError("log base must be positive and not 1")
    return base


# -- plot data -------------------------------------------------------------------

def emit_plot_data(
    samples: np.ndarray,
    dataset_sizes: Sequence[float],
    log_base: float = 10.0,
    predictive_sigma: float | None = None,
    rng: np.random.Generator | None = None,
) -> list[dict]:
    """Median and (5%, 95%) band of the fitted line at each dataset size.

    With ``predictive_sigma`` set, Normal(0, sigma) noise is added to every
    sample so the band is the posterior predictive one.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise DataError("need a nonempty set of posterior samples")
    sizes = np.asarray(dataset_sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes < 1):
        raise DataError("dataset sizes must be >= 1")
    if np.any(np.diff(sizes) <= 0):
        raise DataError("dataset sizes must be strictly increasing")
    if predictive_sigma is not None and rng is None:
        rng = np.random.default_rng(DEFAULT_SEED)
    rows = []
    for n in sizes:
        values = samples[:, 0] * float(scalefit.log_size(n, log_base)) + samples[:, 1]
        if predictive_sigma:
            values = values + predictive_sigma * rng.standard_normal(values.size)
        q05, q50, q95 = np.quantile(values, [0.05, 0.5, 0.95])
        rows.append({"dataset_size": float(n), "predicted_median": float(q50), "q05": float(q05), "q95": float(q95)})
    return rows


def size_grid(n_min: float, n_max: float, n_points: int) -> np.ndarray:
    if n_points < 1:
        raise DataError("grid needs at least one point")
    if n_points == 1:
        return np.array([float(n_min)])
    if not 1 <= n_min < n_max:
        raise DataError("need 1 <= n_min < n_max")
    return np.geomspace(n_min, n_max, n_points)


def plot_rows_to_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["dataset_size", "predicted_median", "q05", "q95"])
    for r in rows:
        w.writerow([repr(r["dataset_size"]), repr(r["predicted_median"]), repr(r["q05"]), repr(r["q95"])])
    return out.getvalue()


# -- subcommands -----------------------------------------------------------------

def cmd_schema_validate(args) -> int:
    campaigns = load_campaigns(args.file)
    problems = []
    seen = set()
    for c in campaigns:
        if c.id in seen:
            problems.append(f"{c.id}: duplicate-campaign: campaign id declared more than once")
        seen.add(c.id)
        report = validate_campaign(c)
        problems.extend(f"{c.id}: {v}" for v in report.violations)
    if problems:
        for p in problems:
            print(p)
        return 1
    print("ok")
    return 0


def cmd_schema_demo(args) -> int:
    _write_text(dumps_campaigns(demo_campaigns()), args.out)
    return 0


def cmd_simulate(args) -> int:
    campaigns = load_campaigns(args.schema)
    index = build_global_index(campaigns)
    if args.truth:
        truths = votesim.read_truths(args.truth)
    else:
        rng = np.random.default_rng(args.seed)
        truths = []
        for c in campaigns:
            truths.extend(votesim.random_truths(c, args.random_truths, rng, concentration=args.concentration))
    config = votesim.SimulationConfig(
        volunteers_at_root=args.n_volunteers,
        seed=args.seed,
        rho_mode=args.rho_mode,
        volunteer_range=tuple(args.volunteer_range) if args.volunteer_range else None,
    )
    galaxies = votesim.sample_dataset(campaigns, truths, config, index)
    votesim.write_votes(galaxies, index, args.out)
    truth_out = args.truth_out or f"{args.out}.truth.jsonl"
    votesim.write_truths(truths, truth_out)
    if args.features_out:
        rng = np.random.default_rng([args.seed, 1])
        X = toytrain.make_features(truths, index, rng, noise=args.feature_noise)
        with open(args.features_out, "w", encoding="utf-8") as fh:
            for t, x in zip(truths, X):
                fh.write(json.dumps({"galaxy_id": t.galaxy_id, "features": [float(v) for v in x]}, sort_keys=True) + "\n")
    print(json.dumps({"galaxies": len(galaxies), "votes": args.out, "truth": truth_out}, sort_keys=True))
    return 0


def _read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _alpha_vectors(records: list[dict], galaxies, index) -> np.ndarray:
    by_id = {str(r["galaxy_id"]): r for r in records}
    out = np.ones((len(galaxies), index.size))
    for i, g in enumerate(galaxies):
        rec = by_id.get(g.galaxy_id)
        if rec is None:
            raise DataError(f"no concentrations for galaxy {g.galaxy_id!r}")
        values = rec.get("alpha", rec.get("alpha_star"))
        if values is None:
            raise DataError(f"record for {g.galaxy_id!r} has neither 'alpha' nor 'alpha_star'")
        if isinstance(values, list):
            if len(values) != index.size:
                raise DataError(f"global alpha for {g.galaxy_id!r} has length {len(values)}, expected {index.size}")
            out[i] = values
            continue
        cid = rec.get("campaign_id", g.campaign_id)
        for qid, vec in values.items():
            sl = index.slice_of(cid, qid)
            if len(vec) != sl.stop - sl.start:
                raise DataError(f"alpha for {g.galaxy_id!r}/{qid} has {len(vec)} values, expected {sl.stop - sl.start}")
            out[i, sl] = vec
    return out


def cmd_loss(args) -> int:
    campaigns = load_campaigns(args.schema)
    index = build_global_index(campaigns)
    galaxies = votesim.read_votes(args.votes, index)
    alpha = _alpha_vectors(_read_jsonl(args.alpha), galaxies, index)
    include = not args.no_coefficient
    rows = []
    for g, a in zip(galaxies, alpha):
        per_q = dirmult.per_question_log_likelihood(g.K, a, index, include)
        rows.append(
            {
                "galaxy_id": g.galaxy_id,
                "campaign_id": g.campaign_id,
                "per_question": {f"{c}/{q}": v for (c, q), v in per_q.items() if c == g.campaign_id},
                "total": math.fsum(per_q.values()),
            }
        )
    doc = {
        "galaxies": rows,
        "include_coefficient": include,
        "mean_nll": -math.fsum(r["total"] for r in rows) / len(rows) if rows else None,
    }
    _write_text(_dump(doc), args.out)
    return 0


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.n_cases):
        n_answers = int(rng.integers(2, 6))
        alpha = rng.uniform(0.1, 50.0, n_answers)
        N = int(rng.integers(1, 81))
        k = rng.multinomial(N, rng.dirichlet(np.ones(n_answers)))
        analytic = dirmult.grad_log_dirmult(k, alpha)
        numeric = oracles.fd_gradient(k, alpha)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-300)
        worst = max(worst, float(rel.max()))
    passed = worst <= args.tolerance
    print(json.dumps({"cases": args.n_cases, "max_rel_error": worst, "tolerance": args.tolerance, "passed": passed}, sort_keys=True))
    return 0 if passed else 1


def _fit_doc(fit: scalefit.ScalingFit, seed: int) -> dict:
    doc = fit.to_dict()
    doc["seed"] = seed
    return doc


def cmd_fit_scaling(args) -> int:
    table = runstore.parse_runs(args.runs)
    if not table.runs:
        raise DataError(f"{args.runs}: no runs")
    sigma = args.sigma
    if sigma is None:
        sigma = scalefit.estimate_noise_sigma(table.runs)
        if sigma <= 0:
            raise DataError("estimated sigma is zero; pass --sigma explicitly")
    config = scalefit.SamplerConfig(
        walkers=args.walkers, steps=args.steps, burn_in_fraction=args.burn_in_fraction, seed=args.seed
    )
    prior = scalefit.FlatPrior(tuple(args.m_range), tuple(args.b_range))
    groups = scalefit.group_runs(table.runs, args.group_by)
    fits = {
        name: scalefit.fit_scaling_law(runs, sigma, prior, config, log_base=args.log_base)
        for name, runs in groups.items()
    }
    if args.group_by == "none":
        fit = fits["all"]
        doc = _fit_doc(fit, args.seed)
        if args.samples_out:
            scalefit.write_samples(fit.samples, args.samples_out)
    else:
        doc = {"group_by": args.group_by, "groups": {name: _fit_doc(f, args.seed) for name, f in fits.items()}}
        if args.samples_out:
            stem = Path(args.samples_out)
            for name, f in fits.items():
                safe = name.replace("/", "_")
                scalefit.write_samples(f.samples, stem.with_name(f"{stem.stem}.{safe}{stem.suffix}"))
    _write_text(_dump(doc), args.out)
    for name, f in fits.items():
        log.info("%s: %s", name, scalefit.format_summary(f.summary))
    return 0


def cmd_predict(args) -> int:
    if args.samples:
        samples = scalefit.read_samples(args.samples)
        result = scalefit.posterior_predictive(
            samples, args.n, args.sigma, np.random.default_rng(args.seed), args.log_base
        )
        doc = {
            "dataset_size": result.dataset_size,
            "mean": result.mean,
            "median": result.median,
            "q05": result.q05,
            "q95": result.q95,
            "sigma": args.sigma,
        }
        _write_text(_dump(doc), None)
        return 0
    if args.m is None or args.b is None:
        raise DataError("predict needs either --samples or both --m and --b")
    if args.n < 1:
        raise DataError("--n must be >= 1")
    value = args.m * float(scalefit.log_size(args.n, args.log_base)) + args.b
    print(f"{value:.{args.digits}f}")
    return 0


def cmd_plot_data(args) -> int:
    try:
        samples = scalefit.read_samples(args.samples)
    except FileNotFoundError:
        raise DataError(f"fit samples file {args.samples!r} not found") from None
    grid = size_grid(args.n_min, args.n_max, args.n_points)
    rows = emit_plot_data(
        samples,
        grid,
        args.log_base,
        predictive_sigma=args.sigma if args.predictive else None,
        rng=np.random.default_rng(args.seed),
    )
    _write_text(plot_rows_to_csv(rows), args.out)
    return 0


def cmd_fit_gp(args) -> int:
    with open(args.points, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{args.points}: no points")
    x_raw = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    if args.x_units == "log10":
        if np.any(x_raw <= 0):
            raise DataError("log10 units need positive x values")
        x = np.log10(x_raw)
    else:
        x = x_raw
    kernel, lml = gp.select_hyperparameters(x, y, length_scale=args.length_scale)
    fit = gp.gp_fit(x, y, kernel, standardize=True)
    grid = np.linspace(x.min(), x.max(), args.grid_points)
    table = gp.band(fit, grid)
    if args.grid_out:
        with open(args.grid_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "mean", "lower2sigma", "upper2sigma"])
            for gx, mean, lo, hi in table:
                xv = 10**gx if args.x_units == "log10" else gx
                w.writerow([repr(float(xv)), repr(float(mean)), repr(float(lo)), repr(float(hi))])
    doc = {
        "length_scale": kernel.length_scale,
        "signal_variance": kernel.signal_variance,
        "noise_variance": kernel.noise_variance,
        "log_marginal_likelihood": lml,
        "x_units": args.x_units,
        "n_points": int(x.size),
    }
    _write_text(_dump(doc), None)
    return 0


def cmd_aggregate(args) -> int:
    table = runstore.parse_runs(args.runs)
    doc: dict = {"minmax": [r.as_dict() for r in runstore.aggregate_minmax(table)]}
    mapping = runstore.load_task_mapping(args.tasks) if args.tasks else None
    labels = list(args.task or [])
    if mapping is not None and not labels:
        labels = sorted(mapping)
    if labels:
        doc["tasks"] = {
            label: [r.as_dict() for r in runstore.aggregate_task_loss(table, label, mapping)] for label in labels
        }
    _write_text(_dump(doc), args.out)
    return 0


def cmd_train_toy(args) -> int:
    campaigns = load_campaigns(args.schema)
    index = build_global_index(campaigns)
    galaxies = votesim.read_votes(args.votes, index)
    features = {str(r["galaxy_id"]): r["features"] for r in _read_jsonl(args.features)}
    missing = [g.galaxy_id for g in galaxies if g.galaxy_id not in features]
    if missing:
        raise DataError(f"no features for {len(missing)} galaxies, e.g. {missing[0]!r}")
    X = np.array([features[g.galaxy_id] for g in galaxies], dtype=np.float64)
    K = np.stack([g.K for g in galaxies]) if galaxies else np.zeros((0, index.size))
    config = toytrain.TrainConfig(args.lr, args.epochs, args.batch_size, args.weight_decay, args.seed)
    head = toytrain.LinearHead.initialise(X.shape[1], index.size, np.random.default_rng([args.seed, 2]))
    try:
        result = toytrain.train(head, X, K, index, config)
    except toytrain.TrainingDiverged as exc:
        raise DataError(f"{exc} (last finite mean NLL {exc.last_finite_loss})") from None
    toytrain.save_head(result.head, args.out)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "mean_nll"])
    for epoch, value in result.trace:
        w.writerow([epoch, repr(value)])
    _write_text(out.getvalue(), args.trace_out)
    return 0


def cmd_synth_runs(args) -> int:
    rng = np.random.default_rng(args.seed)
    runs = scalefit.synthetic_runs(
        args.m, args.b, args.sigma, args.sizes, args.seeds, rng, args.family, args.variant, log_base=args.log_base
    )
    _write_text(runstore.emit_runs(runstore.table_from_runs(runs)), args.out)
    return 0


# -- parser ------------------------------------------------------------------------

def _add_seed(p):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphoscale", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("schema", help="campaign schema tools")
    schema_sub = p.add_subparsers(dest="schema_command", metavar="ACTION")
    pv = schema_sub.add_parser("validate", help="check a campaign schema file")
    pv.add_argument("file")
    pv.set_defaults(func=cmd_schema_validate)
    pd = schema_sub.add_parser("demo", help="write the built-in two-campaign example schema")
    pd.add_argument("--out")
    pd.set_defaults(func=cmd_schema_demo)

    p = sub.add_parser("simulate", help="simulate volunteer votes")
    p.add_argument("--schema", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--truth", help="ground-truth JSON-lines file")
    src.add_argument("--random-truths", type=int, metavar="N", help="draw N random ground truths per campaign")
    p.add_argument("--concentration", type=float, default=20.0, help="alpha_star scale for --random-truths")
    p.add_argument("--n-volunteers", type=int, default=40)
    p.add_argument("--volunteer-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--rho-mode", choices=["fixed", "sample"], default="fixed")
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.add_argument("--features-out")
    p.add_argument("--feature-noise", type=float, default=0.05)
    _add_seed(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("loss", help="Dirichlet-Multinomial log-likelihood of vote records")
    p.add_argument("--schema", required=True)
    p.add_argument("--votes", required=True)
    p.add_argument("--alpha", required=True, help="JSON-lines concentrations per galaxy")
    p.add_argument("--no-coefficient", action="store_true", help="drop the multinomial coefficient")
    p.add_argument("--out")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    p.add_argument("--n-cases", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-6)
    _add_seed(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("fit-scaling", help="ensemble-MCMC fit of loss vs log dataset size")
    p.add_argument("--runs", required=True)
    p.add_argument("--sigma", type=float, help="noise sigma (default: pooled seed scatter)")
    p.add_argument("--log-base", type=_log_base, default=10.0)
    p.add_argument("--walkers", type=int, default=32)
    p.add_argument("--steps", type=int, default=2500)
    p.add_argument("--burn-in-fraction", type=float, default=0.2)
    p.add_argument("--m-range", type=float, nargs=2, default=(-10.0, 10.0))
    p.add_argument("--b-range", type=float, nargs=2, default=(-100.0, 100.0))
    p.add_argument("--group-by", choices=["none", "family", "variant"], default="none")
    p.add_argument("--out")
    p.add_argument("--samples-out")
    _add_seed(p)
    p.set_defaults(func=cmd_fit_scaling)

    p = sub.add_parser("predict", help="predicted loss at a dataset size")
    p.add_argument("--m", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--n", type=float, required=True)
    p.add_argument("--log-base", type=_log_base, default=10.0)
    p.add_argument("--digits", type=int, default=3)
    p.add_argument("--samples", help="posterior samples CSV for a predictive distribution")
    p.add_argument("--sigma", type=float, default=scalefit.DEFAULT_SIGMA)
    _add_seed(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot-data", help="posterior band over a dataset-size grid")
    p.add_argument("--samples", required=True)
    p.add_argument("--n-min", type=float, required=True)
    p.add_argument("--n-max", type=float, required=True)
    p.add_argument("--n-points", type=int, default=50)
    p.add_argument("--log-base", type=_log_base, default=10.0)
    p.add_argument("--predictive", action="store_true", help="add observation noise to the band")
    p.add_argument("--sigma", type=float, default=scalefit.DEFAULT_SIGMA)
    p.add_argument("--out")
    _add_seed(p)
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("fit-gp", help="GP regression band with RBF + white-noise kernel")
    p.add_argument("--points", required=True, help="CSV with columns x,y")
    p.add_argument("--x-units", choices=["raw", "log10"], required=True, help="units in which the length scale applies")
    p.add_argument("--length-scale", type=float, default=gp.DEFAULT_LENGTH_SCALE)
    p.add_argument("--grid-points", type=int, default=100)
    p.add_argument("--grid-out")
    p.set_defaults(func=cmd_fit_gp)

    p = sub.add_parser("aggregate", help="min/mean/max test loss over seeds")
    p.add_argument("--runs", required=True)
    p.add_argument("--tasks", help="JSON mapping task label -> question columns")
    p.add_argument("--task", action="append", help="task label to aggregate (repeatable)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train-toy", help="train a linear head on simulated votes")
    p.add_argument("--schema", required=True)
    p.add_argument("--votes", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=2.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace-out")
    _add_seed(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("synth-runs", help="write synthetic run records from a known scaling law")
    p.add_argument("--m", type=float, default=-0.84)
    p.add_argument("--b", type=float, default=23.91)
    p.add_argument("--sigma", type=float, default=scalefit.DEFAULT_SIGMA)
    p.add_argument("--sizes", type=int, nargs="+", default=[61_500, 123_000, 246_000, 492_000])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--family", default="synthetic")
    p.add_argument("--variant", default="base")
    p.add_argument("--log-base", type=_log_base, default=10.0)
    p.add_argument("--out")
    _add_seed(p)
    p.set_defaults(func=cmd_synth_runs)

    return parser


def _resolved_config(args) -> dict:
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    return json.loads(json.dumps(doc, default=str))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not hasattr(args, "func"):
        if args.command == "schema":
            parser.error("schema needs an action, e.g. 'schema validate FILE'")
        parser.print_help(sys.stderr)
        return 2
    print("config: " + json.dumps(_resolved_config(args), sort_keys=True), file=sys.stderr)
    try:
        return args.func(args)
    except (DataError, SchemaError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
