"""Command-line interface: ``gmle-mix {fit,simulate,ci,probe-convergence}``.

Exit codes: 0 success, 2 bad input, 3 solver failure, 4 infeasible interval.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .ci import CiConvergenceError, CiInfeasibleError, confidence_interval
from .estimators import estimate_all
from .grid import ParameterGrid, build_product_grid, default_xi_range
from .models import BinomialStratumKernel, PoissonStratumKernel
from .npmle import AllZeroRowError, EmConfig
from .sim import CampaignConfig, GridConfig, binomial_thin, format_table, make_rng, run_config, weak_convergence_probe

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_INFEASIBLE = 0, 2, 3, 4
BUNDLED = ("table1", "table2", "table3", "table4")


class InputError(Exception):
    pass


def read_dataset(path) -> tuple[list[str], np.ndarray]:
    """Rows of (x, k) or (x, k, kappa) from a CSV with a stratum_id,x,k header."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        fields = [f.strip() for f in (reader.fieldnames or [])]
        missing = {"stratum_id", "x", "k"} - set(fields)
        if missing:
            raise InputError(f"{path}: header must contain stratum_id,x,k (missing {sorted(missing)})")
        reader.fieldnames = fields
        has_kappa = "kappa" in fields
        ids, rows, seen = [], [], set()
        for line, rec in enumerate(reader, start=2):
            sid = (rec["stratum_id"] or "").strip()
            try:
                vals = [int(rec[c]) for c in (("x", "k", "kappa") if has_kappa else ("x", "k"))]
            except (TypeError, ValueError):
                raise InputError(f"{path}, line {line}: x, k{', kappa' if has_kappa else ''} must be integers") from None
            x, k = vals[0], vals[1]
            if x < 0 or k < 0:
                raise InputError(f"{path}, line {line} (stratum {sid}): counts must be nonnegative")
            if x > k:
                raise InputError(f"{path}, line {line} (stratum {sid}): x={x} exceeds k={k}")
            if has_kappa and k > vals[2]:
                raise InputError(f"{path}, line {line} (stratum {sid}): k={k} exceeds kappa={vals[2]}")
            if sid in seen:
                raise InputError(f"{path}, line {line}: duplicate stratum_id {sid!r}")
            seen.add(sid)
            ids.append(sid)
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return ids, np.array(rows, dtype=np.int64)


def resolve_threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("GMLE_MIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"GMLE_MIX_THREADS must be an integer, got {env!r}") from None
    return 1


def make_model(name: str, kappa: int | None, data: np.ndarray):
    if name == "poisson":
        return PoissonStratumKernel(), data[:, :2]
    if name == "binomial":
        if data.shape[1] == 3:
            if kappa is not None and np.any(data[:, 2] != kappa):
                raise InputError("--kappa disagrees with the kappa column")
            kaps = np.unique(data[:, 2])
            if len(kaps) == 1:
                return BinomialStratumKernel(int(kaps[0])), data[:, :2]
            return BinomialStratumKernel(), data
        if kappa is None:
            raise InputError("the binomial model needs --kappa or a kappa column")
        if np.any(data[:, 1] > kappa):
            bad = int(np.flatnonzero(data[:, 1] > kappa)[0])
            raise InputError(f"data row {bad + 1}: k={data[bad, 1]} exceeds kappa={kappa}")
        return BinomialStratumKernel(kappa), data
    raise InputError(f"unknown model {name!r}; choose poisson or binomial")


def parse_grid(spec: str | None, model: str, data: np.ndarray) -> ParameterGrid:
    """``N`` (N x N over the default range) or ``lo:hi:n,lo:hi:n``."""
    spec = spec or "40"
    try:
        if ":" not in spec:
            count = int(spec)
            if model == "poisson":
                ranges = default_xi_range(data[:, :2])
            else:
                ranges = [(0.0, 1.0), (0.0, 1.0)]
            return build_product_grid([(lo, hi, count) for lo, hi in ranges])
        axes = []
        for part in spec.split(","):
            lo, hi, n = part.split(":")
            axes.append((float(lo), float(hi), int(n)))
        if len(axes) != 2:
            raise ValueError("two axes are required")
        return build_product_grid(axes)
    except ValueError as exc:
        raise InputError(f"bad --grid {spec!r}: {exc}") from None


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text + "\n")


def cmd_fit(args) -> int:
    ids, data = read_dataset(args.data)
    rng = make_rng(args.seed)
    if args.retain_prob is not None:
        try:
            thinned = binomial_thin(data[:, :2], args.retain_prob, rng)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        data = np.column_stack([thinned, data[:, 2:]]) if data.shape[1] == 3 else thinned
    kernel, obs = make_model(args.model, args.kappa, data)
    grid = parse_grid(args.grid, args.model, data)
    est = estimate_all(kernel, obs, grid, EmConfig(max_iters=args.iters))
    report = {
        "model": kernel.describe(),
        "seed": args.seed,
        "retain_prob": args.retain_prob,
        "grid": {"dims": list(grid.dims), "ranges": [list(r) for r in grid.ranges]},
        "n_strata": len(ids),
        **est.to_dict(),
    }
    for name, value in (("naive", est.naive), ("extreme-collapse", est.extreme_collapse)):
        print(f"{name:17s} {value:.6f}" if isinstance(value, float) else f"{name:17s} undefined ({value.reason})")
    print(f"{'gmle':17s} {est.gmle:.6f}")
    print(f"{'empty strata':17s} {est.empty_strata}")
    print(f"{'seed':17s} {args.seed}")
    _write(args.output, json.dumps(report, sort_keys=True, indent=1))
    if args.posterior_csv:
        with open(args.posterior_csv, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["stratum_id", "x", "k", "posterior_mean"])
            for sid, row, pm in zip(ids, data, est.posterior_means):
                out.writerow([sid, int(row[0]), int(row[1]), repr(float(pm))])
    return EXIT_OK


def load_campaign(name: str) -> CampaignConfig:
    try:
        if name in BUNDLED and not Path(name).exists():
            text = resources.files("gmle_mix").joinpath("configs", f"{name}.json").read_text()
            return CampaignConfig.from_dict(json.loads(text))
        return CampaignConfig.load(name)
    except OSError as exc:
        raise InputError(f"cannot read config {name}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"config {name}: {exc!r}") from None


def cmd_simulate(args) -> int:
    workers = resolve_threads(args.threads)
    for name in args.configs:
        config = load_campaign(name)
        if args.iters is not None:
            config = CampaignConfig(config.name, config.model, config.rows, config.replications, config.seed,
                                    config.grid, EmConfig(max_iters=args.iters), config.naive_skip_empty)
        results = run_config(config, workers=workers, replications=args.reps, seed=args.seed)
        seed = config.seed if args.seed is None else args.seed
        print(format_table(results, f"{config.name} (seed {seed}, {results[0].replications} replications)"))
        print()
        if args.output:
            out = Path(args.output)
            out.mkdir(parents=True, exist_ok=True)
            payload = {"name": config.name, "seed": seed, "rows": [r.to_dict() for r in results]}
            (out / f"{config.name}.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
            (out / f"{config.name}.txt").write_text(format_table(results, config.name) + "\n")
    return EXIT_OK


def cmd_ci(args) -> int:
    _, data = read_dataset(args.data)
    kernel, obs = make_model(args.model, args.kappa, data)
    if isinstance(kernel, BinomialStratumKernel) and kernel.kappa is None:
        raise InputError("the interval needs a single kappa for all strata")
    if not 0.0 < args.alpha < 1.0:
        raise InputError("--alpha must lie strictly between 0 and 1")
    grid = parse_grid(args.grid, args.model, data)
    result = confidence_interval(kernel, obs, grid, args.alpha)
    print(result.summary())
    _write(args.output, result.to_json())
    return EXIT_OK


def _parse_pairs(text: str) -> list[tuple[float, float]]:
    try:
        pairs = [tuple(float(v) for v in part.split(",")) for part in text.split(";")]
    except ValueError:
        raise InputError(f"bad theta list {text!r}; use a,b;c,d") from None
    if any(len(p) != 2 for p in pairs):
        raise InputError(f"bad theta list {text!r}; use a,b;c,d")
    return pairs


def cmd_probe(args) -> int:
    model = {"poisson": "poisson_sizes", "binomial": "binomial_sizes"}.get(args.model)
    if model is None:
        raise InputError(f"unknown model {args.model!r}")
    thetas = _parse_pairs(args.thetas)
    try:
        schedule = [int(v) for v in args.n.split(",")]
    except ValueError:
        raise InputError(f"bad --n {args.n!r}") from None
    grid = None
    if args.grid:
        try:
            grid = GridConfig.parse([tuple(p.split(":")) for p in args.grid.split(",")])
        except ValueError as exc:
            raise InputError(f"bad --grid {args.grid!r}: {exc}") from None
    try:
        points = weak_convergence_probe(thetas, model, grid, schedule, make_rng(args.seed),
                                        EmConfig(max_iters=args.iters), kappa=args.kappa)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    print(f"{'n':>7s}  {'discrepancy':>12s}  {'mean functional':>15s}")
    for pt in points:
        print(f"{pt.n:7d}  {pt.discrepancy:12.6f}  {pt.mean_discrepancy:15.6f}")
    _write(args.output, json.dumps(
        {"seed": args.seed, "points": [{"n": p.n, "discrepancy": p.discrepancy, "by_functional": p.by_functional} for p in points]},
        sort_keys=True, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmle-mix", description="Grid GMLE estimates for stratified count data")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("data", help="CSV with header stratum_id,x,k (optional kappa column)")
        p.add_argument("--model", choices=["poisson", "binomial"], default="poisson")
        p.add_argument("--kappa", type=int, help="design sample size for the binomial model")
        p.add_argument("--grid", help="N for an N x N grid on the default range, or lo:hi:n,lo:hi:n")
        p.add_argument("--output", help="write the JSON report here")

    p = sub.add_parser("fit", help="naive, extreme-collapse and GMLE estimates")
    data_args(p)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--retain-prob", type=float, help="thin every sampled individual with this keep probability first")
    p.add_argument("--posterior-csv", help="write per-stratum posterior means here")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ci", help="likelihood-ratio interval for the mean proportion")
    data_args(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("simulate", help="run simulation campaigns")
    p.add_argument("configs", nargs="+", help=f"campaign JSON files or bundled names {', '.join(BUNDLED)}")
    p.add_argument("--reps", type=int, help="override the replication count")
    p.add_argument("--seed", type=int, help="override the campaign seed")
    p.add_argument("--iters", type=int, help="override the EM iteration count")
    p.add_argument("--threads", type=int, help="worker threads (default: GMLE_MIX_THREADS or 1)")
    p.add_argument("--output", help="directory for JSON and text tables")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("probe-convergence", help="fitted vs empirical mixing law along a schedule of n")
    p.add_argument("--model", choices=["poisson", "binomial"], default="poisson")
    p.add_argument("--thetas", default="0.8,1.2;0.6,0.4", help="thetas as a,b;c,d")
    p.add_argument("--n", default="100,400,1600", help="comma-separated sample sizes")
    p.add_argument("--kappa", type=int)
    p.add_argument("--grid", help="lo:hi:n,lo:hi:n")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CiInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AllZeroRowError, CiConvergenceError, RuntimeError, FloatingPointError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
