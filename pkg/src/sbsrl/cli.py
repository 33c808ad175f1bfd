"""Command-line front end: run experiments, compute sample budgets, plot and compare.

Exit codes: 0 success, 2 configuration or input error, 3 runtime abort,
4 wall-clock budget exceeded. Partial results are written before a non-zero exit.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from pathlib import Path

from . import __version__
from .config import get, load_flat, build_run_config
from .kernel_gp import KernelSpec, NumericalError
from .envs import DomainError
from .loop import ConfigError, RunAbort, RunConfig, sbsrl_run
from .plots import bars_svg, curves_svg
from .sampler import BudgetInputs, SmallBallConfig, sample_budget, small_ball_exponent

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_BUDGET = 0, 2, 3, 4

CSV_COLUMNS = ("seed", "episode", "j_r_true", "j_c_true", "max_inst_cost", "j_s_planned", "beta_n",
               "d_sigma_n", "delta_zeta", "feasible_safe", "feasible_explore", "terminated", "wall_time_s")


class BudgetExceeded(RuntimeError):
    pass


def parse_seeds(text: str) -> list:
    """'0,1,2', '0-4' or a mix such as '0-2,7'."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError as err:
            raise ConfigError(f"cannot parse seed list {text!r}") from err
    if not seeds:
        raise ConfigError("seed list is empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seed list contains duplicates")
    return seeds


def master_seed() -> int:
    raw = os.environ.get("SBSRL_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as err:
        raise ConfigError(f"SBSRL_SEED must be an integer, got {raw!r}") from err


def _num(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    v = float(v)
    if not math.isfinite(v):
        raise RunAbort(f"non-finite value {v} in episode log")
    return repr(v)


def log_row(seed: int, log) -> dict:
    return {
        "seed": seed, "episode": log.episode, "j_r_true": log.j_r_true, "j_c_true": log.j_c_true,
        "max_inst_cost": log.max_inst_cost, "j_s_planned": log.j_s_planned, "beta_n": log.beta_n,
        "d_sigma_n": log.d_sigma_n, "delta_zeta": log.delta_zeta, "feasible_safe": bool(log.feasible_safe),
        "feasible_explore": bool(log.feasible_explore), "terminated": bool(log.terminated),
        "wall_time_s": log.wall_time_s,
    }


def write_csv(path: Path, rows: list, extra_first: tuple = ()) -> None:
    cols = tuple(extra_first) + CSV_COLUMNS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] if c in extra_first else _num(r[c]) for c in cols])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def summarize(rows: list, results: dict, budget: float) -> dict:
    """Per-seed and total aggregates; every count is recomputable from the CSV rows."""
    seeds = {}
    for seed in sorted({r["seed"] for r in rows} | set(results)):
        mine = [r for r in rows if r["seed"] == seed]
        term = [r["episode"] for r in mine if r["terminated"]]
        res = results.get(seed)
        seeds[str(seed)] = {
            "episodes": len(mine),
            "violations": sum(1 for r in mine if float(r["j_c_true"]) > budget),
            "max_j_c_true": max((float(r["j_c_true"]) for r in mine), default=None),
            "termination_episode": term[0] if term else None,
            "reason": res.reason if res else "aborted",
            "final_reward": res.greedy_j_r if res and math.isfinite(res.greedy_j_r) else None,
            "final_cost": res.greedy_j_c if res and math.isfinite(res.greedy_j_c) else None,
            "M": res.M if res else None,
        }
    finals = [s["final_reward"] for s in seeds.values() if s["final_reward"] is not None]
    return {
        "version": __version__,
        "budget": budget,
        "seeds": seeds,
        "totals": {
            "rows": len(rows),
            "violations": sum(s["violations"] for s in seeds.values()),
            "terminated": sum(1 for s in seeds.values() if s["termination_episode"] is not None),
            "mean_final_reward": sum(finals) / len(finals) if finals else None,
        },
    }


def _run_one(cfg: RunConfig):
    return cfg.seed, sbsrl_run(cfg)


def run_seeds(cfgs: list, parallelism: int, deadline: float | None, rows_out: list, results: dict) -> None:
    """Run one config per seed; rows accumulate in ``rows_out`` even if a later seed fails."""
    def collect(seed, res):
        rows_out.extend(log_row(seed, l) for l in res.logs)
        results[seed] = res

    if parallelism <= 1 or len(cfgs) == 1:
        for cfg in cfgs:
            partial = []

            def sink(log, seed=cfg.seed, partial=partial):
                partial.append(log_row(seed, log))
                if deadline is not None and time.monotonic() > deadline:
                    rows_out.extend(partial)
                    partial.clear()
                    raise BudgetExceeded("wall-clock budget exceeded")

            try:
                res = sbsrl_run(cfg, sink)
            except BaseException:
                rows_out.extend(partial)
                raise
            rows_out.extend(partial)
            results[cfg.seed] = res
            if deadline is not None and time.monotonic() > deadline:
                raise BudgetExceeded("wall-clock budget exceeded")
        return
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(_run_one, cfg) for cfg in cfgs]
        for fut in futures:
            timeout = None if deadline is None else max(deadline - time.monotonic(), 0.0)
            try:
                seed, res = fut.result(timeout=timeout)
            except FutureTimeout as err:
                for f in futures:
                    f.cancel()
                raise BudgetExceeded("wall-clock budget exceeded") from err
            collect(seed, res)


def _finish(out: Path, rows: list, results: dict, budget: float, timing: bool,
            extra_first: tuple = (), name: str = "episodes.csv") -> dict:
    rows = sorted(rows, key=lambda r: tuple(str(r[c]) for c in extra_first) + (r["seed"], r["episode"]))
    write_csv(out / name, rows, extra_first)
    summary = summarize(rows, results, budget)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if timing:
        t = {str(s): r.info.get("timings", []) for s, r in sorted(results.items())}
        (out / "timing.json").write_text(json.dumps(t, indent=2) + "\n", encoding="utf-8")
    return summary


def _seed_list(args, flat: dict) -> list:
    if args.seeds:
        return parse_seeds(args.seeds)
    listed = get(flat, "run.seeds")
    if listed:
        return parse_seeds(",".join(str(s) for s in listed))
    return [get(flat, "run.seed")]


def _deadline(flat: dict, override) -> float | None:
    budget = override if override is not None else get(flat, "run.wall_clock_budget_s")
    return time.monotonic() + budget if budget and budget > 0 else None


def cmd_run(args) -> int:
    try:
        flat = load_flat(args.config)
        seeds = _seed_list(args, flat)
        ms = master_seed()
        cfgs = [build_run_config(flat, seed=s, master_seed=ms) for s in seeds]
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, results = [], {}
    code = EXIT_OK
    try:
        run_seeds(cfgs, args.parallelism, _deadline(flat, args.budget_s), rows, results)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        code = EXIT_CONFIG
    except BudgetExceeded as err:
        print(f"aborted: {err}", file=sys.stderr)
        code = EXIT_BUDGET
    except (RunAbort, NumericalError, DomainError, ArithmeticError) as err:
        print(f"runtime abort: {err}", file=sys.stderr)
        code = EXIT_RUNTIME
    summary = _finish(out, rows, results, cfgs[0].env.budget, cfgs[0].record_timing)
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    elif code == EXIT_OK:
        t = summary["totals"]
        print(f"{len(seeds)} seed(s), {t['rows']} rows, {t['violations']} violation(s); "
              f"wrote {out / 'episodes.csv'}")
    return code


def cmd_budget(args) -> int:
    try:
        if args.phi is not None:
            phi = float(args.phi)
        else:
            d_in = args.input_dim
            ls = args.lengthscale or [1.0] * d_in
            if len(ls) == 1:
                ls = ls * d_in
            kernel = KernelSpec(args.kernel, tuple(ls), args.variance)
            sb = SmallBallConfig(args.n_draws, args.n_grid, (args.lower,), (args.upper,), args.sb_seed)
            phi = small_ball_exponent(kernel, args.zeta, sb)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            M = sample_budget(BudgetInputs(args.delta, args.zeta, args.B, args.d_x, phi), cap=args.cap)
    except (ValueError, ConfigError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_CONFIG
    payload = {"M": M, "phi_hat": phi, "zeta": args.zeta, "delta": args.delta, "B": args.B,
               "d_x": args.d_x, "capped": bool(caught)}
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"M = {M}")
        print(f"phi_hat(zeta={args.zeta:g}) = {phi:.6g}")
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    return EXIT_OK


def _plot(csv_path, kind: str, out: Path, budget: float | None, group_key: str = "config") -> int:
    try:
        cols, rows = read_csv(csv_path)
    except FileNotFoundError:
        print(f"csv not found: {csv_path}", file=sys.stderr)
        return EXIT_CONFIG
    need = ["seed", "episode", "j_r_true", "j_c_true"] + ([group_key] if kind == "bars" else [])
    for c in need:
        if c not in cols:
            print(f"missing column: {c}", file=sys.stderr)
            return EXIT_CONFIG
    if budget is None:
        summary = Path(csv_path).with_name("summary.json")
        budget = json.loads(summary.read_text())["budget"] if summary.exists() else 0.0
    out.mkdir(parents=True, exist_ok=True)
    if kind == "curves":
        (out / "curves.svg").write_text(curves_svg(rows, budget), encoding="utf-8")
    else:
        groups = {}
        for r in rows:
            groups.setdefault(r[group_key], []).append(r)
        (out / "bars.svg").write_text(bars_svg(groups, budget), encoding="utf-8")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else Path(args.csv).parent
    return _plot(args.csv, args.kind, out, args.budget)


def _variants(name: str, flat: dict, ablation) -> list:
    out = [(name, flat), (f"{name}:mean-only", {**flat, "run.baseline": "mean-only"})]
    for v in ablation or ():
        out.append((f"{name}:dsigma={v:g}", {**flat, "algo.dsigma_mode": "fixed", "algo.dsigma_value": float(v)}))
    return out


def cmd_compare(args) -> int:
    try:
        ms = master_seed()
        jobs = []
        used = set()
        for path in args.config:
            flat = load_flat(path)
            name = get(flat, "run.name") or Path(path).stem
            base, k = name, 2
            while name in used:
                name, k = f"{base}#{k}", k + 1
            used.add(name)
            seeds = _seed_list(args, flat)
            ablation = args.dsigma if args.dsigma is not None else get(flat, "compare.dsigma_values")
            for vname, vflat in _variants(name, flat, ablation):
                jobs.append((vname, [build_run_config(vflat, seed=s, master_seed=ms) for s in seeds]))
        first = load_flat(args.config[0])
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    deadline = _deadline(first, args.budget_s)
    rows, results = [], {}
    code = EXIT_OK
    for vname, cfgs in jobs:
        part, res = [], {}
        try:
            run_seeds(cfgs, args.parallelism, deadline, part, res)
        except BudgetExceeded as err:
            print(f"aborted: {err}", file=sys.stderr)
            code = EXIT_BUDGET
        except (RunAbort, ArithmeticError) as err:
            print(f"runtime abort in {vname}: {err}", file=sys.stderr)
            code = EXIT_RUNTIME
        except ConfigError as err:
            print(f"config error in {vname}: {err}", file=sys.stderr)
            code = EXIT_CONFIG
        rows.extend({**r, "config": vname} for r in part)
        results.update({(vname, s): r for s, r in res.items()})
        if code != EXIT_OK:
            break
    budget = jobs[0][1][0].env.budget
    rows = sorted(rows, key=lambda r: (r["config"], r["seed"], r["episode"]))
    write_csv(out / "compare.csv", rows, ("config",))
    summary = {name: summarize([r for r in rows if r["config"] == name],
                               {s: r for (n, s), r in results.items() if n == name}, budget)
               for name, _ in jobs}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    groups = {}
    for name, _ in jobs:
        groups[name] = [r for r in rows if r["config"] == name]
    (out / "bars.svg").write_text(bars_svg(groups, budget), encoding="utf-8")
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbsrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment over seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seeds", help="e.g. 0,1,2 or 0-4 (default: run.seeds or run.seed)")
    r.add_argument("--parallelism", type=int, default=1)
    r.add_argument("--budget-s", type=float, default=None, help="wall-clock budget in seconds")
    r.add_argument("--json", action="store_true", help="print summary.json to stdout")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("budget", help="sample budget M and small-ball exponent estimate")
    b.add_argument("--delta", type=float, required=True)
    b.add_argument("--zeta", type=float, required=True)
    b.add_argument("--B", type=float, required=True)
    b.add_argument("--d-x", dest="d_x", type=int, default=1)
    b.add_argument("--kernel", default="se")
    b.add_argument("--lengthscale", type=float, nargs="+")
    b.add_argument("--variance", type=float, default=1.0)
    b.add_argument("--input-dim", type=int, default=1)
    b.add_argument("--lower", type=float, default=0.0)
    b.add_argument("--upper", type=float, default=1.0)
    b.add_argument("--n-draws", type=int, default=4000)
    b.add_argument("--n-grid", type=int, default=64)
    b.add_argument("--sb-seed", type=int, default=0)
    b.add_argument("--phi", type=float, default=None, help="use this exponent instead of estimating it")
    b.add_argument("--cap", type=int, default=10**6)
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_budget)

    pl = sub.add_parser("plot", help="render SVG charts from a CSV")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--kind", choices=("curves", "bars"), default="curves")
    pl.add_argument("--out")
    pl.add_argument("--budget", type=float, default=None, help="cost budget d (default: from summary.json)")
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("compare", help="run configs, their mean-only baselines and threshold ablations")
    c.add_argument("--config", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seeds")
    c.add_argument("--dsigma", type=float, nargs="*", default=None, help="fixed exploration thresholds to ablate")
    c.add_argument("--parallelism", type=int, default=1)
    c.add_argument("--budget-s", type=float, default=None)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
