"""Command-line front end: ``regimehedge {price,reproduce-tables,check,backtest,simulate}``.

Exit codes: 0 success, 2 configuration error, 3 arbitrage condition fails
(price without --force, and check), 4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from importlib import resources

import numpy as np

from . import bsref, hedging, lsmc, pide, validity
from .generator import sharpe_target
from .market import ModelError, load_model, simulate_paths

log = logging.getLogger("regimehedge")

EXIT_CONFIG, EXIT_ARBITRAGE, EXIT_SOLVER = 2, 3, 4
TABLE_SEEDS = {"table2": 20240001, "table3": 20240002, "table4": 20240003}
TABLE2_STRIKES = (80, 90, 100, 110, 120)
TABLE4_L = ((0.24, 0.04), (0.3, 0.1), (0.5, 0.3), (0.7, 0.5), (1.2, 1.2))
REFERENCE_TABLE2 = (24.561, 16.677, 10.381, 5.857, 2.928)
REFERENCE_TABLE4 = (9.827, 10.082, 10.660, 11.226, 13.168)


class ConfigError(Exception):
    pass


def _default_model_path() -> str:
    return str(resources.files("regimehedge") / "data" / "table1.json")


def _parse_L(text: str):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--L expects comma-separated numbers, got {text!r}") from None


def _parse_grid(text: str) -> pide.PideConfig:
    try:
        ns, nt = (int(v) for v in text.lower().replace(",", "x").split("x"))
        return pide.PideConfig(n_space=ns, n_time=nt)
    except ValueError:
        raise ConfigError(f"--grid expects NSPACExNTIME, got {text!r}") from None


def _load(args):
    path = args.model or _default_model_path()
    if not os.path.exists(path):
        raise ConfigError(f"model file not found: {path}")
    try:
        return load_model(path), path
    except (ModelError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid model {path}: {exc}") from None


def _lsmc_config(args) -> lsmc.LsmcConfig:
    try:
        return lsmc.LsmcConfig(n_paths=args.paths, n_steps=args.steps, degree=args.degree,
                               seed=args.seed, threads=args.threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _target(m, L):
    try:
        return sharpe_target(m, L)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_price(args) -> int:
    m, model_path = _load(args)
    try:
        claim = lsmc.parse_claim(args.claim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    L = _parse_L(args.L)
    target = _target(m, L)
    reports = validity.check_all(m, target.L)
    if reports["arbitrage"].verdict == "fail" and not args.force:
        print(validity.report_text(reports), file=sys.stderr)
        print("arbitrage condition fails; rerun with --force to price anyway", file=sys.stderr)
        return EXIT_ARBITRAGE
    out = _out_dir(args)
    result = {
        "model": os.path.basename(model_path),
        "claim": claim.label(),
        "L": target.L.tolist(),
        "method": args.method,
        "seed": args.seed,
        "conditions": {k: v.to_dict() for k, v in reports.items()},
    }
    start = time.perf_counter()
    if args.method == "lsmc":
        sol = lsmc.price_lsmc(m, claim, target, _lsmc_config(args), check=False)
        result.update(sol.summary())
        sol.to_csv(os.path.join(out, "solution.csv"))
    else:
        grid = pide.price_pide(m, claim, target, _parse_grid(args.grid))
        result.update({"price": grid.price, "std_error": 0.0, "diagnostics": grid.diagnostics})
        grid.to_csv(os.path.join(out, "solution.csv"))
    _write_json(os.path.join(out, "price.json"), result)
    log.info("price %.6f (%s) in %.1fs", result["price"], args.method, time.perf_counter() - start)
    print(f"{result['price']:.6f}")
    return 0


def cmd_reproduce_tables(args) -> int:
    m, _ = _load(args)
    out = _out_dir(args)
    cfg2 = lsmc.LsmcConfig(n_paths=args.paths, n_steps=args.steps, degree=args.degree,
                           seed=TABLE_SEEDS["table2"], threads=args.threads)
    paths = simulate_paths(m, n_steps=cfg2.n_steps, n_paths=cfg2.n_paths, seed=cfg2.seed, threads=args.threads)
    with open(os.path.join(out, "table2.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strike", "price", "std_error", "reference", "seed"])
        for q, ref in zip(TABLE2_STRIKES, REFERENCE_TABLE2):
            sol = lsmc.price_lsmc(m, lsmc.ClaimSpec("call", strike=q), [0.4, 0.2], cfg2, paths=paths, check=False)
            w.writerow([q, f"{sol.y0:.6f}", f"{sol.std_error:.6f}", ref, cfg2.seed])
            log.info("table2 Q=%g price %.4f", q, sol.y0)

    with open(os.path.join(out, "table3.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "sigma"] + [f"Q={q}" for q in TABLE2_STRIKES] + ["seed"])
        for i in range(m.n_states):
            row = [bsref.bs_call(bsref.BsInputs(m.s0, q, m.r[i], m.sigma[i], m.horizon)) for q in TABLE2_STRIKES]
            w.writerow([m.r[i], m.sigma[i]] + [f"{v:.6f}" for v in row] + [TABLE_SEEDS["table3"]])

    cfg4 = lsmc.LsmcConfig(n_paths=args.paths, n_steps=args.steps, degree=args.degree,
                           seed=TABLE_SEEDS["table4"], threads=args.threads)
    paths = simulate_paths(m, n_steps=cfg4.n_steps, n_paths=cfg4.n_paths, seed=cfg4.seed, threads=args.threads)
    with open(os.path.join(out, "table4.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L1", "L2", "price", "std_error", "reference", "seed"])
        for L, ref in zip(TABLE4_L, REFERENCE_TABLE4):
            sol = lsmc.price_lsmc(m, lsmc.ClaimSpec("call", strike=100), list(L), cfg4, paths=paths, check=False)
            w.writerow([L[0], L[1], f"{sol.y0:.6f}", f"{sol.std_error:.6f}", ref, cfg4.seed])
            log.info("table4 L=%s price %.4f", L, sol.y0)
    return 0


def cmd_check(args) -> int:
    m, _ = _load(args)
    reports = validity.check_all(m, _parse_L(args.L))
    out = _out_dir(args)
    with open(os.path.join(out, "check.json"), "w") as fh:
        fh.write(validity.report_json(reports) + "\n")
    print(validity.report_text(reports))
    if reports["monotonicity"].verdict == "fail":
        print("warning: monotonicity condition fails", file=sys.stderr)
    return EXIT_ARBITRAGE if reports["arbitrage"].verdict == "fail" else 0


def cmd_backtest(args) -> int:
    m, _ = _load(args)
    try:
        claim = lsmc.parse_claim(args.claim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    target = _target(m, _parse_L(args.L))
    cfg = _lsmc_config(args)
    sol = lsmc.price_lsmc(m, claim, target, cfg, check=False)
    test = simulate_paths(m, n_steps=cfg.n_steps, n_paths=cfg.n_paths, seed=cfg.seed + 1, threads=args.threads)
    out = _out_dir(args)
    names = ("optimal", "variance_minimal") if args.strategy == "both" else (args.strategy,)
    reports = {name: hedging.backtest(test, sol, m, target, strategy=name) for name in names}
    result = {"price": sol.y0, "seed": cfg.seed, "test_seed": cfg.seed + 1,
              "reports": {k: v.summary() for k, v in reports.items()}}
    if len(reports) == 2:
        cmp = hedging.compare_strategies(reports["optimal"], reports["variance_minimal"])
        result["comparison"] = asdict(cmp)
    for name, rep in reports.items():
        rep.to_csv(os.path.join(out, f"backtest_{name}.csv"))
    _write_json(os.path.join(out, "backtest.json"), result)
    return 0


def cmd_simulate(args) -> int:
    m, _ = _load(args)
    paths = simulate_paths(m, n_steps=args.steps, n_paths=args.paths, seed=args.seed, threads=args.threads)
    out = _out_dir(args)
    paths.to_csv(os.path.join(out, "paths.csv"))
    _write_json(os.path.join(out, "simulate.json"),
                {"paths": args.paths, "steps": args.steps, "seed": args.seed,
                 "mean_terminal": float(paths.s[:, -1].mean())})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regimehedge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, paths=200_000, steps=50):
        sp.add_argument("--model", help="model JSON file (default: bundled two-state table)")
        sp.add_argument("--paths", type=int, default=paths, help="number of simulated paths")
        sp.add_argument("--steps", type=int, default=steps, help="time steps K")
        sp.add_argument("--seed", type=int, default=0, help="random seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
        sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("price", help="price a claim")
    common(sp)
    sp.add_argument("--claim", default="call:100", help="call:<Q>, put:<Q> or digital:<Q>")
    sp.add_argument("--L", default="0.4,0.2", help="Sharpe ratios per regime, comma-separated")
    sp.add_argument("--degree", type=int, default=3, help="regression polynomial degree")
    sp.add_argument("--grid", default="401x400", help="PIDE grid NSPACExNTIME")
    sp.add_argument("--method", choices=("lsmc", "pide"), default="lsmc")
    sp.add_argument("--force", action="store_true", help="price even if the arbitrage condition fails")
    sp.set_defaults(func=cmd_price)

    sp = sub.add_parser("reproduce-tables", help="write table2.csv, table3.csv and table4.csv")
    common(sp)
    sp.add_argument("--degree", type=int, default=3, help="regression polynomial degree")
    sp.set_defaults(func=cmd_reproduce_tables)

    sp = sub.add_parser("check", help="evaluate the validity conditions")
    sp.add_argument("--model", help="model JSON file (default: bundled two-state table)")
    sp.add_argument("--L", default="0.4,0.2", help="Sharpe ratios per regime, comma-separated")
    sp.add_argument("--out", default=".", help="output directory")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("backtest", help="backtest hedging strategies on fresh paths")
    common(sp, paths=50_000)
    sp.add_argument("--claim", default="call:100", help="call:<Q>, put:<Q> or digital:<Q>")
    sp.add_argument("--L", default="0.4,0.2", help="Sharpe ratios per regime, comma-separated")
    sp.add_argument("--degree", type=int, default=3, help="regression polynomial degree")
    sp.add_argument("--strategy", choices=("optimal", "variance_minimal", "both"), default="both")
    sp.set_defaults(func=cmd_backtest)

    sp = sub.add_parser("simulate", help="simulate market paths to CSV")
    common(sp, paths=10)
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (lsmc.RegressionError, lsmc.SolverError, pide.DivergenceError, FloatingPointError, ModelError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
