"""Command-line entry point: ``equiprice <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .grid import parse_case, write_profiles, synth_profiles
from .harness import (
    DOMAIN_ERRORS,
    format_table,
    load_scenario,
    resolve_path,
    run_compare,
    run_icd_method,
    run_sdid_method,
    with_seed,
    write_results,
)
from .powerflow import nominal_point, solve_power_flow

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equiprice", description="Equitable nodal pricing for EV charging stations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, help_text, case=False, scenario=False, out=False, seed=False, weights=False, sdid=False):
        p = sub.add_parser(name, help=help_text)
        if case:
            p.add_argument("--case", type=Path, default=None, help="network case JSON (default: shipped ieee14.json)")
        if scenario:
            p.add_argument("--scenario", type=Path, required=True, help="scenario TOML")
        if out:
            p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="reseed loads and initial prices")
        if weights:
            p.add_argument("--alpha", type=float, default=None, help="voltage-deviation weight")
            p.add_argument("--beta", type=float, default=None, help="equity weight")
        if sdid:
            p.add_argument("--eta", type=float, default=None, help="initial step size")
            p.add_argument("--iters", type=int, default=None, help="number of price updates")
            p.add_argument("--decay", type=_bool, default=None, help="shrink the step every iteration (true/false)")
        return p

    add("validate", "check a case file and, optionally, a scenario", case=True).add_argument(
        "--scenario", type=Path, default=None, help="scenario TOML"
    )
    add("powerflow", "solve the base case and print its certificate", case=True, out=True).set_defaults(out=None)
    add("dispatch", "dispatch every station against the time-of-use schedule", scenario=True, out=True, seed=True)
    add("price-icd", "set prices with implicitly constrained dual pricing", scenario=True, out=True, seed=True, weights=True)
    add("price-sdid", "set prices by subgradient descent through the dispatch", scenario=True, out=True, seed=True,
        weights=True, sdid=True)
    add("compare", "run time-of-use, ICD and SDID on one scenario", scenario=True, out=True, seed=True, weights=True,
        sdid=True)
    p = add("synth-profiles", "write seeded synthetic EV load profiles", scenario=True, out=True, seed=True)
    p.add_argument("--peak", type=float, default=None, help="peak demand per station, MW")
    return parser


def _scenario(args):
    sc = load_scenario(args.scenario)
    if getattr(args, "seed", None) is not None:
        sc = with_seed(sc, args.seed)
    weights = {k: getattr(args, k, None) for k in ("alpha", "beta")}
    weights = {k: v for k, v in weights.items() if v is not None}
    if weights:
        sc = replace(sc, icd=replace(sc.icd, **weights), sdid=replace(sc.sdid, **weights))
    sdid = {"eta_init": getattr(args, "eta", None), "n_iters": getattr(args, "iters", None),
            "decay": getattr(args, "decay", None)}
    sdid = {k: v for k, v in sdid.items() if v is not None}
    if sdid:
        sc = replace(sc, sdid=replace(sc.sdid, **sdid))
    return sc


def _case_path(args) -> Path:
    return resolve_path(args.case if args.case is not None else "ieee14.json")


def cmd_validate(args) -> int:
    net = parse_case(_case_path(args))
    print(f"{net.name or 'case'}: {net.n} buses, {len(net.lines)} lines, slack bus {net.buses[net.slack].id}")
    if args.scenario is not None:
        sc = load_scenario(args.scenario)
        system = sc.system()
        sc.tou()
        print(f"scenario {sc.name}: {system.K} stations, T={system.T}, dt={system.dt_hours:g} h")
    return EXIT_OK


def cmd_powerflow(args) -> int:
    net = parse_case(_case_path(args))
    p, q = net.injections()
    t0 = time.perf_counter()
    res = solve_power_flow(net, p, q, start=nominal_point(net))
    ms = (time.perf_counter() - t0) * 1e3
    print(f"converged in {res.iterations} iterations, max mismatch {res.max_mismatch:.3e} p.u., {ms:.1f} ms")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "operating_point.csv", "w") as fh:
            fh.write("bus,v_pu,theta_rad\n")
            for b, v, th in zip(net.buses, res.op.v, res.op.theta):
                fh.write(f"{b.id},{v:.12g},{th:.12g}\n")
    return EXIT_OK


def cmd_dispatch(args) -> int:
    sc = _scenario(args)
    system = sc.system()
    prices = np.tile(sc.tou().expand(system.T, system.dt_hours), (system.K, 1))
    args.out.mkdir(parents=True, exist_ok=True)
    for k, sol in enumerate(system.dispatch_all(prices)):
        sid = system.station_ids[k]
        sol.to_csv(args.out / f"dispatch_{sid}.csv", prices[k], system.load[k])
        print(f"station {sid}: cost ${sol.cost:,.2f}, final SoC {sol.soc[-1]:.3f}")
    return EXIT_OK


def _single(args, runner) -> int:
    sc = _scenario(args)
    system = sc.system()
    result = runner(sc, system=system)
    write_results([result], args.out, system.net, sc)
    print(format_table([result]))
    return EXIT_OK


def cmd_price_icd(args) -> int:
    return _single(args, run_icd_method)


def cmd_price_sdid(args) -> int:
    return _single(args, run_sdid_method)


def cmd_compare(args) -> int:
    sc = _scenario(args)
    t0 = time.perf_counter()
    results = run_compare(sc)
    summary = write_results(results, args.out, sc.network(), sc)
    print(format_table(results))
    for m, rec in summary["methods"].items():
        if "reduction_vs_tou" in rec:
            print(f"{m}: {100 * rec['reduction_vs_tou']:.1f}% lower deviation than tou")
    print(f"total {time.perf_counter() - t0:.1f} s; outputs in {args.out}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_DOMAIN


def cmd_synth_profiles(args) -> int:
    sc = _scenario(args)
    seed = args.seed if args.seed is not None else int(sc.profiles.get("seed", sc.seed))
    peak = args.peak if args.peak is not None else float(sc.profiles.get("peak_mw", 2.0))
    forecasts = synth_profiles(seed, sc.stations, peak, sc.T)
    args.out.mkdir(parents=True, exist_ok=True)
    write_profiles(forecasts, args.out / "profiles.csv")
    print(f"wrote {len(forecasts)} profiles to {args.out / 'profiles.csv'}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "powerflow": cmd_powerflow,
    "dispatch": cmd_dispatch,
    "price-icd": cmd_price_icd,
    "price-sdid": cmd_price_sdid,
    "compare": cmd_compare,
    "synth-profiles": cmd_synth_profiles,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
