"""Command-line entry point: ``ecoroute <subcommand> ...``.

Every subcommand writes a ``*.manifest.json`` next to its main output with
the effective parameters and SHA-256 digests of its inputs (no timestamps,
so reruns compare byte for byte). ``ecoroute --replay MANIFEST`` reruns the
recorded command.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import demand, evalkit, fuel, ingest, router, synth, vbgmm
from .errors import EcoRouteError, ValidationError
from .network import RoadNetwork, load_links, load_movements, write_network

log = logging.getLogger("ecoroute")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path, argv, args, inputs) -> Path:
    out_path = Path(out_path)
    target = out_path / "manifest.json" if out_path.is_dir() else out_path.with_name(out_path.name + ".manifest.json")
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    blob = {
        "tool": "ecoroute",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "parameters": params,
        "inputs": {str(p): _digest(p) for p in inputs if p is not None},
    }
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return target


def _movements_beside(links_path: Path, explicit) -> Path:
    if explicit:
        return Path(explicit)
    return links_path.with_name("movements.csv")


def _load_net(links, movements=None) -> tuple[RoadNetwork, list[Path]]:
    links = Path(links)
    mov = _movements_beside(links, movements)
    if not mov.exists():
        raise FileNotFoundError(f"movements file not found: {mov}")
    return RoadNetwork(load_links(links), load_movements(mov)), [links, mov]


def _net_dir(path) -> tuple[RoadNetwork, list[Path]]:
    d = Path(path)
    return _load_net(d / "links.csv", d / "movements.csv")


def _filters(args) -> ingest.TripFilters:
    defaults = ingest.TripFilters()
    return ingest.TripFilters(
        min_duration=defaults.min_duration if args.min_duration is None else args.min_duration,
        min_distance=defaults.min_distance if args.min_distance is None else args.min_distance,
        bbox=tuple(args.bbox) if args.bbox else None,
        hours=tuple(args.hours) if args.hours else None,
        weekdays_only=args.weekdays_only,
    )


def _samples(trips_path, network, args):
    trips = ingest.load_trips(trips_path, _filters(args), network)
    return ingest.feature_samples(trips.traversals(), network), trips


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = synth.generate_grid_network(args.rows, args.cols, args.seed)
    congestion = synth.CongestionModel()
    if args.congestion_low is not None:
        congestion.base_low = args.congestion_low
    if args.congestion_high is not None:
        congestion.base_high = args.congestion_high
    if not 0 <= congestion.base_low <= congestion.base_high <= 1:
        raise ValidationError("congestion range must satisfy 0 <= low <= high <= 1")
    kw = {}
    if args.od_trips is not None:
        kw["od_trips"] = args.od_trips
    trips = synth.generate_corpus(net, args.trips_per_link, args.seed, od_pairs=args.od_pairs, congestion=congestion, **kw)
    write_network(net, out / "links.csv", out / "movements.csv")
    ingest.write_traversals(trips, out / "traversals.csv")
    args.congestion_low, args.congestion_high = congestion.base_low, congestion.base_high
    _write_manifest(out, argv, args, [])
    log.info("wrote %d links, %d trips to %s", len(net), len(trips), out)


def cmd_ingest(args, argv):
    net, net_inputs = _load_net(args.links, args.movements)
    trips = ingest.load_trips(args.trips, _filters(args), net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_traversals(trips, out / "traversals.csv")
    in_window = None
    if args.window is not None:
        lo, hi = args.window
        in_window = lambda t: lo <= (t.entry_time % 86400.0) < hi  # noqa: E731
    speeds = ingest.historical_speeds(net, trips.traversals(), in_window, workers=args.threads, seed=args.seed)
    ingest.write_speeds(speeds, out / "speeds.csv")
    _dump_json(
        {
            "trips_kept": len(trips),
            "dropped": dict(sorted(trips.dropped.items())),
            "rejected": dict(sorted(trips.rejected.items())),
            "links_imputed": len(speeds.imputed),
        },
        out / "ingest_report.json",
    )
    _write_manifest(out, argv, args, [Path(args.trips), *net_inputs])


def cmd_fit(args, argv):
    net, net_inputs = _load_net(args.links, args.movements)
    samples, _ = _samples(args.trips, net, args)
    hyper = vbgmm.VbHyperparams(
        alpha0=args.alpha0 if args.alpha0 is not None else vbgmm.VbHyperparams.alpha0,
        k_max=args.k_max if args.k_max is not None else vbgmm.VbHyperparams.k_max,
    )
    kw = {} if args.min_per_category is None else {"min_per_category": args.min_per_category}
    model = fuel.fit_gmr_fuel(samples, hyper, seed=args.seed, workers=args.threads, **kw)
    fuel.save_model(model, args.out)
    F = fuel.features_to_array([f for f, _ in samples])
    y = np.array([v for _, v in samples])
    pred = model.predict_batch(F)
    report = {
        "n_samples": len(samples),
        "components": {repr(c): m.n_components for c, m in sorted(model.models.items())},
        "merged_categories": {repr(a): b for a, b in sorted(model.merged.items())},
        "train_r_squared": evalkit.r_squared(pred, y),
        "train_mape": evalkit.mape(pred, y),
    }
    _dump_json(report, Path(args.out).with_name(Path(args.out).name + ".report.json"))
    _write_manifest(args.out, argv, args, [Path(args.trips), *net_inputs])


def cmd_fit_benchmarks(args, argv):
    net, net_inputs = _load_net(args.links, args.movements)
    samples, _ = _samples(args.trips, net, args)
    avg, pb = fuel.fit_benchmarks(samples)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"models": {"average_speed": avg.to_dict(), "power_balance": pb.to_dict()}}, fh)
    _dump_json(
        {"average_speed": avg.fit_report, "power_balance": pb.fit_report},
        Path(args.out).with_name(Path(args.out).name + ".report.json"),
    )
    _write_manifest(args.out, argv, args, [Path(args.trips), *net_inputs])


def cmd_cluster_od(args, argv):
    net, net_inputs = _load_net(args.links, args.movements)
    trips = ingest.load_trips(args.trips, _filters(args), net)
    ends = demand.trip_endpoints(trips, net)
    xy = np.array([[e.x, e.y] for e in ends]).reshape(-1, 2)
    labels = demand.cluster_points(xy, args.min_pts, args.eps_max, args.threshold)
    pairs = demand.identify_od_pairs(ends, labels, args.weeks, net)
    demand.write_od_pairs(pairs, args.out)
    _write_manifest(args.out, argv, args, [Path(args.trips), *net_inputs])
    log.info("%d OD pairs from %d trips", len(pairs), len(trips))


def _route_setup(args):
    net, net_inputs = _net_dir(args.net)
    model = fuel.load_model(args.model)
    if isinstance(model, dict):
        raise ValidationError("route needs a single fuel model bundle, not a benchmark collection")
    speeds = ingest.read_speeds(args.speeds) if args.speeds else None
    costs = router.edge_costs(net, model, speeds, movement_mode=args.movement_fuel)
    inputs = [Path(args.model), *net_inputs] + ([Path(args.speeds)] if args.speeds else [])
    return net, costs, inputs


def cmd_route(args, argv):
    net, costs, inputs = _route_setup(args)
    pairs = demand.read_od_pairs(args.od)
    rt = router.Router(net, costs, max_labels=args.max_labels, fuel_scale=args.fuel_scale)
    strategies = router.STRATEGIES if args.strategy == "all" else (args.strategy,)
    # fastest and eco are always solved so every line carries normalised ratios
    needed = tuple(dict.fromkeys(("fastest", "eco", *strategies)))
    ods = [(p.origin_link, p.dest_link) for p in pairs]
    solved = router.route_many(rt, ods, needed, args.epsilon, args.sharpness)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in pairs:
            res = solved[(p.origin_link, p.dest_link)]
            for s in strategies:
                line = res[s].to_dict()
                line["od_id"] = f"{p.origin_link}->{p.dest_link}"
                line["weekly_freq"] = p.weekly_frequency
                eco_f, fast_t = res["eco"].total_fuel, res["fastest"].total_time
                ok = res[s].found and eco_f > 0 and fast_t > 0
                line["norm_fuel"] = res[s].total_fuel / eco_f if ok else None
                line["norm_time"] = res[s].total_time / fast_t if ok else None
                fh.write(json.dumps(line, sort_keys=True) + "\n")
    _write_manifest(args.out, argv, args, [Path(args.od), *inputs])


def cmd_eval(args, argv):
    net, net_inputs = _load_net(args.links, args.movements)
    samples, trips = _samples(args.trips, net, args)
    link_of = [t.link_id for t in trips.traversals() if t.fuel is not None]
    train, test = evalkit.split_links(link_of, args.train_fraction, args.seed)
    test_set = set(test)
    test_samples = [(f, y, l) for (f, y), l in zip(samples, link_of) if l in test_set]
    models = {}
    if args.model:
        m = fuel.load_model(args.model)
        models.update(m if isinstance(m, dict) else {"gmr": m})
    if args.benchmarks:
        models.update(fuel.load_model(args.benchmarks))
    if not models:
        raise ValidationError("eval needs --model and/or --benchmarks")
    reports = evalkit.compare_models(models, test_samples, seed=args.seed)
    _dump_json(
        {"test_links": test, "models": {k: v.to_dict() for k, v in reports.items()}},
        args.out,
    )
    ins = [Path(args.trips), *net_inputs] + [Path(p) for p in (args.model, args.benchmarks) if p]
    _write_manifest(args.out, argv, args, ins)


def _read_routes(path):
    results: dict = {}
    freq: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            od = d["od_id"]
            links = tuple(d["links"])
            inf = float("inf")
            r = router.RouteResult(
                d["strategy"],
                d["origin"],
                d["destination"],
                links,
                (),
                inf if d["total_fuel_kg"] is None else d["total_fuel_kg"],
                inf if d["total_time_s"] is None else d["total_time_s"],
                inf if d["total_distance_m"] is None else d["total_distance_m"],
            )
            results.setdefault(od, {})[d["strategy"]] = r
            freq[od] = float(d.get("weekly_freq", 1.0))
    return results, freq


def cmd_report(args, argv):
    results, freq = _read_routes(args.routes)
    baseline = _read_routes(args.baseline)[0] if args.baseline else None
    comp = evalkit.compare_strategies(results, freq, baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_comparison(comp, out / "strategies.json", out / "strategies.csv")
    _write_manifest(out, argv, args, [Path(args.routes)] + ([Path(args.baseline)] if args.baseline else []))


# --------------------------------------------------------------------------
# parser


def _add_filters(p):
    g = p.add_argument_group("trip filters")
    g.add_argument("--min-duration", type=float, default=None, help="seconds (default: module value)")
    g.add_argument("--min-distance", type=float, default=None, help="metres (default: module value)")
    g.add_argument("--bbox", type=float, nargs=4, metavar=("XMIN", "YMIN", "XMAX", "YMAX"))
    g.add_argument("--hours", type=int, nargs=2, metavar=("FROM", "TO"), help="UTC start-hour window")
    g.add_argument("--weekdays-only", action="store_true")


def _add_net(p):
    p.add_argument("--links", required=True)
    p.add_argument("--movements", default=None, help="default: movements.csv beside --links")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecoroute", description="Fuel-aware routing pipeline.")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker count (default: all CPUs)")
    p.add_argument("--replay", metavar="MANIFEST", help="rerun the command recorded in a manifest")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic network and traversal corpus")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    s.add_argument("--trips-per-link", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--od-pairs", type=int, default=0, help="planted frequent OD pairs")
    s.add_argument("--od-trips", type=int, default=None, help="trips per planted pair")
    s.add_argument("--congestion-low", type=float, default=None)
    s.add_argument("--congestion-high", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="filter trips and estimate historical link speeds")
    s.add_argument("--trips", required=True)
    _add_net(s)
    _add_filters(s)
    s.add_argument("--window", type=float, nargs=2, metavar=("FROM_S", "TO_S"), help="seconds-of-day window")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", help="fit the per-category GMR fuel model")
    s.add_argument("--trips", required=True)
    _add_net(s)
    _add_filters(s)
    s.add_argument("--alpha0", type=float, default=None)
    s.add_argument("--k-max", type=int, default=None)
    s.add_argument("--min-per-category", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("fit-benchmarks", help="fit the average-speed and power-balance models")
    s.add_argument("--trips", required=True)
    _add_net(s)
    _add_filters(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_benchmarks)

    s = sub.add_parser("cluster-od", help="find frequent OD pairs from trip endpoints")
    s.add_argument("--trips", required=True)
    _add_net(s)
    _add_filters(s)
    s.add_argument("--min-pts", type=int, default=demand.DEFAULT_MIN_PTS)
    s.add_argument("--eps-max", type=float, default=demand.DEFAULT_EPS_MAX)
    s.add_argument("--threshold", type=float, default=demand.DEFAULT_THRESHOLD)
    s.add_argument("--weeks", type=int, default=demand.DEFAULT_STUDY_WEEKS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster_od)

    s = sub.add_parser("route", help="route OD pairs with one or all strategies")
    s.add_argument("--model", required=True)
    s.add_argument("--net", required=True, help="directory with links.csv and movements.csv")
    s.add_argument("--od", required=True)
    s.add_argument("--speeds", default=None, help="speeds.csv from ingest (default: posted limits)")
    s.add_argument("--strategy", choices=(*router.STRATEGIES, "all"), default="all")
    s.add_argument("--epsilon", type=float, default=router.DEFAULT_EPSILON)
    s.add_argument("--sharpness", type=float, default=router.DEFAULT_SHARPNESS)
    s.add_argument("--max-labels", type=int, default=router.DEFAULT_MAX_LABELS)
    s.add_argument("--fuel-scale", default="auto", help="s/kg weighting fuel against time (default: auto)")
    s.add_argument("--movement-fuel", action="store_true", help="cost speed changes across movements")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_route)

    s = sub.add_parser("eval", help="score fuel models on held-out links")
    s.add_argument("--trips", required=True)
    _add_net(s)
    _add_filters(s)
    s.add_argument("--model", default=None)
    s.add_argument("--benchmarks", default=None)
    s.add_argument("--train-fraction", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="compare routing strategies over OD pairs")
    s.add_argument("--routes", required=True, help="routes.jsonl from `route --strategy all`")
    s.add_argument("--baseline", default=None, help="free-flow routes.jsonl for renormalisation")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _setup_logging():
    level = os.environ.get("ECOROUTE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.replay:
            with open(args.replay, encoding="utf-8") as fh:
                argv = json.load(fh)["argv"]
            args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_VALIDATION
        args.func(args, argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except (EcoRouteError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
