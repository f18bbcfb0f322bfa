"""Command line entry point: ``twgcn <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import tomli

from .graph import write_adjacency_csv
from .grid import expand_grid, grid_search, top_k_per_model, write_results_csv
from .ingest import JoinConfig, SchemaError, ingest, load_panels, save_panels, write_report
from .synth import SynthConfig, write_sources
from .train import Checkpoint, ExperimentConfig, NumericError, build_graphs, forecast, run_experiment, save_run, standardize

log = logging.getLogger("twgcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _experiment(doc: dict) -> ExperimentConfig:
    keys = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    try:
        return ExperimentConfig.from_mapping(keys)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad experiment config: {exc}") from exc


def _path_option(arg, doc: dict, key: str, required: bool = True):
    value = arg if arg is not None else doc.get("paths", {}).get(key)
    if value is None and required:
        raise UsageError(f"--{key.replace('_', '-')} is required (flag or [paths].{key} in the config)")
    return None if value is None else Path(value)


# -- subcommands ----------------------------------------------------------


def cmd_synth(args) -> int:
    doc = _load_toml(args.config)
    try:
        cfg = SynthConfig.from_mapping(doc.get("synth", doc))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}") from exc
    manifest = write_sources(cfg, args.out_dir)
    log.info("wrote synthetic sources to %s (config %s)", args.out_dir, manifest["config_hash"])
    return EXIT_OK


def cmd_ingest(args) -> int:
    join = JoinConfig(k_traffic=args.k_traffic, poi_radius_m=args.poi_radius_m)
    panels, report = ingest(args.sessions, args.traffic, args.weather, args.poi, join)
    out = Path(args.out)
    save_panels(panels, out)
    write_report(report, out / "ingest_report.json")
    log.info("%d station panels x %d hours -> %s", len(panels), panels.n_hours, out)
    return EXIT_OK


def cmd_graph(args) -> int:
    panels = load_panels(args.panels)
    gamma = args.gamma if args.gamma == "auto" else float(args.gamma)
    cfg = ExperimentConfig(tau_km=args.tau_km, gamma=gamma)
    std, _, train_end, _ = standardize(panels, cfg)
    a_geo, a_dem, _ = build_graphs(std, train_end, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_adjacency_csv(a_geo, panels.station_ids, out / "geo_adjacency.csv")
    write_adjacency_csv(a_dem, panels.station_ids, out / "dem_adjacency.csv")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _load_toml(args.config)
    config = _experiment(doc)
    panels = load_panels(_path_option(args.panels, doc, "panels"))
    out = _path_option(args.out_dir, doc, "out_dir", required=False) or Path("runs")
    run = run_experiment(config, panels)
    paths = save_run(run, out)
    m = run.metrics["normalized"]
    log.info("test MAE %.4f RMSE %.4f SMAPE %.2f%% (normalised); report %s", m.mae, m.rmse, m.smape_percent,
             paths["report"])
    return EXIT_OK


def cmd_grid(args) -> int:
    doc = _load_toml(args.config)
    base = _experiment(doc)
    try:
        configs = expand_grid(doc.get("grid", {}), base)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    panels = load_panels(_path_option(args.panels, doc, "panels"))
    out = _path_option(args.out, doc, "out", required=False) or Path("results.csv")
    rows = grid_search(configs, panels, jobs=args.jobs)
    write_results_csv(rows, out)
    top = top_k_per_model(rows, 5)
    top_path = out.with_name(out.stem + "_top5.csv")
    write_results_csv([r for m in sorted(top) for r in top[m]], top_path)
    failed = sum(1 for r in rows if "error" in r)
    log.info("%d grid rows -> %s (%d failed)", len(rows), out, failed)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.model)
    panels = load_panels(args.panels)
    df = forecast(ckpt, panels, args.horizon)
    if args.out is None:
        df.to_csv(sys.stdout, index=False)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(args.out, index=False)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twgcn", description="EV charging demand forecasting with dual-graph GCNs.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--config", help="TOML with SynthConfig fields (top level or [synth])")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="clean and join raw CSVs into a panel bundle")
    for name in ("sessions", "traffic", "weather", "poi"):
        s.add_argument(f"--{name}", required=True)
    s.add_argument("--out", required=True, help="bundle directory")
    s.add_argument("--k-traffic", type=int, default=5)
    s.add_argument("--poi-radius-m", type=float, default=500.0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("graph", help="write geographic and demand adjacency CSVs")
    s.add_argument("--panels", required=True)
    s.add_argument("--tau-km", type=float, default=25.0)
    s.add_argument("--gamma", default="auto")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("train", help="train one configuration and write its report")
    s.add_argument("--config", required=True)
    s.add_argument("--panels")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grid", help="run a configuration grid")
    s.add_argument("--config", required=True)
    s.add_argument("--panels")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("predict", help="forecast from a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--panels", required=True)
    s.add_argument("--horizon", type=int, default=1, help="number of most recent forecast origins")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (SchemaError, ValueError, OSError, KeyError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
