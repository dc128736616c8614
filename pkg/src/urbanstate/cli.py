"""Command-line experiment runner.

Every subcommand reads a flat YAML config; ``--seed``, ``--variant``,
``--split`` and ``--out`` override the file. Outputs carry the hash of the
resolved config and the seed so reruns can be matched up.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
import zlib
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .data_model import (FEATURE_NAMES, Demographics, WeekSplit, make_time_splits, read_demographics,
                         read_edges, read_panel, write_demographics, write_edges, write_panel)
from .model import UrbanModel

log = logging.getLogger("urbanstate")

COMMANDS = ("ingest", "generate", "train", "evaluate", "cluster", "sweep", "report")

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "variant": "full",
    "split": 0,
    # data locations (generate writes these into ``out`` when not given)
    "panel": None,
    "demographics": None,
    "edges": None,
    "truth": None,
    "checkpoint": None,
    # split: "tail" uses the last weeks; "months" uses rolling month windows
    "split_mode": "tail",
    "test_weeks": 25,
    "val_weeks": 13,
    "panel_start_month": None,
    "panel_end_month": None,
    "window_months": 24,
    "train_months": 18,
    "stride_months": 1,
    "val_months": 3,
    # training
    "lr": 0.01,
    "batch_size": 16000,
    "epochs": 200,
    "validation": "best",
    "hidden": None,
    "emb": 50,
    "target_type": None,
    "gamma1": None,
    "gamma2": None,
    "gamma3": None,
    "gamma4": None,
    "gamma5": None,
    # evaluation
    "budget": 0.1,
    "node_clusters": 4,
    "type_clusters": 8,
}

GAMMA_FIELDS = {"gamma1": "obs", "gamma2": "rating", "gamma3": "reg", "gamma4": "theta_reg",
                "gamma5": "alpha_relu"}


class CLIError(RuntimeError):
    pass


# -- config plumbing ---------------------------------------------------------


def load_config(path: str | None, overrides: dict, extra_defaults: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(extra_defaults or {})
    if path:
        p = Path(path)
        if not p.exists():
            raise CLIError(f"config file not found: {path}")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise CLIError(f"{path}: expected a flat key/value mapping")
        cfg.update(data)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON of the config, ignoring where outputs go."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def substream(seed: int, name: str) -> int:
    """Independent child seed for a named purpose (data, train, cluster ...)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])


def _header(cfg: dict, command: str) -> dict:
    return {"config_hash": config_hash(cfg), "seed": int(cfg["seed"]), "command": command,
            "version": __version__}


def _out(cfg: dict) -> Path:
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _need(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise CLIError(f"missing config keys: {', '.join(missing)}")


def _path(cfg: dict, key: str, default_name: str | None = None) -> Path:
    value = cfg.get(key)
    if value in (None, "") and default_name is not None:
        value = str(Path(cfg["out"]) / default_name)
    if value in (None, ""):
        raise CLIError(f"missing config keys: {key}")
    p = Path(value)
    if not p.exists():
        raise CLIError(f"{key}: path does not exist: {p}")
    return p


def load_inputs(cfg: dict):
    panel = read_panel(_path(cfg, "panel", "panel"))
    demo = read_demographics(_path(cfg, "demographics", "demographics.csv"))
    graph = read_edges(_path(cfg, "edges", "edges.csv"), panel.n)
    if demo.values.shape[0] != panel.n:
        raise CLIError(f"demographics cover {demo.values.shape[0]} nodes, panel has {panel.n}")
    return panel, demo, graph


def resolve_split(cfg: dict, panel) -> WeekSplit:
    if cfg["split_mode"] == "tail":
        if int(cfg["split"]) != 0:
            raise CLIError("tail mode has a single split; --split must be 0")
        return WeekSplit.tail(panel.n_weeks, int(cfg["test_weeks"]), int(cfg["val_weeks"]))
    if cfg["split_mode"] != "months":
        raise CLIError("split_mode must be 'tail' or 'months'")
    _need(cfg, "panel_start_month", "panel_end_month")
    if not panel.start_date:
        raise CLIError("month splits need a panel start date")
    splits = make_time_splits(cfg["panel_start_month"], cfg["panel_end_month"],
                              int(cfg["window_months"]), int(cfg["train_months"]),
                              int(cfg["stride_months"]), int(cfg["val_months"]) or None)
    k = int(cfg["split"])
    if not 0 <= k < len(splits):
        raise CLIError(f"split {k} out of range; {len(splits)} splits available")
    return WeekSplit.from_months(splits[k], panel.start_date, panel.n_weeks)


def _variant(cfg: dict):
    from .objective import variant_config

    v = variant_config(cfg["variant"])
    over = {f: float(cfg[g]) for g, f in GAMMA_FIELDS.items() if cfg.get(g) is not None}
    return v.with_weights(**over) if over else v


def _train_config(cfg: dict):
    from .training import TrainConfig

    return TrainConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                       epochs=int(cfg["epochs"]), seed=substream(cfg["seed"], "train"),
                       variant=cfg["variant"], validation=cfg["validation"],
                       hidden=cfg["hidden"], emb=int(cfg["emb"]),
                       target_type=None if cfg["target_type"] is None else int(cfg["target_type"]))


# -- subcommands -------------------------------------------------------------


def cmd_ingest(cfg: dict) -> int:
    from .ingest import (ColumnMap, IngestConfig, build_panel, parse_inspection_records,
                         parse_report_records)

    _need(cfg, "reports_csv", "n_nodes", "n_weeks")
    cols = ColumnMap.nyc_311() if cfg.get("column_preset") == "nyc_311" else ColumnMap()
    start = cfg.get("start_date")
    reports = parse_report_records(_path(cfg, "reports_csv"), cols, int(cfg["n_weeks"]), start)
    inspections = []
    if cfg.get("inspections_csv"):
        inspections = parse_inspection_records(_path(cfg, "inspections_csv"), ColumnMap(),
                                               int(cfg["n_weeks"]), start)
    icfg = IngestConfig(
        n_nodes=int(cfg["n_nodes"]), n_weeks=int(cfg["n_weeks"]), start_date=start,
        min_rate=float(cfg.get("min_rate", 0.001)),
        match_threshold_m=float(cfg.get("match_threshold_m", 100.0)),
        matching_types=tuple(cfg.get("matching_types") or ()),
        responsive_filter_types=tuple(cfg.get("responsive_filter_types") or ()),
        percentile=float(cfg.get("percentile", 50.0)),
        carry_forward=bool(cfg.get("carry_forward", True)),
        report_cols=cols,
    )
    panel, summary = build_panel(reports, inspections, icfg)
    out = _out(cfg)
    header = _header(cfg, "ingest")
    write_panel(panel, out / "panel", extra_header=header)
    _write_json(out / "ingest_summary.json", {"header": header, "summary": summary})
    print(f"panel: {panel.n} nodes, {panel.n_types} types, {panel.n_weeks} weeks, "
          f"{panel.n_obs} rating records -> {out / 'panel'}")
    return 0


def cmd_generate(cfg: dict) -> int:
    from .synthetic import (SyntheticSpec, draw_type_coefficients, fit_reference_coefficients,
                            make_semisynthetic, make_synthetic_panel)

    out = _out(cfg)
    header = _header(cfg, "generate")
    data_seed = substream(cfg["seed"], "data")
    mode = cfg.get("mode", "full")
    if mode == "full":
        known = {f.name for f in fields(SyntheticSpec)}
        kw = {k: cfg[k] for k in known if k in cfg and k != "seed"}
        for key in ("theta_mean", "rated_types"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        if "alpha_overrides" in kw:
            kw["alpha_overrides"] = {int(k): float(v) for k, v in (kw["alpha_overrides"] or {}).items()}
        spec = SyntheticSpec(seed=data_seed, **kw)
        panel, graph, demo, truth = make_synthetic_panel(spec)
        write_demographics(out / "demographics.csv", demo.raw(), demo.feature_names)
        write_edges(out / "edges.csv", graph)
    elif mode == "semi":
        panel, demo, graph = load_inputs(cfg)
        split = resolve_split(cfg, panel)
        if cfg.get("theta_mean") is not None:
            theta_mean = np.asarray(cfg["theta_mean"], dtype=float)
            alpha_mean = float(cfg.get("alpha_mean", -0.193))
        else:
            ref, _ = fit_reference_coefficients(panel.window(*split.train), demo)
            alpha_mean, theta_mean = float(ref[0]), ref[1:]
        coefs = draw_type_coefficients(alpha_mean, theta_mean, panel.n_types,
                                       float(cfg.get("coef_sd", 0.1)), seed=data_seed)
        panel, truth = make_semisynthetic(panel, demo, split, coefs, cfg.get("eps"))
        truth.update({"mode": "semi", "alpha_mean": alpha_mean, "theta_mean": list(map(float, theta_mean))})
        if Path(cfg["out"]).resolve() != Path(_path(cfg, "demographics").parent).resolve():
            write_demographics(out / "demographics.csv", demo.raw(), demo.feature_names)
            write_edges(out / "edges.csv", graph)
    else:
        raise CLIError("mode must be 'full' or 'semi'")
    write_panel(panel, out / "panel", extra_header=header)
    _write_json(out / "truth.json", {"header": header, **truth})
    print(f"generated {mode} panel with {panel.n_obs} rating records -> {out}")
    return 0


def _train_one(cfg: dict):
    from .training import train

    panel, demo, graph = load_inputs(cfg)
    split = resolve_split(cfg, panel)
    tm = train(panel, graph, demo, split, _variant(cfg), _train_config(cfg))
    return tm, split


def cmd_train(cfg: dict) -> int:
    tm, split = _train_one(cfg)
    out = _out(cfg)
    header = _header(cfg, "train")
    tm.model.meta.update(header)
    tm.model.meta["split"] = asdict(split)
    tm.model.save(out / "model.npz")
    with open(out / "history.jsonl", "w") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        fh.write(tm.history_jsonl())
    _write_json(out / "train.json", {"header": header, "selected_epoch": tm.selected_epoch,
                                     "config": tm.config, "split": asdict(split)})
    print(f"trained {tm.config['variant']}; selected epoch {tm.selected_epoch} -> {out / 'model.npz'}")
    return 0


def _coef_tables(model: UrbanModel, truth_path) -> tuple[np.ndarray, np.ndarray] | tuple[None, None]:
    if not truth_path:
        return None, None
    truth = json.loads(Path(truth_path).read_text())
    if truth.get("mode") != "full":
        return None, None
    rated = np.flatnonzero(model.own_coef & model.rated)
    est = np.column_stack([model.params["head.alpha"][rated], model.params["head.theta"][rated]])
    tru = np.column_stack([np.asarray(truth["alpha"])[rated], np.asarray(truth["theta"])[rated]])
    return est, tru


def _truth_path(cfg: dict):
    if cfg.get("truth"):
        return cfg["truth"]
    default = Path(cfg["out"]) / "truth.json"
    return default if default.exists() else None


def evaluate_run(cfg: dict, model: UrbanModel | None = None):
    from .evaluation import evaluate

    panel, demo, graph = load_inputs(cfg)
    split = resolve_split(cfg, panel)
    if model is None:
        model = UrbanModel.load(_path(cfg, "checkpoint", "model.npz"))
    A_hat = graph.normalized_adjacency()
    rhat = model.predict_ratings(A_hat)
    prob = model.head().node_probabilities(rhat, demo.values) if model.own_coef.any() else \
        np.full(rhat.shape, np.nan)
    proxy = model.meta.get("variant") == "reports_only"
    est, tru = _coef_tables(model, _truth_path(cfg))
    report = evaluate(rhat, prob, panel.window(*split.test), demo, proxy=proxy,
                      budget=float(cfg["budget"]), true_coefs=tru, est_coefs=est)
    report.metrics["selected_epoch"] = model.meta.get("selected_epoch")
    return report


def cmd_evaluate(cfg: dict) -> int:
    report = evaluate_run(cfg)
    report.header = _header(cfg, "evaluate")
    out = _out(cfg)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    m = report.metrics
    print(f"rating corr {m['rating']['corr']:.4f}  report corr {m['report']['corr']:.4f} -> "
          f"{out / 'metrics.json'}")
    return 0


def cmd_cluster(cfg: dict) -> int:
    from .evaluation import cluster_nodes, cluster_types, demographic_tests, pca_frequency_correlation

    panel, demo, graph = load_inputs(cfg)
    model = UrbanModel.load(_path(cfg, "checkpoint", "model.npz"))
    rhat = model.predict_ratings(graph.normalized_adjacency())
    seed = substream(cfg["seed"], "cluster")
    nodes = cluster_nodes(rhat, int(cfg["node_clusters"]), seed)
    types = cluster_types(rhat.T, min(int(cfg["type_clusters"]), panel.n_types), seed)
    raw = pd.DataFrame(demo.raw(), columns=list(demo.feature_names))
    tests = demographic_tests(nodes.labels, raw)
    pca_r = pca_frequency_correlation(rhat.T, panel.reports.mean(axis=(0, 2)))
    out = _out(cfg)
    header = _header(cfg, "cluster")
    pd.DataFrame({"node": np.arange(panel.n), "cluster": nodes.labels,
                  "config_hash": header["config_hash"], "seed": header["seed"]}
                 ).to_csv(out / "node_clusters.csv", index=False)
    pd.DataFrame({"type": list(panel.catalog.names), "cluster": types.labels,
                  "config_hash": header["config_hash"], "seed": header["seed"]}
                 ).to_csv(out / "type_clusters.csv", index=False)
    tests.assign(config_hash=header["config_hash"], seed=header["seed"]).to_csv(
        out / "cluster_anova.csv", index=False, float_format="%.17g")
    _write_json(out / "cluster.json", {
        "header": header, "node_degenerate": nodes.degenerate, "type_degenerate": types.degenerate,
        "node_inertia": nodes.inertia, "type_inertia": types.inertia,
        "pca_frequency_corr": pca_r if np.isfinite(pca_r) else None,
    })
    print(f"clusters written to {out}")
    return 0


def expand_grid(cfg: dict) -> list[dict]:
    """Cartesian product over config values that are lists (``theta_mean`` excepted)."""
    keys = sorted(k for k, v in cfg.items() if isinstance(v, list) and k not in ("theta_mean",
                                                                                 "matching_types",
                                                                                 "responsive_filter_types",
                                                                                 "rated_types"))
    if not keys:
        return [dict(cfg)]
    runs = []
    for combo in itertools.product(*(cfg[k] for k in keys)):
        c = dict(cfg)
        c.update(dict(zip(keys, combo)))
        runs.append(c)
    return runs


def cmd_sweep(cfg: dict) -> int:
    grid = expand_grid(cfg)
    base_out = _out(cfg)
    swept = sorted({k for run in grid for k in run if isinstance(cfg.get(k), list)
                    and k not in ("theta_mean",)})
    rows = []
    for j, run in enumerate(grid):
        run = dict(run)
        run["out"] = str(base_out / f"run_{j:03d}")
        row = {"run": j, **{k: run[k] for k in swept}, "config_hash": config_hash(run),
               "seed": int(run["seed"])}
        try:
            tm, _ = _train_one(run)
            Path(run["out"]).mkdir(parents=True, exist_ok=True)
            tm.model.meta.update(_header(run, "sweep"))
            tm.model.save(Path(run["out"]) / "model.npz")
            sel = tm.history[tm.selected_epoch] if tm.history else {}
            report = evaluate_run(run, tm.model)
            report.header = _header(run, "sweep")
            (Path(run["out"]) / "metrics.json").write_text(report.to_json())
            row.update(status="ok", selected_epoch=tm.selected_epoch,
                       val_objective=sel.get("val_objective", float("nan")),
                       test_rating_corr=report.metrics["rating"]["corr"],
                       test_report_corr=report.metrics["report"]["corr"])
        except Exception as exc:  # a failed grid point must not stop the sweep
            log.warning("sweep run %d failed: %s", j, exc)
            row.update(status=f"failed: {exc}", selected_epoch=-1, val_objective=float("nan"),
                       test_rating_corr=float("nan"), test_report_corr=float("nan"))
        rows.append(row)
    board = pd.DataFrame(rows)
    board["_key"] = board["val_objective"].fillna(-np.inf)
    board = board.sort_values(["_key", "run"], ascending=[False, True], kind="stable").drop(columns="_key")
    board.to_csv(base_out / "leaderboard.csv", index=False, float_format="%.17g",
                 quoting=csv.QUOTE_MINIMAL)
    best = board.iloc[0].to_dict()
    _write_json(base_out / "sweep.json", {"header": _header(cfg, "sweep"), "runs": len(rows),
                                          "best": best})
    print(f"{len(rows)} runs; best run {best['run']} (val objective {best['val_objective']})")
    return 0


def cmd_report(cfg: dict) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out(cfg)
    metrics_path = Path(cfg.get("metrics") or Path(cfg["out"]) / "metrics.json")
    if not metrics_path.exists():
        raise CLIError(f"metrics: path does not exist: {metrics_path}")
    metrics = json.loads(metrics_path.read_text())["metrics"]
    header = _header(cfg, "report")
    written = []
    for key in ("rating", "report"):
        per = metrics[key].get("per_type_corr") or {}
        if per:
            fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(per)), 3))
            ks = sorted(per, key=int)
            ax.bar(range(len(ks)), [per[k] if per[k] is not None else 0.0 for k in ks])
            ax.set_xticks(range(len(ks)), ks, rotation=90)
            ax.set_ylabel(f"{key} correlation")
            ax.set_title(f"config {header['config_hash'][:10]} seed {header['seed']}", fontsize=8)
            fig.tight_layout()
            fig.savefig(out / f"per_type_{key}_corr.png", dpi=100)
            plt.close(fig)
            written.append(f"per_type_{key}_corr.png")
    ckpt = cfg.get("checkpoint") or (Path(cfg["out"]) / "model.npz")
    if _truth_path(cfg) and Path(ckpt).exists():
        est, tru = _coef_tables(UrbanModel.load(ckpt), _truth_path(cfg))
        if est is not None:
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.scatter(tru.ravel(), est.ravel(), s=10)
            lo, hi = float(min(tru.min(), est.min())), float(max(tru.max(), est.max()))
            ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
            ax.set_xlabel("true coefficient")
            ax.set_ylabel("estimated coefficient")
            fig.tight_layout()
            fig.savefig(out / "coefficient_scatter.png", dpi=100)
            plt.close(fig)
            written.append("coefficient_scatter.png")
    rows = [{"metric": k, "value": v} for k, v in (
        ("rating_corr", metrics["rating"]["corr"]), ("rating_rmse", metrics["rating"].get("rmse")),
        ("report_corr", metrics["report"]["corr"]), ("report_rmse", metrics["report"]["rmse"]),
        ("ece", metrics["rating"].get("ece")),
        ("representation_income", metrics["representation_ratio"]["income"]),
        ("representation_pct_white", metrics["representation_ratio"]["pct_white"]))]
    pd.DataFrame(rows).assign(config_hash=header["config_hash"], seed=header["seed"]).to_csv(
        out / "summary.csv", index=False, float_format="%.17g")
    print(f"report: {', '.join(written + ['summary.csv'])} -> {out}")
    return 0


HANDLERS = {"ingest": cmd_ingest, "generate": cmd_generate, "train": cmd_train,
            "evaluate": cmd_evaluate, "cluster": cmd_cluster, "sweep": cmd_sweep,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urbanstate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="YAML file of flat key: value settings")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant")
        p.add_argument("--split", type=int)
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "variant": args.variant,
                                        "split": args.split, "out": args.out})
        return HANDLERS[args.command](cfg)
    except (CLIError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
