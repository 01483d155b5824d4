"""Command-line entry point: ``xmfactor <command> [options]``.

Each command resolves a :class:`~xmfactor.io.RunConfig` (config file first,
flags win), writes its reports atomically into ``--out`` together with a
manifest, and exits 0.  Failures exit nonzero after printing a JSON error
record to stderr (also saved as ``error.json`` when the output directory is
usable).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .backtest import run_backtest
from .events import detect_events, load_agent_labels, run_event_study
from .factor import VARIANTS, FactorPanel, build_factor_panel, lookahead_audit
from .graph import build_graph, corr_weights, gics_equal_weights, sigmoid_weights
from .io import (
    FactorExport,
    InputError,
    RunConfig,
    check_manifest,
    config_hash,
    load_embeddings,
    make_manifest,
    require,
    write_csv,
    write_json,
)
from .panel import Panel, PanelError
from .pipeline import LOOKBACKS, SCHEMES, Workspace, geography_matrix, peer_weights, run_pair, sweep
from .synth import SynthSpec, generate
from .whiten import PCA_DIMS

logger = logging.getLogger("xmfactor")

EXIT_ERROR = 1
EXIT_INPUT = 2
EXIT_AUDIT = 3

# config keys that determine the factor file; backtest reuses factors when these match
FACTOR_KEYS = (
    "firms", "prices", "calendar", "embeddings", "source", "target", "dim", "kappa", "tau",
    "lookback", "variant", "scheme", "shuffle_peers", "seed",
)


# command options outside RunConfig, recorded in the manifest so a rerun from
# it repeats the same command
COMMAND_ARGS = {
    "synth": ("preset", "n_firms", "months", "beta", "lead", "pair_corr", "echo", "no_links", "embedding_format"),
    "graph": ("as_of",),
    "geography": ("markets",),
    "events": ("exclude_markets",),
    "sweep": ("param", "values"),
    "audit": ("months",),
}
ARG_DEFAULTS = {"preset": "lead-lag", "embedding_format": "csv", "no_links": False}


class AuditFailure(RuntimeError):
    pass


# -- config and inputs -----------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if path.suffix == ".json":
            if not path.exists():
                raise InputError(f"manifest not found: {path}")
            stale = check_manifest(path)
            if stale:
                logger.warning("manifest %s is stale; changed inputs: %s", path, ", ".join(stale))
            manifest = json.loads(path.read_text(encoding="utf-8"))
            cfg.update(manifest["config"])
            if manifest.get("command") == args.command:
                for key, value in manifest.get("args", {}).items():
                    if getattr(args, key, None) is None:
                        setattr(args, key, value)
        else:
            cfg = RunConfig.from_file(path)
    for key, value in ARG_DEFAULTS.items():
        if key in COMMAND_ARGS.get(args.command, ()) and getattr(args, key, None) is None:
            setattr(args, key, value)
    overrides = {k: getattr(args, k, None) for k in [f for f in cfg.to_dict()]}
    if getattr(args, "shuffle_peers", False) is False:
        overrides.pop("shuffle_peers", None)
    cfg.update(overrides)
    for key in ("firms", "prices", "calendar", "embeddings", "agent_labels", "sources", "out"):
        value = getattr(cfg, key)
        if value:
            setattr(cfg, key, str(Path(value).resolve()))
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}")
    if cfg.scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {cfg.scheme!r}")
    return cfg


def _need(cfg: RunConfig, *names: str) -> None:
    require({n: getattr(cfg, n) for n in names})


def _need_markets(cfg: RunConfig, *names: str) -> None:
    for n in names:
        if not getattr(cfg, n):
            raise InputError(f"missing required option: --{n}")


def load_panel(cfg: RunConfig) -> Panel:
    _need(cfg, "firms", "prices")
    if cfg.calendar:
        _need(cfg, "calendar")
    return Panel.from_files(cfg.firms, cfg.prices, cfg.calendar)


def load_workspace(cfg: RunConfig, embeddings: bool = True) -> Workspace:
    if embeddings:
        _need(cfg, "firms", "prices", "embeddings")
    panel = load_panel(cfg)
    raw = load_embeddings(cfg.embeddings) if embeddings else None
    return Workspace(panel, raw)


def _inputs(cfg: RunConfig, *names: str) -> dict[str, str]:
    return {n: getattr(cfg, n) for n in names if getattr(cfg, n)}


def finish(args, cfg: RunConfig, command: str, outputs: list[str], inputs: dict[str, str]) -> dict:
    extra = {k: getattr(args, k, None) for k in COMMAND_ARGS.get(command, ())}
    manifest = make_manifest(command, cfg.to_dict(), inputs, outputs, cfg.seed, extra)
    write_json(Path(cfg.out) / f"manifest_{command}.json", manifest)
    return manifest


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _out(cfg)
    presets = {
        "lead-lag": {},
        "events": dict(
            markets={m: args.n_firms or 300 for m in ("US", "JP", "TW", "KR", "HK")},
            months=args.months or 24,
            link_pairs=[],
            event_sources_per_market=5,
            jump_prob=0.045,
            daily_noise=0.008,
        ),
    }
    kw = dict(presets[args.preset])
    if args.preset == "lead-lag":
        n = args.n_firms or 200
        kw["markets"] = {"US": n, "JP": n}
        if args.months:
            kw["months"] = args.months
    for key in ("beta", "lead", "pair_corr", "echo"):
        if getattr(args, key) is not None:
            kw[key] = getattr(args, key)
    if args.no_links:
        kw["link_pairs"] = []
    kw["seed"] = cfg.seed
    spec = SynthSpec(**kw)
    world = generate(spec)
    paths = world.write(out, args.embedding_format)
    ini = [
        "[run]",
        "firms = firms.csv",
        "prices = prices.csv",
        "calendar = calendar.csv",
        "embeddings = embeddings",
        "agent_labels = agent_labels.csv",
        "sources = sources.csv",
    ]
    if args.preset == "lead-lag":
        ini += ["source = US", "target = JP"]
    (out / "config.ini").write_text("\n".join(ini) + "\n", encoding="utf-8")
    finish(args, cfg, "synth", sorted(Path(p).name for p in paths.values()) + ["config.ini"], {})


def _weights_for_graph(cfg: RunConfig, ws: Workspace, as_of):
    if cfg.scheme == "text":
        graph = build_graph(ws.encodings(cfg.dim), ws.panel.firms, cfg.source, cfg.target)
        return graph, sigmoid_weights(graph, cfg.kappa, cfg.tau)
    if cfg.scheme == "gics":
        return None, gics_equal_weights(ws.panel.firms, cfg.source, cfg.target)
    return None, corr_weights(ws.panel, cfg.source, cfg.target, as_of, kappa=cfg.kappa, tau=cfg.tau)


def cmd_graph(args, cfg: RunConfig) -> None:
    _need_markets(cfg, "source", "target")
    ws = load_workspace(cfg, embeddings=cfg.scheme == "text")
    out = _out(cfg)
    as_of = pd.Timestamp(args.as_of) if args.as_of else ws.panel.prices["date"].max()
    graph, weights = _weights_for_graph(cfg, ws, as_of)
    if cfg.shuffle_peers:
        weights = weights.shuffled(cfg.seed)
    stem = f"graph_{cfg.source}_{cfg.target}_{cfg.scheme}"
    if graph is not None:
        frame = graph.to_frame(weights)
        graph.save(out / f"{stem}.npz")
        summary = {"pairs": graph.n_pairs, "low_confidence_pairs": int(graph.low_confidence.sum())}
    else:
        t, s = np.meshgrid(range(len(weights.target_ids)), range(len(weights.source_ids)), indexing="ij")
        frame = pd.DataFrame(
            {
                "target_id": np.asarray(weights.target_ids)[t.ravel()],
                "source_id": np.asarray(weights.source_ids)[s.ravel()],
                "score": np.nan,
                "alpha": weights.alpha.ravel(),
            }
        )
        summary = {"pairs": int(frame.shape[0])}
    write_csv(out / f"{stem}.csv", frame)
    summary.update(
        config=cfg.report_dict(),
        scheme=weights.scheme,
        uncovered_targets=[t for t, u in zip(weights.target_ids, weights.uncovered) if u],
        flags=weights.flags,
    )
    write_json(out / f"{stem}.json", summary)
    outputs = [f"{stem}.csv", f"{stem}.json"] + ([f"{stem}.npz"] if graph is not None else [])
    finish(args, cfg, "graph", outputs, _inputs(cfg, "firms", "prices", "calendar", "embeddings"))


def _factor_panels(cfg: RunConfig, ws: Workspace) -> list[FactorPanel]:
    weights = peer_weights(ws, cfg.scheme, cfg.source, cfg.target, cfg.dim, cfg.kappa, cfg.tau, cfg.shuffle_peers, cfg.seed)
    variants = ["raw", "neutralized"] + (["strict"] if cfg.variant == "strict" else [])
    return [build_factor_panel(ws.panel, weights, cfg.source, cfg.target, cfg.lookback, v) for v in variants]


def _factor_stem(cfg: RunConfig) -> str:
    return f"factors_{cfg.source}_{cfg.target}_L{cfg.lookback}"


def cmd_factor(args, cfg: RunConfig) -> None:
    _need_markets(cfg, "source", "target")
    ws = load_workspace(cfg, embeddings=cfg.scheme == "text")
    out = _out(cfg)
    panels = _factor_panels(cfg, ws)
    export = FactorExport.from_panels(panels)
    stem = _factor_stem(cfg)
    write_csv(out / f"{stem}.csv", export.frame)
    write_json(
        out / f"{stem}.json",
        {
            "config": cfg.report_dict(),
            "factor_config_hash": config_hash(cfg.resolved(*FACTOR_KEYS)),
            "months": int(export.frame["month"].nunique()) if len(export.frame) else 0,
            "neutralization_flags": {
                p.variant: sorted({f"{r.month}:{fl}" for r in p.reports for fl in r.flags}) for p in panels[1:]
            },
        },
    )
    finish(args, cfg, "factor", [f"{stem}.csv", f"{stem}.json"], _inputs(cfg, "firms", "prices", "calendar", "embeddings"))


def _reusable_factors(cfg: RunConfig) -> FactorExport | None:
    """Factor file from a previous ``factor`` run with identical config and inputs."""
    out = Path(cfg.out)
    stem = _factor_stem(cfg)
    meta, data, manifest = out / f"{stem}.json", out / f"{stem}.csv", out / "manifest_factor.json"
    if not (meta.exists() and data.exists() and manifest.exists()):
        return None
    info = json.loads(meta.read_text(encoding="utf-8"))
    if info.get("factor_config_hash") != config_hash(cfg.resolved(*FACTOR_KEYS)):
        return None
    stale = check_manifest(manifest)
    if stale:
        logger.warning("factor manifest is stale (%s); recomputing", ", ".join(stale))
        return None
    export = FactorExport.read(data)
    if cfg.variant not in export.frame.columns:
        return None
    logger.info("reusing %s", data.name)
    return export


def cmd_backtest(args, cfg: RunConfig) -> None:
    _need_markets(cfg, "source", "target")
    out = _out(cfg)
    export = _reusable_factors(cfg)
    if export is not None:
        panel = load_panel(cfg)
        values = export.panel_values(cfg.variant)
        factors = FactorPanel(values, cfg.variant, cfg.source, cfg.target, cfg.lookback, cfg.scheme)
        reused = True
    else:
        ws = load_workspace(cfg, embeddings=cfg.scheme == "text")
        panel = ws.panel
        weights = peer_weights(ws, cfg.scheme, cfg.source, cfg.target, cfg.dim, cfg.kappa, cfg.tau, cfg.shuffle_peers, cfg.seed)
        factors = build_factor_panel(panel, weights, cfg.source, cfg.target, cfg.lookback, cfg.variant)
        reused = False
    report = run_backtest(factors, panel.monthly_returns(cfg.target), cfg.cost_bp, cfg.report_dict())
    stem = f"report_{cfg.source}_{cfg.target}_L{cfg.lookback}_{cfg.variant}"
    payload = report.to_dict()
    payload["factors_reused"] = reused
    write_json(out / f"{stem}.json", payload)
    wealth = pd.DataFrame({"month": [str(m) for m in report.wealth.index], "wealth": report.wealth.to_numpy()})
    write_csv(out / f"{stem}_wealth.csv", wealth)
    finish(args, cfg, "backtest", [f"{stem}.json", f"{stem}_wealth.csv"], _inputs(cfg, "firms", "prices", "calendar", "embeddings"))


def cmd_geography(args, cfg: RunConfig) -> None:
    ws = load_workspace(cfg, embeddings=cfg.scheme == "text")
    out = _out(cfg)
    markets = args.markets.split(",") if args.markets else None
    result = geography_matrix(ws, markets, cfg.dim, cfg.lookback, cfg.kappa, cfg.tau, cfg.cost_bp, cfg.scheme, cfg.threads)
    result["config"] = cfg.report_dict()
    write_json(out / "geography.json", result)
    matrix = pd.DataFrame(result["matrix"]).T.reindex(index=result["markets"], columns=result["markets"])
    matrix.index.name = "source"
    write_csv(out / "geography_matrix.csv", matrix.reset_index())
    finish(args, cfg, "geography", ["geography.json", "geography_matrix.csv"], _inputs(cfg, "firms", "prices", "calendar", "embeddings"))


def cmd_events(args, cfg: RunConfig) -> None:
    _need(cfg, "firms", "prices", "embeddings", "sources")
    ws = load_workspace(cfg)
    out = _out(cfg)
    sources = pd.read_csv(cfg.sources, dtype=str)["firm_id"].tolist()
    unknown = [s for s in sources if s not in ws.panel.firms.index]
    if unknown:
        raise InputError(f"source firm not in universe: {unknown[0]}")
    labels = None
    if cfg.agent_labels:
        _need(cfg, "agent_labels")
        labels = load_agent_labels(cfg.agent_labels)
    events = detect_events(ws.panel, sources, cfg.threshold)
    exclude = args.exclude_markets.split(",") if args.exclude_markets else ()
    study = run_event_study(
        ws.panel,
        ws.encodings(cfg.dim),
        events,
        cfg.k,
        labels,
        cfg.null_draws,
        cfg.seed,
        exclude_markets=exclude,
        window_years=cfg.window_years,
        min_confidence=cfg.min_confidence,
    )
    report = {
        "config": cfg.report_dict(),
        "n_events": len(events),
        "window_years": study.window_years,
        "flags": study.flags,
        "by_k": {str(k): study.report(k, cfg.bootstrap_draws, cfg.seed) for k in cfg.k},
    }
    write_json(out / "events_report.json", report)
    rows = {"source_id": [e.source_id for e in events], "date": [f"{e.date:%Y-%m-%d}" for e in events]}
    rows["trigger"] = [e.trigger for e in events]
    for (k, kind), r in sorted(study.returns.items()):
        rows[f"{kind}_k{k}"] = r
    write_csv(out / "events.csv", pd.DataFrame(rows))
    finish(
        args,
        cfg,
        "events",
        ["events_report.json", "events.csv"],
        _inputs(cfg, "firms", "prices", "calendar", "embeddings", "sources", "agent_labels"),
    )


def cmd_sweep(args, cfg: RunConfig) -> None:
    if not args.param:
        raise InputError("missing required option: --param")
    _need_markets(cfg, "source", "target")
    ws = load_workspace(cfg, embeddings=cfg.scheme == "text")
    out = _out(cfg)
    default = PCA_DIMS if args.param == "dim" else LOOKBACKS
    values = [int(v) for v in args.values.split(",")] if args.values else list(default)
    rows = sweep(
        ws, args.param, values, cfg.source, cfg.target, cfg.dim, cfg.lookback, cfg.variant,
        cfg.kappa, cfg.tau, cfg.cost_bp, cfg.scheme, cfg.threads,
    )
    stem = f"sweep_{args.param}_{cfg.source}_{cfg.target}"
    write_json(out / f"{stem}.json", {"config": cfg.report_dict(), "param": args.param, "rows": rows})
    write_csv(out / f"{stem}.csv", pd.DataFrame(rows))
    finish(args, cfg, "sweep", [f"{stem}.json", f"{stem}.csv"], _inputs(cfg, "firms", "prices", "calendar", "embeddings"))


def cmd_audit(args, cfg: RunConfig) -> None:
    _need_markets(cfg, "source", "target")
    ws = load_workspace(cfg, embeddings=cfg.scheme == "text")
    out = _out(cfg)
    weights = peer_weights(ws, cfg.scheme, cfg.source, cfg.target, cfg.dim, cfg.kappa, cfg.tau, cfg.shuffle_peers, cfg.seed)
    months = ws.panel.months[1:]
    if args.months:
        months = months[-args.months :]
    result = lookahead_audit(ws.panel, weights, cfg.source, cfg.target, cfg.lookback, cfg.variant, months, cfg.seed)
    payload = result.to_dict()
    payload["config"] = cfg.report_dict()
    stem = f"audit_{cfg.source}_{cfg.target}_L{cfg.lookback}_{cfg.variant}"
    write_json(out / f"{stem}.json", payload)
    finish(args, cfg, "audit", [f"{stem}.json"], _inputs(cfg, "firms", "prices", "calendar", "embeddings"))
    if not result.passed:
        raise AuditFailure(f"look-ahead audit failed in {len(result.contaminated)} months")


COMMANDS = {
    "synth": cmd_synth,
    "graph": cmd_graph,
    "factor": cmd_factor,
    "backtest": cmd_backtest,
    "geography": cmd_geography,
    "events": cmd_events,
    "sweep": cmd_sweep,
    "audit": cmd_audit,
}


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="key = value file with a [run] section, or a manifest JSON to rerun")
    g.add_argument("--firms")
    g.add_argument("--prices")
    g.add_argument("--calendar")
    g.add_argument("--embeddings", help="directory with one file per category")
    g.add_argument("--agent-labels", dest="agent_labels")
    g.add_argument("--sources", help="CSV with a firm_id column listing event source firms")
    g.add_argument("--source")
    g.add_argument("--target")
    g.add_argument("--dim", type=int)
    g.add_argument("--kappa", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--lookback", type=int)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--scheme", choices=SCHEMES)
    g.add_argument("--shuffle-peers", dest="shuffle_peers", action="store_true", help="permute source firms (placebo)")
    g.add_argument("--cost-bp", dest="cost_bp", type=float)
    g.add_argument("--threshold", type=float)
    g.add_argument("--k", help="comma-separated basket sizes")
    g.add_argument("--null-draws", dest="null_draws", type=int)
    g.add_argument("--bootstrap-draws", dest="bootstrap_draws", type=int)
    g.add_argument("--min-confidence", dest="min_confidence", type=float)
    g.add_argument("--window-years", dest="window_years", type=float, help="event window length for Sharpe")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--threads", type=int)
    g.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="xmfactor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic world with planted structure")
    p.add_argument("--preset", choices=("lead-lag", "events"), help="default: lead-lag")
    p.add_argument("--firms-per-market", dest="n_firms", type=int)
    p.add_argument("--months", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--lead", type=int)
    p.add_argument("--pair-corr", dest="pair_corr", type=float)
    p.add_argument("--echo", type=float)
    p.add_argument("--no-links", action="store_true", default=None, help="plant no lead-lag links")
    p.add_argument("--embedding-format", choices=("csv", "npz"), help="default: csv")

    p = sub.add_parser("graph", parents=[common], help="score a market pair and export peer weights")
    p.add_argument("--as-of", dest="as_of", help="formation date for the corr scheme (default: last date)")
    sub.add_parser("factor", parents=[common], help="monthly factor panel (raw and neutralized)")
    sub.add_parser("backtest", parents=[common], help="quintile long-short backtest and metrics")
    p = sub.add_parser("geography", parents=[common], help="neutralized ICIR for every ordered market pair")
    p.add_argument("--markets", help="comma-separated subset of markets")
    p = sub.add_parser("events", parents=[common], help="event-conditioned basket study")
    p.add_argument("--exclude-markets", dest="exclude_markets", help="comma-separated markets to leave out")
    p = sub.add_parser("sweep", parents=[common], help="vary PCA dimension or lookback")
    p.add_argument("--param", choices=("dim", "lookback"), help="required unless rerunning a sweep manifest")
    p.add_argument("--values", help="comma-separated values (default: the standard grid)")
    p = sub.add_parser("audit", parents=[common], help="look-ahead perturbation audit")
    p.add_argument("--months", type=int, help="audit only the last N months")
    return parser


def error_record(command: str | None, exc: BaseException, code: int) -> dict:
    return {"command": command, "error": type(exc).__name__, "message": str(exc), "exit_code": code}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
        return 0
    except Exception as exc:
        if isinstance(exc, AuditFailure):
            code = EXIT_AUDIT
        elif isinstance(exc, (InputError, FileNotFoundError, PanelError)):
            code = EXIT_INPUT
        else:
            code = EXIT_ERROR
        record = error_record(args.command, exc, code)
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        if cfg is not None and cfg.out:
            try:
                write_json(Path(cfg.out) / "error.json", record)
            except OSError:
                pass
        if args.verbose:
            logger.exception("command failed")
        return code


if __name__ == "__main__":
    sys.exit(main())
