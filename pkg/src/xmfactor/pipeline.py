"""Composable research runs: peer weights -> factor panel -> backtest, for one
market pair, all ordered pairs (the geography matrix) or a parameter sweep."""

from __future__ import annotations

import logging
import math
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .backtest import BacktestReport, run_backtest
from .factor import FactorPanel, WeightsLike, build_factor_panel
from .graph import KAPPA, TAU, build_graph, corr_weights, gics_equal_weights, sigmoid_weights
from .panel import Panel
from .whiten import Encodings, encode

logger = logging.getLogger(__name__)

SCHEMES = ("text", "gics", "corr")
LOOKBACKS = (1, 3, 6, 12, 24, 36)


@dataclass
class Workspace:
    """A loaded panel plus raw embeddings, with whitened encodings cached per ``d``."""

    panel: Panel
    raw_embeddings: dict | None = None
    _encodings: dict[int, Encodings] = field(default_factory=dict, repr=False)

    def encodings(self, d: int) -> Encodings:
        if self.raw_embeddings is None:
            raise ValueError("no embeddings loaded")
        if d not in self._encodings:
            self._encodings[d], _ = encode(self.raw_embeddings, d)
        return self._encodings[d]


class _MonthlyWeights:
    """Callable weights recomputed each month (cached), optionally shuffled."""

    def __init__(self, fn, shuffle_seed: int | None = None):
        self.fn = fn
        self.shuffle_seed = shuffle_seed
        # keyed by panel so the audit's perturbed copies never hit the original's entries
        self._cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    def __call__(self, panel: Panel, month: pd.Period):
        per_panel = self._cache.setdefault(panel, {})
        if month not in per_panel:
            w = self.fn(panel, month)
            if self.shuffle_seed is not None:
                w = w.shuffled(self.shuffle_seed)
            per_panel[month] = w
        return per_panel[month]


def peer_weights(
    ws: Workspace,
    scheme: str,
    source_market: str,
    target_market: str,
    d: int = 128,
    kappa: float = KAPPA,
    tau: float = TAU,
    shuffle: bool = False,
    seed: int = 0,
) -> WeightsLike:
    """Peer weights for one ordered pair under ``scheme`` (text, gics or corr)."""
    if scheme == "text":
        graph = build_graph(ws.encodings(d), ws.panel.firms, source_market, target_market)
        w = sigmoid_weights(graph, kappa, tau)
    elif scheme == "gics":
        w = gics_equal_weights(ws.panel.firms, source_market, target_market)
    elif scheme == "corr":

        def monthly(panel: Panel, month: pd.Period):
            # correlations known at the end of the formation month M-1
            return corr_weights(panel, source_market, target_market, (month - 1).end_time, kappa=kappa, tau=tau)

        return _MonthlyWeights(monthly, seed if shuffle else None)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return w.shuffled(seed) if shuffle else w


def run_pair(
    panel: Panel,
    weights: WeightsLike,
    source_market: str,
    target_market: str,
    lookback: int = 12,
    variant: str = "neutralized",
    cost_bp: float = 2.0,
    config: dict | None = None,
    months=None,
) -> tuple[FactorPanel, BacktestReport]:
    factors = build_factor_panel(panel, weights, source_market, target_market, lookback, variant, months)
    report = run_backtest(factors, panel.monthly_returns(target_market), cost_bp, config)
    return factors, report


def _map(fn, jobs, threads: int):
    """Run ``fn`` over ``jobs`` keeping input order (results never depend on scheduling)."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def geography_matrix(
    ws: Workspace,
    markets=None,
    d: int = 128,
    lookback: int = 12,
    kappa: float = KAPPA,
    tau: float = TAU,
    cost_bp: float = 2.0,
    scheme: str = "text",
    threads: int = 1,
) -> dict:
    """Neutralized ICIR for every ordered (source, target) pair.

    A failed pair leaves its cell missing and is listed under ``errors``.
    Portfolio metrics are reported for both the raw and the neutralized sort.
    """
    markets = list(markets or ws.panel.markets)
    if scheme == "text":
        ws.encodings(d)  # fit once before fanning out
    jobs = [(s, t) for s in markets for t in markets]

    def job(pair):
        s, t = pair
        try:
            w = peer_weights(ws, scheme, s, t, d, kappa, tau)
            out = {}
            for variant in ("raw", "neutralized"):
                _, rep = run_pair(ws.panel, w, s, t, lookback, variant, cost_bp)
                out[variant] = rep.metrics()
            return s, t, out, None
        except Exception as exc:  # a failed cell must not sink the matrix
            logger.warning("pair %s->%s failed: %s", s, t, exc)
            return s, t, None, f"{type(exc).__name__}: {exc}"

    results = _map(job, jobs, threads)
    G = pd.DataFrame(np.nan, index=pd.Index(markets, name="source"), columns=pd.Index(markets, name="target"))
    portfolios, errors = {}, {}
    for s, t, out, err in results:
        if err is not None:
            errors[f"{s}->{t}"] = err
            continue
        G.loc[s, t] = out["neutralized"]["ICIR"]
        portfolios[f"{s}->{t}"] = out
    summary = {}
    for t in markets:
        cross = G.loc[[s for s in markets if s != t], t].dropna()
        best = cross.idxmax() if len(cross) else None
        best_icir = float(cross.max()) if len(cross) else math.nan
        domestic = float(G.loc[t, t])
        summary[t] = {
            "best_source": best,
            "best_cross_icir": best_icir,
            "domestic_icir": domestic,
            "gain": best_icir - domestic,
        }
    return {
        "markets": markets,
        "matrix": {s: {t: G.loc[s, t] for t in markets} for s in markets},
        "per_target": summary,
        "portfolios": portfolios,
        "errors": errors,
    }


def sweep(
    ws: Workspace,
    param: str,
    values,
    source_market: str,
    target_market: str,
    d: int = 128,
    lookback: int = 12,
    variant: str = "neutralized",
    kappa: float = KAPPA,
    tau: float = TAU,
    cost_bp: float = 2.0,
    scheme: str = "text",
    threads: int = 1,
) -> list[dict]:
    """One metrics row per value of ``param`` ("dim" or "lookback"), all else held fixed."""
    if param not in ("dim", "lookback"):
        raise ValueError(f"cannot sweep {param!r}; expected 'dim' or 'lookback'")
    values = list(values)
    if param == "dim":
        for v in values:
            try:
                ws.encodings(int(v))
            except Exception:
                pass  # reported per row below

    def job(v):
        dd = int(v) if param == "dim" else d
        ll = int(v) if param == "lookback" else lookback
        row = {param: int(v)}
        try:
            w = peer_weights(ws, scheme, source_market, target_market, dd, kappa, tau)
            _, rep = run_pair(ws.panel, w, source_market, target_market, ll, variant, cost_bp)
            row.update(rep.metrics())
        except Exception as exc:
            logger.warning("sweep %s=%s failed: %s", param, v, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    return _map(job, values, threads)
