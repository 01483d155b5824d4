"""Event-conditioned daily spillover evaluation.

A source firm's large market-relative up-move on day ``D`` triggers an event.
Baskets of its graph neighbours (optionally filtered by agent labels) are
bought at the ``D+2`` open and sold at the ``D+3`` open, each member on its own
market's calendar, and compared with composition-matched random baskets.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import percentileofscore

from .graph import top_k_neighbors
from .panel import Panel
from .whiten import Encodings

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.03
DEFAULT_KS = (10, 20, 30, 60)
NULL_DRAWS = 200
BOOTSTRAP_DRAWS = 2000
SHORTLIST = 60

GRAPH_KINDS = ("graph_topk", "graph_plus_agent")
NULL_MODES = ("market", "market_sector")
NULL_KINDS = {"market": "market_random", "market_sector": "market_sector_random"}


class EventError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    source_id: str
    date: pd.Timestamp
    trigger: float

    @property
    def key(self) -> int:
        """Order-independent integer id used to derive per-event generators."""
        return zlib.crc32(f"{self.source_id}|{self.date:%Y-%m-%d}".encode())


def detect_events(
    panel: Panel,
    source_ids,
    threshold: float = DEFAULT_THRESHOLD,
    start=None,
    end=None,
) -> list[EventRecord]:
    """All (source, D) with market-relative close-to-close return above ``threshold``.

    Days where the firm lacks a print on D or the prior trading day have no
    return and are skipped.
    """
    events = []
    for sid in source_ids:
        rel = panel.market_relative_close(panel.market_of(sid))[sid]
        if start is not None:
            rel = rel.loc[pd.Timestamp(start):]
        if end is not None:
            rel = rel.loc[: pd.Timestamp(end)]
        hits = rel[rel > threshold]
        events.extend(EventRecord(sid, d, float(v)) for d, v in hits.items())
    events.sort(key=lambda e: (e.date, e.source_id))
    return events


# -- agent labels --------------------------------------------------------------


@dataclass(frozen=True)
class AgentLabel:
    candidate: str
    relation: str
    sign: int
    confidence: float
    rationale: str = ""


def _label(source: str, rec: dict) -> AgentLabel:
    try:
        sign = int(rec["sign"])
        conf = float(rec["confidence"])
    except (KeyError, TypeError, ValueError) as exc:
        raise EventError(f"malformed label for {source}: {rec!r}") from exc
    if sign not in (-1, 0, 1):
        raise EventError(f"label sign out of range for {source}/{rec.get('ticker')}: {sign}")
    if not 0.0 <= conf <= 1.0:
        raise EventError(f"label confidence out of range for {source}/{rec.get('ticker')}: {conf}")
    return AgentLabel(str(rec["ticker"]), str(rec.get("relation", "")), sign, conf, str(rec.get("rationale", "")))


def load_agent_labels(path: str | Path) -> dict[str, dict[str, AgentLabel]]:
    """Read agent labels keyed by source firm then candidate.

    Accepts CSV with columns ``source_id,ticker,relation,sign,confidence,rationale``
    or JSON mapping each source id to a list of label objects.
    """
    path = Path(path)
    out: dict[str, dict[str, AgentLabel]] = {}
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        for source, recs in data.items():
            out[str(source)] = {lab.candidate: lab for lab in (_label(source, r) for r in recs)}
        return out
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    for rec in frame.to_dict("records"):
        source = rec["source_id"]
        lab = _label(source, rec)
        out.setdefault(source, {})[lab.candidate] = lab
    return out


def make_baskets(
    ranked: list[tuple[str, float]],
    k: int,
    labels: dict[str, AgentLabel] | None = None,
    min_confidence: float = 0.0,
    shortlist_size: int = SHORTLIST,
) -> dict[str, list[str]]:
    """Graph top-K basket and, with labels, the co-mover-filtered basket.

    ``ranked`` is the source's neighbour list in similarity order.  The
    filtered basket keeps members of the first ``shortlist_size`` names that are
    labelled sign +1, in similarity order, up to ``k``.  It is never padded and
    never contains names outside that shortlist.
    """
    names = [f for f, _ in ranked]
    baskets = {"graph_topk": names[:k]}
    if labels is not None:
        shortlist = names[:shortlist_size]
        stray = set(labels) - set(shortlist)
        if stray:
            logger.debug("ignoring %d labels outside the shortlist", len(stray))
        keep = [
            f
            for f in shortlist
            if f in labels and labels[f].sign == 1 and labels[f].confidence >= min_confidence
        ]
        baskets["graph_plus_agent"] = keep[:k]
    return baskets


# -- random nulls --------------------------------------------------------------


class NullSampler:
    """Composition-matched random baskets over the listed universe.

    Firms are addressed by position in ``firm_ids`` so that draws can be
    gathered straight from a per-event return vector.
    """

    def __init__(self, firms: pd.DataFrame, firm_ids=None):
        self.firm_ids = list(firms.index if firm_ids is None else firm_ids)
        self.pos = {f: k for k, f in enumerate(self.firm_ids)}
        sub = firms.loc[self.firm_ids]
        self.market = sub["market"].to_numpy()
        self.sector = sub["sector"].to_numpy()
        listed = sub["listed"].to_numpy(bool)
        self._market_pool = {
            m: np.flatnonzero(listed & (self.market == m)) for m in np.unique(self.market)
        }
        self._cell_pool = {}
        for m, s in set(zip(self.market, self.sector)):
            self._cell_pool[(m, s)] = np.flatnonzero(listed & (self.market == m) & (self.sector == s))

    def draw(
        self,
        members: list[str],
        source_id: str,
        mode: str,
        draws: int,
        rng: np.random.Generator,
    ) -> tuple[np.ndarray, list[str]]:
        """``draws x len(members)`` matrix of firm positions, plus flags.

        The pool excludes only the source firm.  In market+sector mode a cell
        whose pool is smaller than the required count falls back to the rest of
        the same market.
        """
        if mode not in NULL_MODES:
            raise EventError(f"unknown null mode {mode!r}")
        src = self.pos.get(source_id, -1)
        idx = [self.pos[f] for f in members]
        flags: list[str] = []
        if mode == "market":
            cells = Counter(self.market[idx])
            plan = [(self._market_pool[m], c) for m, c in cells.items()]
        else:
            cells = Counter(zip(self.market[idx], self.sector[idx]))
            plan, matched, short = [], {}, Counter()
            for (m, s), c in cells.items():
                pool = self._cell_pool[(m, s)]
                if np.count_nonzero(pool != src) >= c:
                    plan.append((pool, c))
                    matched.setdefault(m, set()).add(s)
                else:
                    short[m] += c
                    flags.append(f"fallback:{m}/{s}")
            for m, c in short.items():
                # rest of the market, disjoint from the cells already matched
                pool = self._market_pool[m]
                pool = pool[~np.isin(self.sector[pool], sorted(matched.get(m, ())))]
                plan.append((pool, c))
        out = []
        for pool, count in plan:
            pool = pool[pool != src]
            if len(pool) < count:
                flags.append("short_pool")
                count = len(pool)
            if count == 0:
                continue
            keys = rng.random((draws, len(pool)))
            pick = np.argpartition(keys, count - 1, axis=1)[:, :count] if count < len(pool) else np.tile(np.arange(len(pool)), (draws, 1))
            out.append(pool[pick])
        if not out:
            return np.empty((draws, 0), dtype=np.int64), flags
        return np.hstack(out), flags


def event_rng(seed: int, event: EventRecord, mode: str, k: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), event.key, NULL_MODES.index(mode), int(k)])
    return np.random.default_rng(ss)


def random_null_baskets(
    event: EventRecord,
    members: list[str],
    sampler: NullSampler,
    mode: str,
    draws: int = NULL_DRAWS,
    seed: int = 0,
) -> tuple[list[list[str]], list[str]]:
    """Random baskets matching ``members``' market (or market x sector) mix."""
    rng = event_rng(seed, event, mode, len(members))
    pos, flags = sampler.draw(members, event.source_id, mode, draws, rng)
    ids = np.asarray(sampler.firm_ids, dtype=object)
    return [list(ids[row]) for row in pos], flags


# -- returns -------------------------------------------------------------------


def execution_returns(panel: Panel, date, firm_ids) -> np.ndarray:
    """Market-relative D+2 open to D+3 open return for each firm (NaN if unprintable)."""
    out = np.full(len(firm_ids), np.nan)
    ids = pd.Index(firm_ids)
    markets = panel.firms.loc[ids, "market"].to_numpy()
    for m in np.unique(markets):
        row = panel.execution_row(m, date, 2)
        if row is None:
            continue
        sel = np.flatnonzero(markets == m)
        rel = panel.market_relative_open(m).iloc[row]
        out[sel] = rel.reindex(ids[sel]).to_numpy(float)
    return out


class ExecutionGrid:
    """Per-market arrays of market-relative D+2 open to D+3 open returns laid
    out against a fixed firm universe, for fast per-event gathers."""

    def __init__(self, panel: Panel, firm_ids):
        self.panel = panel
        ids = pd.Index(firm_ids)
        markets = panel.firms.loc[ids, "market"].to_numpy()
        self._blocks = []
        for m in np.unique(markets):
            sel = np.flatnonzero(markets == m)
            rel = panel.market_relative_open(m).reindex(columns=ids[sel])
            self._blocks.append((m, sel, rel.to_numpy(float)))
        self.n = len(ids)

    def returns(self, date) -> np.ndarray:
        out = np.full(self.n, np.nan)
        for m, sel, arr in self._blocks:
            row = self.panel.execution_row(m, date, 2)
            if row is not None:
                out[sel] = arr[row]
        return out


def nanmean(a: np.ndarray, axis: int) -> np.ndarray:
    """NaN-skipping mean that returns NaN (silently) for all-NaN slices."""
    ok = np.isfinite(a)
    n = ok.sum(axis=axis)
    s = np.where(ok, a, 0.0).sum(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, s / np.maximum(n, 1), np.nan)


def basket_return(values: np.ndarray) -> float:
    """Equal-weight mean over members with a print; NaN if none printed."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan
    return float(nanmean(values, axis=0))


def event_return(panel: Panel, event: EventRecord, members: list[str]) -> float:
    return basket_return(execution_returns(panel, event.date, members))


# -- statistics ----------------------------------------------------------------


def aggregate(returns, window_years: float) -> dict[str, float]:
    """Per-event mean, t-stat, event-rate-annualized Sharpe and compound CumRet."""
    r = np.asarray(returns, dtype=float)
    r = r[np.isfinite(r)]
    n = len(r)
    out = {"n_events": n, "mean": math.nan, "std": math.nan, "t": math.nan, "sharpe": math.nan, "cumret": math.nan}
    if n < 2:
        return out
    mean = float(r.mean())
    sd = 0.0 if r.min() == r.max() else float(r.std(ddof=1))
    out.update(mean=mean, std=sd, cumret=float(np.prod(1.0 + r) - 1.0))
    if sd > 0:
        out["t"] = mean / (sd / math.sqrt(n))
        out["sharpe"] = mean / sd * math.sqrt(n / window_years)
    return out


def null_summary(null_matrix: np.ndarray, graph_mean: float) -> dict[str, float]:
    """Summarize a ``draws x events`` null: seed-level means, their mean/p95,
    and the graph basket's percentile among them."""
    seed_means = nanmean(null_matrix, axis=1) if null_matrix.size else np.array([])
    seed_means = seed_means[np.isfinite(seed_means)]
    if seed_means.size == 0:
        return {"null_mean": math.nan, "null_p95": math.nan, "graph_percentile": math.nan, "draws": 0}
    pct = float(percentileofscore(seed_means, graph_mean, kind="weak")) if np.isfinite(graph_mean) else math.nan
    return {
        "null_mean": float(seed_means.mean()),
        "null_p95": float(np.percentile(seed_means, 95)),
        "graph_percentile": pct,
        "draws": int(seed_means.size),
    }


def cluster_bootstrap(
    returns,
    clusters,
    draws: int = BOOTSTRAP_DRAWS,
    seed: int = 0,
    level: float = 0.95,
) -> dict[str, float]:
    """Resample source firms (clusters) with replacement.

    Each draw's statistic is the mean over every event of the sampled firms,
    counting a firm drawn m times m times.
    """
    r = np.asarray(returns, dtype=float)
    c = np.asarray(clusters)
    ok = np.isfinite(r)
    r, c = r[ok], c[ok]
    labels, codes = np.unique(c, return_inverse=True)
    g = len(labels)
    if g < 2:
        raise EventError("cluster bootstrap needs events from at least 2 source firms")
    sums = np.bincount(codes, weights=r, minlength=g)
    counts = np.bincount(codes, minlength=g).astype(float)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), g]))
    picks = rng.integers(0, g, size=(draws, g))
    mult = np.zeros((draws, g))
    np.add.at(mult, (np.repeat(np.arange(draws), g), picks.ravel()), 1.0)
    stats = (mult @ sums) / (mult @ counts)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return {
        "mean": float(r.mean()),
        "ci_low": float(lo),
        "ci_high": float(hi),
        "p_positive": float(np.mean(stats > 0)),
        "draws": int(draws),
        "clusters": int(g),
    }


# -- full study ----------------------------------------------------------------


@dataclass
class EventStudy:
    events: list[EventRecord]
    returns: dict[tuple[int, str], np.ndarray]  # (K, kind) -> per-event returns
    nulls: dict[tuple[int, str], np.ndarray]  # (K, mode) -> draws x events
    window_years: float
    flags: dict[str, int] = field(default_factory=dict)

    def report(self, k: int, bootstrap_draws: int = BOOTSTRAP_DRAWS, seed: int = 0) -> dict:
        clusters = [e.source_id for e in self.events]
        out = {}
        graph = self.returns.get((k, "graph_topk"))
        graph_mean = aggregate(graph, self.window_years)["mean"] if graph is not None else math.nan
        for kind in GRAPH_KINDS:
            r = self.returns.get((k, kind))
            if r is None:
                continue
            stats = aggregate(r, self.window_years)
            try:
                stats["bootstrap"] = cluster_bootstrap(r, clusters, bootstrap_draws, seed)
            except EventError as exc:
                stats["bootstrap"] = {"error": str(exc)}
            out[kind] = stats
        for mode in NULL_MODES:
            mat = self.nulls.get((k, mode))
            if mat is None:
                continue
            per_event = nanmean(mat, axis=0) if mat.size else np.array([])
            stats = aggregate(per_event, self.window_years)
            stats.update(null_summary(mat, graph_mean))
            out[NULL_KINDS[mode]] = stats
        return out


def run_event_study(
    panel: Panel,
    enc: Encodings,
    events: list[EventRecord],
    ks=DEFAULT_KS,
    labels: dict[str, dict[str, AgentLabel]] | None = None,
    draws: int = NULL_DRAWS,
    seed: int = 0,
    shortlist_size: int = SHORTLIST,
    exclude_markets=(),
    window_years: float | None = None,
    min_confidence: float = 0.0,
) -> EventStudy:
    """Evaluate graph, agent-filtered and random baskets for every event."""
    firms = panel.firms
    if not events:
        raise EventError("no events to evaluate")
    size = max(max(ks), shortlist_size)
    shortlists = {
        sid: top_k_neighbors(enc, firms, sid, size, exclude_home=True, exclude_markets=exclude_markets)
        for sid in sorted({e.source_id for e in events})
    }
    sampler = NullSampler(firms)
    grid = ExecutionGrid(panel, sampler.firm_ids)
    n = len(events)
    returns = {(k, kind): np.full(n, np.nan) for k in ks for kind in GRAPH_KINDS}
    if labels is None:
        for k in ks:
            del returns[(k, "graph_plus_agent")]
    nulls = {(k, mode): np.full((draws, n), np.nan) for k in ks for mode in NULL_MODES} if draws > 0 else {}
    flag_counts: dict[str, int] = {}

    for e_idx, ev in enumerate(events):
        vec = grid.returns(ev.date)
        ranked = shortlists[ev.source_id]
        src_labels = labels.get(ev.source_id, {}) if labels is not None else None
        for k in ks:
            baskets = make_baskets(ranked, k, src_labels, min_confidence, shortlist_size)
            for kind, members in baskets.items():
                returns[(k, kind)][e_idx] = basket_return(vec[[sampler.pos[f] for f in members]])
            for mode in NULL_MODES if draws > 0 else ():
                rng = event_rng(seed, ev, mode, k)
                pos, flags = sampler.draw(baskets["graph_topk"], ev.source_id, mode, draws, rng)
                for fl in flags:
                    name = fl.split(":")[0]
                    flag_counts[name] = flag_counts.get(name, 0) + 1
                if pos.shape[1]:
                    nulls[(k, mode)][:, e_idx] = nanmean(vec[pos], axis=1)

    if window_years is None:
        span = (events[-1].date - events[0].date).days / 365.25
        window_years = max(span, 1.0 / 365.25)
    return EventStudy(events, returns, nulls, window_years, flag_counts)
