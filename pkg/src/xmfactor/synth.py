"""Synthetic multi-market universes with planted cross-market structure.

Two kinds of truth can be planted, independently or together:

* monthly lead-lag links: a target firm's month-``t`` log return loads ``beta``
  on its source partner's month ``t - lead`` log return;
* event echoes: selected source firms take one-day jumps, and their planted
  neighbours earn an extra ``echo`` between the ``D+2`` and ``D+3`` opens of
  their own calendar.

Linked firms share a latent vector in every embedding category, so a working
whitening + graph pipeline should rank them as each other's nearest peers.
Everything is a pure function of the spec (seed included).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .panel import MARKETS
from .whiten import CATEGORIES


def sigma_for_correlation(beta: float, source_vol: float, rho: float) -> float:
    """Idiosyncratic monthly vol giving planted-pair correlation ``rho``."""
    if not 0 < rho < 1:
        raise ValueError("rho must be in (0, 1)")
    return beta * source_vol * math.sqrt(1.0 / rho**2 - 1.0)


@dataclass
class SynthSpec:
    markets: dict[str, int] = field(default_factory=lambda: {"US": 200, "JP": 200})
    months: int = 120
    start: str = "2015-01-01"
    days_per_month: int | None = None  # None: every business day
    holiday_rate: float = 0.02
    sectors: int = 8
    # monthly lead-lag plant: (target market, source market) pairs
    link_pairs: list[tuple[str, str]] = field(default_factory=lambda: [("JP", "US")])
    beta: float = 0.5
    lead: int = 1
    source_vol: float = 0.06
    sigma: float | None = None  # target idiosyncratic monthly vol; None -> from pair_corr
    pair_corr: float = 0.3
    market_vol: float = 0.03
    sector_vol: float = 0.02
    # embeddings
    embed_dim: int = 192
    categories: int = 10
    style_strength: float = 4.0
    latent_strength: float = 1.0
    embed_noise: float = 0.6
    # event plant
    event_sources_per_market: int = 0
    echo_neighbors: int = 10
    jump_prob: float = 0.0
    jump_range: tuple[float, float] = (0.04, 0.08)
    echo: float = 0.005
    daily_noise: float | None = None  # override daily idiosyncratic vol for every firm
    agent_hit_rate: float = 0.9
    agent_false_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for m in self.markets:
            if m not in MARKETS:
                raise ValueError(f"unknown market {m!r}")
        if self.beta < 0 or (self.sigma is not None and self.sigma < 0):
            raise ValueError("beta and sigma must be non-negative")
        if self.lead < 0:
            raise ValueError("lead must be >= 0")
        if self.categories > len(CATEGORIES):
            raise ValueError(f"at most {len(CATEGORIES)} categories")
        self.link_pairs = [tuple(p) for p in self.link_pairs]
        self.jump_range = tuple(self.jump_range)

    @property
    def target_sigma(self) -> float:
        if self.sigma is not None:
            return self.sigma
        return sigma_for_correlation(self.beta, self.source_vol, self.pair_corr)


@dataclass
class SynthWorld:
    spec: SynthSpec
    firms: pd.DataFrame  # columns firm_id, market, sector, listed
    prices: pd.DataFrame
    calendars: dict[str, pd.DatetimeIndex]
    embeddings: dict[str, tuple[list[str], np.ndarray]]
    links: pd.DataFrame  # target_id, source_id, beta, lead
    event_neighbors: dict[str, list[str]]
    jumps: pd.DataFrame  # source_id, date, size
    agent_labels: pd.DataFrame
    echoes: pd.DataFrame  # firm_id, date, size: planted D+2 open-to-open add-ons

    @property
    def event_sources(self) -> list[str]:
        return list(self.event_neighbors)

    def write(self, out_dir: str | Path, embedding_format: str = "csv") -> dict[str, str]:
        """Write the input files the loaders consume; returns name -> path."""
        out = Path(out_dir)
        emb_dir = out / "embeddings"
        emb_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "firms": out / "firms.csv",
            "prices": out / "prices.csv",
            "calendar": out / "calendar.csv",
            "embeddings": emb_dir,
            "links": out / "links.csv",
            "sources": out / "sources.csv",
            "agent_labels": out / "agent_labels.csv",
            "echoes": out / "echoes.csv",
            "truth": out / "truth.json",
        }
        self.firms.to_csv(paths["firms"], index=False)
        prices = self.prices.copy()
        prices["date"] = prices["date"].dt.strftime("%Y-%m-%d")
        prices.to_csv(paths["prices"], index=False, float_format="%.10g")
        cal = pd.concat(
            [pd.DataFrame({"market": m, "date": d.strftime("%Y-%m-%d")}) for m, d in self.calendars.items()]
        )
        cal.to_csv(paths["calendar"], index=False)
        from .io import write_embeddings

        write_embeddings(self.embeddings, emb_dir, embedding_format)
        self.links.to_csv(paths["links"], index=False)
        pd.DataFrame({"firm_id": self.event_sources}).to_csv(paths["sources"], index=False)
        self.agent_labels.to_csv(paths["agent_labels"], index=False)
        echoes = self.echoes.copy()
        echoes["date"] = pd.to_datetime(echoes["date"]).dt.strftime("%Y-%m-%d")
        echoes.to_csv(paths["echoes"], index=False)
        truth = {
            "spec": asdict(self.spec),
            "event_neighbors": self.event_neighbors,
            "jumps": [
                {"source_id": s, "date": f"{d:%Y-%m-%d}", "size": float(z)}
                for s, d, z in self.jumps.itertuples(index=False)
            ],
        }
        paths["truth"].write_text(json.dumps(truth, indent=1, sort_keys=True), encoding="utf-8")
        return {k: str(v) for k, v in paths.items()}


def _calendar(rng: np.random.Generator, spec: SynthSpec) -> pd.DatetimeIndex:
    start = pd.Timestamp(spec.start)
    end = (pd.Period(start, "M") + spec.months - 1).end_time.normalize()
    days = pd.bdate_range(start, end)
    keep = rng.random(len(days)) >= spec.holiday_rate
    days = days[keep]
    if spec.days_per_month is not None:
        per_month = pd.Series(days, index=days).groupby(days.to_period("M")).head(spec.days_per_month)
        days = pd.DatetimeIndex(per_month.to_numpy())
    return days


def generate(spec: SynthSpec) -> SynthWorld:
    rng = np.random.default_rng(spec.seed)
    markets = list(spec.markets)

    # universe
    rows = []
    for m in markets:
        for k in range(spec.markets[m]):
            rows.append((f"{m}{k:04d}", m, f"S{k % spec.sectors:02d}", True))
    firms = pd.DataFrame(rows, columns=["firm_id", "market", "sector", "listed"])
    ids_by_market = {m: firms.loc[firms["market"] == m, "firm_id"].tolist() for m in markets}
    calendars = {m: _calendar(rng, spec) for m in markets}
    month_index = pd.period_range(spec.start, periods=spec.months, freq="M")

    # planted monthly links (target -> source), one partner per target
    link_rows = []
    for tgt_m, src_m in spec.link_pairs:
        if tgt_m not in spec.markets or src_m not in spec.markets:
            raise ValueError(f"link pair {tgt_m}<-{src_m} references a missing market")
        sources = ids_by_market[src_m]
        perm = rng.permutation(len(sources))
        for k, t in enumerate(ids_by_market[tgt_m]):
            link_rows.append((t, sources[perm[k % len(sources)]], spec.beta, spec.lead))
    links = pd.DataFrame(link_rows, columns=["target_id", "source_id", "beta", "lead"])

    # event sources and their echoing neighbours in other markets
    event_neighbors: dict[str, list[str]] = {}
    if spec.event_sources_per_market:
        taken = set()
        for m in markets:
            event_neighbors.update({f: [] for f in ids_by_market[m][: spec.event_sources_per_market]})
        taken |= set(event_neighbors)
        for src in event_neighbors:
            home = src[:2]
            pool = [f for mm in markets if mm != home for f in ids_by_market[mm] if f not in taken]
            if len(pool) < spec.echo_neighbors:
                # neighbour sets are disjoint across sources
                raise ValueError(
                    f"universe too small: {len(pool)} unassigned firms left for {spec.echo_neighbors} echo neighbours"
                )
            pick = rng.choice(len(pool), size=spec.echo_neighbors, replace=False)
            chosen = [pool[i] for i in sorted(pick)]
            event_neighbors[src] = chosen
            taken |= set(chosen)

    # monthly log-return components per firm
    n_months = spec.months
    mkt_f = {m: rng.normal(0, spec.market_vol, n_months) for m in markets}
    sec_f = {m: rng.normal(0, spec.sector_vol, (spec.sectors, n_months)) for m in markets}
    firm_index = firms.set_index("firm_id")
    idio_vol = {f: spec.source_vol for f in firms["firm_id"]}
    for t in links["target_id"]:
        idio_vol[t] = spec.target_sigma
    monthly_idio = {f: rng.normal(0, idio_vol[f], n_months) for f in firms["firm_id"]}
    partner = dict(zip(links["target_id"], links["source_id"]))

    prices, jumps = [], []
    jump_days: dict[str, list[pd.Timestamp]] = {}
    echo_add: dict[str, dict[pd.Timestamp, float]] = {}
    cal_month_pos = {m: calendars[m].to_period("M") for m in markets}

    # idiosyncratic daily paths (before echoes), needed in source-first order
    daily_log: dict[str, np.ndarray] = {}

    def month_spread(m: str, monthly: np.ndarray) -> np.ndarray:
        """Spread monthly log returns evenly over each month's trading days."""
        per = cal_month_pos[m]
        codes = month_index.get_indexer(per)
        counts = np.bincount(codes, minlength=n_months)
        return monthly[codes] / counts[codes]

    for m in markets:
        for f in ids_by_market[m]:
            sector = int(firm_index.at[f, "sector"][1:])
            base = mkt_f[m] + sec_f[m][sector] + monthly_idio[f]
            daily_log[f] = month_spread(m, base)

    # intra-month wiggle that sums to zero each month keeps monthly totals exact
    daily_vol = {}
    for m in markets:
        per = cal_month_pos[m]
        codes = month_index.get_indexer(per)
        counts = np.bincount(codes, minlength=n_months)
        for f in ids_by_market[m]:
            vol = spec.daily_noise if spec.daily_noise is not None else idio_vol[f] / math.sqrt(max(counts.mean(), 1))
            daily_vol[f] = vol
            z = rng.normal(0, vol, len(per))
            z -= (np.bincount(codes, weights=z, minlength=n_months) / counts)[codes]
            daily_log[f] = daily_log[f] + z

    # planted lead-lag on top of the sources' realized monthly log returns
    for t, s in partner.items():
        m_t, m_s = firm_index.at[t, "market"], firm_index.at[s, "market"]
        per_s = cal_month_pos[m_s]
        src_monthly = np.bincount(month_index.get_indexer(per_s), weights=daily_log[s], minlength=n_months)
        lagged = np.zeros(n_months)
        if spec.lead == 0:
            lagged[:] = src_monthly
        else:
            lagged[spec.lead :] = src_monthly[: -spec.lead]
        daily_log[t] = daily_log[t] + month_spread(m_t, spec.beta * lagged)

    # event jumps on sources and echoes on their neighbours (D+2 intraday)
    for src, neigh in event_neighbors.items():
        m_s = firm_index.at[src, "market"]
        cal = calendars[m_s]
        hit = rng.random(len(cal)) < spec.jump_prob
        hit[0] = False
        sizes = rng.uniform(*spec.jump_range, size=len(cal))
        for pos in np.flatnonzero(hit):
            d = cal[pos]
            daily_log[src][pos] += math.log1p(sizes[pos])
            jumps.append((src, d, float(sizes[pos])))
            for nb in neigh:
                ncal = calendars[firm_index.at[nb, "market"]]
                row = int(ncal.searchsorted(d, side="right")) + 1
                if row < len(ncal):
                    echo_add.setdefault(nb, {})
                    echo_add[nb][ncal[row]] = echo_add[nb].get(ncal[row], 0.0) + spec.echo

    for m in markets:
        cal = calendars[m]
        n_days = len(cal)
        for f in ids_by_market[m]:
            r = daily_log[f]
            overnight = rng.normal(0, 0.003, n_days)
            overnight[0] = 0.0
            intraday = r - overnight
            for d, add in echo_add.get(f, {}).items():
                intraday[cal.get_loc(d)] += math.log1p(add)
            close_log = np.log(100.0) + np.cumsum(overnight + intraday)
            open_log = close_log - intraday
            close = np.exp(close_log)
            open_ = np.exp(open_log)
            spread = np.abs(rng.normal(0, 0.004, n_days))
            shares = math.exp(rng.normal(18.0, 1.0)) * np.exp(np.cumsum(rng.normal(0, 0.0005, n_days)))
            prices.append(
                pd.DataFrame(
                    {
                        "firm_id": f,
                        "date": cal,
                        "open": open_,
                        "high": np.maximum(open_, close) * (1 + spread),
                        "low": np.minimum(open_, close) * (1 - spread),
                        "adj_close": close,
                        "volume": rng.integers(1_000, 1_000_000, n_days),
                        "shares_outstanding": np.round(shares),
                    }
                )
            )
    prices = pd.concat(prices, ignore_index=True)

    embeddings = _embeddings(rng, spec, firms, links, event_neighbors)
    labels = _agent_labels(rng, spec, firms, event_neighbors)
    jumps_df = pd.DataFrame(jumps, columns=["source_id", "date", "size"])
    echoes = pd.DataFrame(
        [(f, d, a) for f in sorted(echo_add) for d, a in sorted(echo_add[f].items())],
        columns=["firm_id", "date", "size"],
    )
    return SynthWorld(spec, firms, prices, calendars, embeddings, links, event_neighbors, jumps_df, labels, echoes)


def _embeddings(rng, spec: SynthSpec, firms: pd.DataFrame, links: pd.DataFrame, event_neighbors) -> dict:
    """Raw category vectors: a strong shared style direction, a latent vector
    shared within each planted group, and isotropic noise."""
    ids = firms["firm_id"].tolist()
    pos = {f: k for k, f in enumerate(ids)}
    group = np.arange(len(ids))
    for t, s in zip(links["target_id"], links["source_id"]):
        group[pos[t]] = group[pos[s]]
    for src, neigh in event_neighbors.items():
        for nb in neigh:
            group[pos[nb]] = group[pos[src]]
    p = spec.embed_dim
    out = {}
    for c in CATEGORIES[: spec.categories]:
        style = rng.normal(size=p)
        style /= np.linalg.norm(style)
        latent = rng.normal(size=(len(ids), p)) / math.sqrt(p)
        X = (
            spec.style_strength * (1.0 + 0.1 * rng.normal(size=(len(ids), 1))) * style
            + spec.latent_strength * latent[group]
            + spec.embed_noise * rng.normal(size=(len(ids), p)) / math.sqrt(p)
        )
        out[c] = (list(ids), X)
    return out


def _agent_labels(rng, spec: SynthSpec, firms: pd.DataFrame, event_neighbors) -> pd.DataFrame:
    """Imperfect co-mover labels: planted neighbours are usually +1, others rarely."""
    rows = []
    markets = dict(zip(firms["firm_id"], firms["market"]))
    for src, neigh in event_neighbors.items():
        true = set(neigh)
        for f in firms["firm_id"]:
            if f == src or markets[f] == markets[src]:
                continue
            p = spec.agent_hit_rate if f in true else spec.agent_false_rate
            sign = 1 if rng.random() < p else 0
            rows.append((src, f, "co_mover" if sign else "unrelated", sign, 0.9 if sign else 0.6, ""))
    return pd.DataFrame(rows, columns=["source_id", "ticker", "relation", "sign", "confidence", "rationale"])


def recovery_score(scores: pd.DataFrame | np.ndarray, target_ids, source_ids, links: pd.DataFrame, k: int) -> float:
    """Fraction of planted partners found in their target's top-``k`` sources."""
    scores = np.asarray(scores, dtype=float)
    t_pos = {f: i for i, f in enumerate(target_ids)}
    s_pos = {f: j for j, f in enumerate(source_ids)}
    hits = total = 0
    for t, s in zip(links["target_id"], links["source_id"]):
        if t not in t_pos or s not in s_pos:
            continue
        row = np.where(np.isfinite(scores[t_pos[t]]), scores[t_pos[t]], -np.inf)
        top = np.argsort(-row, kind="stable")[:k]
        hits += int(s_pos[s] in top)
        total += 1
    if total == 0:
        return math.nan
    return hits / total


def planted_event_means(world: SynthWorld, events, members: dict[str, list[str]] | None = None) -> np.ndarray:
    """Noise-free planted part of each event's market-relative basket return.

    Every member of the event's basket (default: the planted neighbours) is
    credited the planted add-on booked on its ``D+2`` open-to-open row, net of
    the equal-weight planted add-on across its market that day.  Planted
    add-ons are the echoes and the source firms' own jumps (which sit in the
    market mean on the day they occur).
    """
    members = members or world.event_neighbors
    market_of = dict(zip(world.firms["firm_id"], world.firms["market"]))
    size = {m: int((world.firms["market"] == m).sum()) for m in world.calendars}
    planted: dict[tuple[str, pd.Timestamp], float] = {}
    for f, d, a in world.echoes.itertuples(index=False):
        planted[(f, d)] = planted.get((f, d), 0.0) + a
    for f, d, a in world.jumps.itertuples(index=False):
        planted[(f, d)] = planted.get((f, d), 0.0) + a
    day_sum: dict[tuple[str, pd.Timestamp], float] = {}
    for (f, d), a in planted.items():
        key = (market_of[f], d)
        day_sum[key] = day_sum.get(key, 0.0) + a
    out = np.full(len(events), np.nan)
    for k, ev in enumerate(events):
        vals = []
        for f in members.get(ev.source_id, []):
            m = market_of[f]
            cal = world.calendars[m]
            row = int(cal.searchsorted(ev.date, side="right")) + 1
            if row + 1 >= len(cal):
                continue
            d = cal[row]
            vals.append(planted.get((f, d), 0.0) - day_sum.get((m, d), 0.0) / size[m])
        if vals:
            out[k] = float(np.mean(vals))
    return out
