"""Quintile long-short backtests and the six factor metrics.

Monthly loop: rank the factor cross-section, go long Q5 and short Q1 with equal
weights, hold for the month, charge a one-way cost on traded weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .factor import FactorPanel

logger = logging.getLogger(__name__)

N_QUINTILES = 5
# remainder firms go to these buckets first (0 = Q1 ... 4 = Q5)
REMAINDER_ORDER = (0, 4, 1, 3, 2)
MONTHS_PER_YEAR = 12
DEFAULT_COST_BP = 2.0


@dataclass
class MonthlyBook:
    month: object
    buckets: list[list[str]]  # Q1 .. Q5, ascending factor
    degenerate: bool = False

    @property
    def long(self) -> list[str]:
        return self.buckets[-1]

    @property
    def short(self) -> list[str]:
        return self.buckets[0]

    def leg_weights(self, leg: str) -> dict[str, float]:
        names = self.long if leg == "long" else self.short
        return {f: 1.0 / len(names) for f in names}


def bucket_sizes(n: int, k: int = N_QUINTILES) -> list[int]:
    base, extra = divmod(n, k)
    sizes = [base] * k
    for b in REMAINDER_ORDER[:extra]:
        sizes[b] += 1
    return sizes


def quintile_sort(factor: pd.Series, month=None) -> MonthlyBook | None:
    """Split a cross-section into five contiguous ascending buckets.

    Ties are ordered by firm id.  Returns None (month skipped) with fewer than
    five valid firms.
    """
    factor = factor.dropna()
    if len(factor) < N_QUINTILES:
        logger.info("%s: %d firms, skipping sort", month, len(factor))
        return None
    frame = pd.DataFrame({"f": factor.to_numpy(float), "id": factor.index.astype(str)})
    order = frame.sort_values(["f", "id"], kind="mergesort")["id"].tolist()
    buckets, start = [], 0
    for size in bucket_sizes(len(order)):
        buckets.append(order[start : start + size])
        start += size
    return MonthlyBook(month, buckets, degenerate=bool(factor.nunique() == 1))


def leg_turnover(new: dict[str, float], old: dict[str, float] | None) -> float:
    """One-way turnover: total weight bought into the leg (1 on the first build)."""
    old = old or {}
    names = set(new) | set(old)
    return float(sum(max(new.get(f, 0.0) - old.get(f, 0.0), 0.0) for f in names))


@dataclass
class LSResult:
    net: float
    gross: float
    turnover_long: float
    turnover_short: float
    cost: float


def ls_return(
    book: MonthlyBook,
    forward_returns: pd.Series,
    prev_book: MonthlyBook | None = None,
    cost_bp: float = DEFAULT_COST_BP,
) -> LSResult | None:
    """Net long-short return for one holding month.

    A book firm without a forward return is treated as delisted: whatever it
    earned to its last print is already in its monthly return, the rest is cash.
    """
    if not book.long or not book.short:
        return None
    r = forward_returns.reindex(book.long + book.short).fillna(0.0)
    gross = float(r[book.long].mean() - r[book.short].mean())
    to_long = leg_turnover(book.leg_weights("long"), prev_book.leg_weights("long") if prev_book else None)
    to_short = leg_turnover(book.leg_weights("short"), prev_book.leg_weights("short") if prev_book else None)
    cost = cost_bp / 10_000.0 * (to_long + to_short)
    return LSResult(gross - cost, gross, to_long, to_short, cost)


# -- metrics -------------------------------------------------------------------


def ic(factor: pd.Series, forward_returns: pd.Series) -> float:
    """Spearman rank correlation (average ranks for ties); NaN if degenerate."""
    pair = pd.concat([factor.rename("f"), forward_returns.rename("r")], axis=1, join="inner").dropna()
    if len(pair) < 3:
        return math.nan
    a = rankdata(pair["f"].to_numpy())
    b = rankdata(pair["r"].to_numpy())
    a -= a.mean()
    b -= b.mean()
    denom = math.sqrt((a @ a) * (b @ b))
    if denom == 0:
        return math.nan
    return float(a @ b / denom)


def _mean_std(x) -> tuple[float, float, int]:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) < 2:
        return math.nan, math.nan, len(x)
    # a constant series can leave rounding residue in std; report it as zero
    sd = 0.0 if x.min() == x.max() else float(x.std(ddof=1))
    return float(x.mean()), sd, len(x)


def icir(ics) -> float:
    mean, sd, _ = _mean_std(ics)
    if not sd > 0:
        return math.nan
    return mean / sd * math.sqrt(MONTHS_PER_YEAR)


def sharpe(returns) -> float:
    mean, sd, _ = _mean_std(returns)
    if not sd > 0:
        return math.nan
    return mean / sd * math.sqrt(MONTHS_PER_YEAR)


def wealth(returns) -> np.ndarray:
    return np.cumprod(1.0 + np.asarray(returns, dtype=float))


def maxdd(returns) -> float:
    """Worst drawdown of the compounded wealth curve, peaks taken from month 1."""
    v = wealth(returns)
    if len(v) == 0:
        return math.nan
    return float(np.min(v / np.maximum.accumulate(v) - 1.0))


def annret(returns) -> float:
    return MONTHS_PER_YEAR * float(np.mean(returns))


def cumret(returns) -> float:
    """Arithmetic sum of monthly returns (the wealth curve compounds separately)."""
    return float(np.sum(returns))


@dataclass
class BacktestReport:
    ic_series: pd.Series
    ls_returns: pd.Series
    turnover: pd.Series
    cost_bp: float
    config: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def ic(self) -> float:
        return float(self.ic_series.mean()) if self.ic_series.notna().any() else math.nan

    @property
    def icir(self) -> float:
        return icir(self.ic_series)

    @property
    def sharpe(self) -> float:
        return sharpe(self.ls_returns)

    @property
    def maxdd(self) -> float:
        return maxdd(self.ls_returns)

    @property
    def ret(self) -> float:
        return annret(self.ls_returns) if len(self.ls_returns) else math.nan

    @property
    def cumret(self) -> float:
        return cumret(self.ls_returns)

    @property
    def wealth(self) -> pd.Series:
        return pd.Series(wealth(self.ls_returns), index=self.ls_returns.index, name="wealth")

    def metrics(self) -> dict[str, float]:
        return {
            "IC": self.ic,
            "ICIR": self.icir,
            "Sharpe": self.sharpe,
            "MaxDD": self.maxdd,
            "Ret": self.ret,
            "CumRet": self.cumret,
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "cost_bp": self.cost_bp,
            "metrics": self.metrics(),
            "compound_return": float(self.wealth.iloc[-1] - 1.0) if len(self.ls_returns) else math.nan,
            "monthly": {
                "month": [str(m) for m in self.ic_series.index],
                "ic": self.ic_series.tolist(),
                "ls_return": self.ls_returns.reindex(self.ic_series.index).tolist(),
            },
            "skipped": self.skipped,
        }


def run_backtest(
    factors: FactorPanel,
    forward_returns: pd.DataFrame,
    cost_bp: float = DEFAULT_COST_BP,
    config: dict | None = None,
) -> BacktestReport:
    """Backtest a factor panel against same-month realized returns.

    ``forward_returns.loc[M]`` must be the return earned over month ``M``, the
    month in which the month-``M`` factor is held.
    """
    ics, ls, turns, skipped = {}, {}, {}, []
    prev = None
    for m in factors.values.index:
        xs = factors.values.loc[m].dropna()
        fwd = forward_returns.loc[m] if m in forward_returns.index else pd.Series(dtype=float)
        book = quintile_sort(xs, m)
        if book is None:
            if len(xs):
                skipped.append(str(m))
            continue
        ics[m] = ic(xs, fwd)
        res = ls_return(book, fwd, prev, cost_bp)
        if res is None:
            skipped.append(str(m))
            continue
        ls[m] = res.net
        turns[m] = res.turnover_long + res.turnover_short
        prev = book
    idx = pd.PeriodIndex(list(ics), freq="M")
    return BacktestReport(
        pd.Series(list(ics.values()), index=idx, name="ic", dtype=float),
        pd.Series(list(ls.values()), index=pd.PeriodIndex(list(ls), freq="M"), name="ls", dtype=float),
        pd.Series(list(turns.values()), index=pd.PeriodIndex(list(turns), freq="M"), name="turnover", dtype=float),
        cost_bp,
        dict(config or {}),
        skipped,
    )
