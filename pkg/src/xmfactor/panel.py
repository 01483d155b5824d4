"""Firm universe, trading calendars, daily prices and the return primitives.

Everything downstream (factors, backtests, event studies) reads returns through
:class:`Panel`.  Prices are held as one wide ``date x firm`` frame per market on
that market's own trading calendar, so day counting never crosses calendars.

Conventions
-----------
* Returns are local-currency simple returns.
* Months are ``pandas.Period`` objects with monthly frequency.
* Missing values are ``NaN``; a missing return is never silently zero.
"""

from __future__ import annotations

import copy
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MARKETS: tuple[str, ...] = ("US", "JP", "TW", "KR", "HK")

FIRM_COLUMNS = ("firm_id", "market", "sector", "listed")
PRICE_COLUMNS = (
    "firm_id",
    "date",
    "open",
    "high",
    "low",
    "adj_close",
    "volume",
    "shares_outstanding",
)

# firm plus at least two peers must print for a market mean to count
MIN_MARKET_MEMBERS = 3

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}


class PanelError(ValueError):
    """Raised when universe, price or calendar inputs violate their contract."""


def _parse_bool(value: str, row: int) -> bool:
    v = str(value).strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise PanelError(f"row {row}: cannot parse listed flag {value!r}")


def validate_universe(firms: pd.DataFrame) -> pd.DataFrame:
    """Check a raw firm table and return it indexed by ``firm_id``."""
    missing = [c for c in FIRM_COLUMNS if c not in firms.columns]
    if missing:
        raise PanelError(f"firm table missing columns: {missing}")
    firms = firms.loc[:, list(FIRM_COLUMNS)].copy()
    firms["firm_id"] = firms["firm_id"].astype(str).str.strip()
    firms["market"] = firms["market"].astype(str).str.strip().str.upper()
    firms["sector"] = firms["sector"].astype(str).str.strip()

    dup = firms["firm_id"][firms["firm_id"].duplicated()]
    if len(dup):
        raise PanelError(f"duplicate firm_id: {', '.join(sorted(set(dup)))}")
    for pos, (fid, mkt) in enumerate(zip(firms["firm_id"], firms["market"])):
        if mkt not in MARKETS:
            # header is line 1 of the file
            raise PanelError(f"row {pos + 2} ({fid}): unknown market code {mkt!r}")
    if firms["listed"].dtype != bool:
        firms["listed"] = [
            _parse_bool(v, pos + 2) for pos, v in enumerate(firms["listed"])
        ]
    return firms.set_index("firm_id")


def load_universe(firms_file: str | Path) -> pd.DataFrame:
    """Load ``firms.csv`` (firm_id, market, sector, listed).

    Returns the validated table indexed by firm_id.  Per-market counts are
    logged and available through :func:`market_counts`.
    """
    path = Path(firms_file)
    if not path.exists():
        raise PanelError(f"firms file not found: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    firms = validate_universe(raw)
    logger.info("loaded %d firms: %s", len(firms), market_counts(firms))
    return firms


def market_counts(firms: pd.DataFrame) -> dict[str, int]:
    counts = firms["market"].value_counts()
    return {m: int(counts[m]) for m in MARKETS if m in counts.index}


def load_prices(prices_file: str | Path) -> pd.DataFrame:
    path = Path(prices_file)
    if not path.exists():
        raise PanelError(f"prices file not found: {path}")
    prices = pd.read_csv(path, dtype={"firm_id": str})
    missing = [c for c in PRICE_COLUMNS if c not in prices.columns]
    if missing:
        raise PanelError(f"prices file missing columns: {missing}")
    prices["date"] = pd.to_datetime(prices["date"], format="%Y-%m-%d")
    return prices


def load_calendar(calendar_file: str | Path) -> dict[str, pd.DatetimeIndex]:
    path = Path(calendar_file)
    if not path.exists():
        raise PanelError(f"calendar file not found: {path}")
    cal = pd.read_csv(path, dtype={"market": str})
    cal["date"] = pd.to_datetime(cal["date"], format="%Y-%m-%d")
    out = {}
    for market, grp in cal.groupby("market", sort=True):
        dates = pd.DatetimeIndex(grp["date"])
        if dates.has_duplicates or not dates.is_monotonic_increasing:
            raise PanelError(f"calendar for {market} is not strictly increasing")
        out[str(market)] = dates
    return out


class Panel:
    """Immutable price panel with cached return primitives.

    Parameters
    ----------
    firms : DataFrame
        Universe indexed by firm_id (see :func:`validate_universe`).
    prices : DataFrame
        Long price table with the columns of ``PRICE_COLUMNS``.
    calendars : dict, optional
        Market -> trading dates.  Inferred from the price dates when omitted.
    """

    def __init__(
        self,
        firms: pd.DataFrame,
        prices: pd.DataFrame,
        calendars: dict[str, pd.DatetimeIndex] | None = None,
    ):
        if "firm_id" in firms.columns:
            firms = validate_universe(firms)
        self.firms = firms
        self._cache: dict[tuple, object] = {}

        prices = prices.copy()
        prices["firm_id"] = prices["firm_id"].astype(str)
        prices["date"] = pd.to_datetime(prices["date"])
        unknown = set(prices["firm_id"]) - set(firms.index)
        if unknown:
            raise PanelError(f"prices reference unknown firms: {sorted(unknown)[:5]}")
        dup = prices.duplicated(["firm_id", "date"])
        if dup.any():
            row = prices.loc[dup].iloc[0]
            raise PanelError(
                f"duplicate price row for ({row['firm_id']}, {row['date']:%Y-%m-%d})"
            )
        bad = ~((prices["open"] > 0) & (prices["adj_close"] > 0))
        if bad.any():
            logger.warning("dropping %d rows with non-positive open/close", int(bad.sum()))
            prices = prices.loc[~bad]
        prices = prices.assign(market=firms.loc[prices["firm_id"], "market"].to_numpy())

        self.calendars: dict[str, pd.DatetimeIndex] = {}
        self._wide: dict[str, dict[str, pd.DataFrame]] = {}
        for market in MARKETS:
            ids = firms.index[firms["market"] == market]
            rows = prices.loc[prices["market"] == market]
            if calendars is not None and market in calendars:
                cal = pd.DatetimeIndex(calendars[market])
                outside = ~rows["date"].isin(cal)
                if outside.any():
                    row = rows.loc[outside].iloc[0]
                    raise PanelError(
                        f"{row['firm_id']} has a price on {row['date']:%Y-%m-%d}, "
                        f"not a {market} trading date"
                    )
            else:
                cal = pd.DatetimeIndex(np.sort(rows["date"].unique()))
            if len(ids) == 0 and len(cal) == 0:
                continue
            self.calendars[market] = cal
            fields = {}
            for field in ("open", "adj_close", "shares_outstanding"):
                wide = rows.pivot(index="date", columns="firm_id", values=field)
                fields[field] = wide.reindex(index=cal, columns=ids).astype(float)
            self._wide[market] = fields

        all_dates = [c for c in self.calendars.values() if len(c)]
        if all_dates:
            lo = min(c[0] for c in all_dates)
            hi = max(c[-1] for c in all_dates)
            self.months = pd.period_range(lo, hi, freq="M")
        else:
            self.months = pd.PeriodIndex([], freq="M")
        self._prices = prices.drop(columns="market")

    @classmethod
    def from_files(cls, firms_file, prices_file, calendar_file=None) -> Panel:
        firms = load_universe(firms_file)
        prices = load_prices(prices_file)
        calendars = load_calendar(calendar_file) if calendar_file else None
        return cls(firms, prices, calendars)

    @property
    def prices(self) -> pd.DataFrame:
        if self._prices is None:
            raise PanelError("long price table is not kept for derived panels")
        return self._prices

    @property
    def markets(self) -> list[str]:
        return list(self._wide)

    def market_of(self, firm_id: str) -> str:
        return self.firms.at[firm_id, "market"]

    def market_firms(self, market: str, listed_only: bool = False) -> pd.Index:
        sel = self.firms["market"] == market
        if listed_only:
            sel &= self.firms["listed"]
        return self.firms.index[sel]

    def sectors(self, market: str | None = None) -> pd.Series:
        if market is None:
            return self.firms["sector"]
        return self.firms.loc[self.firms["market"] == market, "sector"]

    def field(self, market: str, name: str) -> pd.DataFrame:
        return self._wide[market][name]

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # -- daily ---------------------------------------------------------------

    def daily_returns(self, market: str) -> pd.DataFrame:
        """Close-to-close simple returns on the market calendar."""
        return self._cached(
            ("daily", market),
            lambda: self.field(market, "adj_close").pct_change(fill_method=None).iloc[1:],
        )

    def _market_demean(self, market: str, wide: pd.DataFrame) -> pd.DataFrame:
        listed = self.market_firms(market, listed_only=True)
        members = wide.loc[:, wide.columns.intersection(listed)]
        mean = members.mean(axis=1)
        mean[members.count(axis=1) < MIN_MARKET_MEMBERS] = np.nan
        return wide.sub(mean, axis=0)

    def market_relative_close(self, market: str) -> pd.DataFrame:
        """Daily close-to-close return minus the listed-universe equal-weight mean."""
        return self._cached(
            ("rel_close", market),
            lambda: self._market_demean(market, self.daily_returns(market)),
        )

    def open_to_open(self, market: str) -> pd.DataFrame:
        """``open[t+1] / open[t] - 1`` indexed by the buy date ``t``."""

        def build():
            opens = self.field(market, "open")
            return opens.shift(-1) / opens - 1.0

        return self._cached(("oo", market), build)

    def market_relative_open(self, market: str) -> pd.DataFrame:
        return self._cached(
            ("rel_oo", market),
            lambda: self._market_demean(market, self.open_to_open(market)),
        )

    def execution_row(self, market: str, date, offset: int = 2) -> int | None:
        """Row of the ``offset``-th trading date strictly after calendar ``date``.

        Counting uses ``market``'s own calendar.  Returns None when the calendar
        ends before the buy date or its following sell date.
        """
        cal = self.calendars[market]
        pos = int(cal.searchsorted(pd.Timestamp(date), side="right")) + offset - 1
        if pos + 1 >= len(cal):
            return None
        return pos

    def market_relative_daily_return(self, firm_id: str, date, kind: str = "close_to_close") -> float:
        market = self.market_of(firm_id)
        if kind == "close_to_close":
            rel = self.market_relative_close(market)
            ts = pd.Timestamp(date)
            if ts not in rel.index:
                return math.nan
            return float(rel.at[ts, firm_id])
        if kind == "open_open_t2":
            row = self.execution_row(market, date, 2)
            if row is None:
                return math.nan
            return float(self.market_relative_open(market)[firm_id].iloc[row])
        raise ValueError(f"unknown return kind {kind!r}")

    # -- monthly -------------------------------------------------------------

    def monthly_returns(self, market: str) -> pd.DataFrame:
        """Compounded close-to-close return per calendar month (months x firms)."""

        def build():
            daily = self.daily_returns(market)
            months = daily.index.to_period("M")
            out = (1.0 + daily).groupby(months).prod(min_count=1) - 1.0
            return out.reindex(self.months)

        return self._cached(("monthly", market), build)

    def cumulative_returns(self, market: str, lookback: int) -> pd.DataFrame:
        """L-month compounded return ending at each month (row = end month).

        Requires at least ``ceil(L / 2)`` months with data in the window.
        """

        def build():
            logs = np.log1p(self.monthly_returns(market))
            floor = math.ceil(lookback / 2)
            summed = logs.rolling(lookback, min_periods=floor).sum()
            return np.expm1(summed)

        return self._cached(("cum", market, lookback), build)

    def sector_relative_returns(self, market: str, lookback: int) -> pd.DataFrame:
        """L-month return minus the equal-weight same-sector mean (firm included)."""

        def build():
            cum = self.cumulative_returns(market, lookback)
            sectors = self.sectors(market).reindex(cum.columns)
            means = cum.T.groupby(sectors).transform("mean").T
            return cum - means

        return self._cached(("secrel", market, lookback), build)

    def singleton_sector_flags(self, market: str, lookback: int) -> pd.DataFrame:
        """True where a firm is the only valid member of its sector that month."""
        cum = self.cumulative_returns(market, lookback)
        sectors = self.sectors(market).reindex(cum.columns)
        counts = cum.notna().T.groupby(sectors).transform("sum").T
        return (counts == 1) & cum.notna()

    def sector_mean_returns(self, market: str, lookback: int) -> pd.DataFrame:
        """Each firm's home-sector mean L-month return (industry momentum)."""
        cum = self.cumulative_returns(market, lookback)
        sectors = self.sectors(market).reindex(cum.columns)
        return cum.T.groupby(sectors).transform("mean").T

    def log_market_caps(self, market: str) -> pd.DataFrame:
        """ln(close x shares) at each firm's last print of the month."""

        def build():
            cap = self.field(market, "adj_close") * self.field(market, "shares_outstanding")
            last = cap.groupby(cap.index.to_period("M")).last().reindex(self.months)
            return np.log(last.where(last > 0))

        return self._cached(("logcap", market), build)

    # -- scalar accessors ----------------------------------------------------

    def monthly_return(self, firm_id: str, month) -> float:
        return float(self.monthly_returns(self.market_of(firm_id)).at[pd.Period(month, "M"), firm_id])

    def cumulative_return(self, firm_id: str, end_month, lookback: int) -> float:
        tab = self.cumulative_returns(self.market_of(firm_id), lookback)
        return float(tab.at[pd.Period(end_month, "M"), firm_id])

    def sector_relative_return(self, firm_id: str, end_month, lookback: int) -> float:
        tab = self.sector_relative_returns(self.market_of(firm_id), lookback)
        return float(tab.at[pd.Period(end_month, "M"), firm_id])

    def log_market_cap(self, firm_id: str, month) -> float:
        return float(self.log_market_caps(self.market_of(firm_id)).at[pd.Period(month, "M"), firm_id])

    # -- derived panels ------------------------------------------------------

    def perturbed(self, start, scale: float = 0.05, seed: int = 0) -> Panel:
        """Copy of the panel with every price dated on/after ``start`` scrambled.

        Opens, closes and share counts are multiplied by independent lognormal
        noise.  Used to prove that a computation never reads those rows.
        """
        rng = np.random.default_rng(seed)
        start = pd.Timestamp(start)
        out = copy.copy(self)
        out._cache = {}
        out._prices = None
        out._wide = {}
        for market, fields in self._wide.items():
            late = fields["open"].index >= start
            new = {}
            for name, wide in fields.items():
                arr = wide.to_numpy(copy=True)
                arr[late] *= np.exp(scale * rng.standard_normal(arr[late].shape))
                new[name] = pd.DataFrame(arr, index=wide.index, columns=wide.columns)
            out._wide[market] = new
        return out
