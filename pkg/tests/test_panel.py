from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmfactor.panel import Panel, PanelError, load_calendar, load_universe, market_counts

from conftest import make_panel

DAYS = ["2024-01-02", "2024-01-03", "2024-01-04", "2024-02-01", "2024-02-02"]


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_universe_counts(tmp_path):
    p = write(tmp_path, "firms.csv", "firm_id,market,sector,listed\nA,US,S1,1\nB,JP,S1,1\nC,TW,S2,0\n")
    firms = load_universe(p)
    assert len(firms) == 3
    assert market_counts(firms) == {"US": 1, "JP": 1, "TW": 1}
    assert not firms.at["C", "listed"]


def test_duplicate_firm_named(tmp_path):
    p = write(tmp_path, "firms.csv", "firm_id,market,sector,listed\nAAPL,US,S1,1\nAAPL,US,S1,1\n")
    with pytest.raises(PanelError, match="AAPL"):
        load_universe(p)


def test_unknown_market_names_row(tmp_path):
    p = write(tmp_path, "firms.csv", "firm_id,market,sector,listed\nA,US,S1,1\nB,XX,S1,1\n")
    with pytest.raises(PanelError, match=r"row 3 \(B\).*XX"):
        load_universe(p)


def test_table2_counts(tmp_path):
    counts = {"US": 880, "JP": 453, "TW": 1040, "KR": 612, "HK": 602}
    lines = ["firm_id,market,sector,listed"]
    for m, n in counts.items():
        lines += [f"{m}{k},{m},S{k % 11},1" for k in range(n)]
    firms = load_universe(write(tmp_path, "firms.csv", "\n".join(lines) + "\n"))
    assert market_counts(firms) == counts
    assert len(firms) == 3587


def test_calendar_must_increase(tmp_path):
    p = write(tmp_path, "cal.csv", "market,date\nUS,2024-01-03\nUS,2024-01-02\n")
    with pytest.raises(PanelError, match="US"):
        load_calendar(p)


def test_price_outside_calendar_rejected():
    firms = pd.DataFrame({"firm_id": ["A"], "market": ["US"], "sector": ["S"], "listed": [True]})
    prices = pd.DataFrame(
        {"firm_id": ["A"], "date": ["2024-01-06"], "open": [1.0], "high": [1.0], "low": [1.0],
         "adj_close": [1.0], "volume": [1], "shares_outstanding": [1.0]}
    )
    with pytest.raises(PanelError, match="2024-01-06"):
        Panel(firms, prices, {"US": pd.DatetimeIndex(["2024-01-05"])})


def test_nonpositive_rows_dropped(caplog):
    firms = pd.DataFrame({"firm_id": ["A"], "market": ["US"], "sector": ["S"], "listed": [True]})
    prices = pd.DataFrame(
        {"firm_id": ["A", "A"], "date": ["2024-01-02", "2024-01-03"], "open": [1.0, 0.0], "high": 1.0,
         "low": 1.0, "adj_close": [1.0, 1.0], "volume": 1, "shares_outstanding": 1.0}
    )
    panel = Panel(firms, prices)
    assert len(panel.prices) == 1
    assert "dropping 1" in caplog.text


def test_duplicate_price_row():
    firms = pd.DataFrame({"firm_id": ["A"], "market": ["US"], "sector": ["S"], "listed": [True]})
    prices = pd.DataFrame(
        {"firm_id": ["A", "A"], "date": ["2024-01-02", "2024-01-02"], "open": 1.0, "high": 1.0,
         "low": 1.0, "adj_close": 1.0, "volume": 1, "shares_outstanding": 1.0}
    )
    with pytest.raises(PanelError, match="duplicate"):
        Panel(firms, prices)


@pytest.mark.parametrize(
    "daily, expected",
    [([0.01, 0.01], 0.0201), ([0.0, 0.0], 0.0), ([0.10, -0.10], -0.01)],
)
def test_monthly_return_compounds(daily, expected):
    # a close on the last day of the prior month anchors the first daily return
    closes = [100.0]
    for r in daily:
        closes.append(closes[-1] * (1 + r))
    dates = ["2023-12-29", "2024-01-02", "2024-01-03"]
    panel = make_panel({"US": {"A": closes}}, {"US": dates})
    assert panel.monthly_return("A", "2024-01") == pytest.approx(expected, abs=1e-12)


def test_month_without_data_is_missing():
    dates = ["2024-01-02", "2024-01-03", "2024-03-01"]
    panel = make_panel({"US": {"A": [1.0, 1.1, 1.2], "B": [1.0, 1.0, 1.0]}}, {"US": dates})
    assert math.isnan(panel.monthly_return("A", "2024-02"))


def test_sector_relative_two_firm_sector():
    dates = ["2023-12-29", "2024-01-31"]
    panel = make_panel(
        {"US": {"A": [1.0, 1.05], "B": [1.0, 1.03]}}, {"US": dates}, sectors={"A": "S1", "B": "S1"}
    )
    assert panel.sector_relative_return("A", "2024-01", 1) == pytest.approx(0.01, abs=1e-12)
    assert panel.sector_relative_return("B", "2024-01", 1) == pytest.approx(-0.01, abs=1e-12)


def test_singleton_sector_zero_and_flagged():
    dates = ["2023-12-29", "2024-01-31"]
    panel = make_panel(
        {"US": {"A": [1.0, 1.05], "B": [1.0, 1.03]}}, {"US": dates}, sectors={"A": "S1", "B": "S2"}
    )
    assert panel.sector_relative_return("A", "2024-01", 1) == 0.0
    assert panel.singleton_sector_flags("US", 1).loc[pd.Period("2024-01", "M"), "A"]


def test_sector_relative_brute_force(small_world):
    _, panel = small_world
    L = 6
    cum = panel.cumulative_returns("US", L)
    rel = panel.sector_relative_returns("US", L)
    sectors = panel.sectors("US")
    month = panel.months[20]
    for sector in sorted(set(sectors)):
        ids = [f for f in sectors.index if sectors[f] == sector]
        vals = [cum.at[month, f] for f in ids if not math.isnan(cum.at[month, f])]
        mean = sum(vals) / len(vals)
        for f in ids:
            assert rel.at[month, f] == pytest.approx(cum.at[month, f] - mean, abs=1e-14)


def test_sector_relative_means_zero(small_world):
    _, panel = small_world
    rel = panel.sector_relative_returns("JP", 12)
    sectors = panel.sectors("JP")
    means = rel.T.groupby(sectors).mean().T.dropna(how="all")
    assert np.nanmax(np.abs(means.to_numpy())) < 1e-12


def test_twelve_monthly_compound_to_cumulative(small_world):
    _, panel = small_world
    monthly = panel.monthly_returns("US")
    cum = panel.cumulative_returns("US", 12)
    end = panel.months[20]
    window = monthly.loc[end - 11 : end]
    direct = (1 + window).prod() - 1
    assert np.max(np.abs(direct - cum.loc[end])) < 1e-12


def test_coverage_floor():
    # 3 monthly returns inside a 12-month window: below ceil(12/2) = 6
    dates = pd.date_range("2023-01-31", periods=4, freq="ME").strftime("%Y-%m-%d").tolist()
    panel = make_panel({"US": {"A": [1.0, 1.1, 1.2, 1.3]}}, {"US": dates})
    assert math.isnan(panel.cumulative_return("A", "2023-04", 12))
    assert not math.isnan(panel.cumulative_return("A", "2023-04", 6))


def test_market_relative_close_mean_zero(small_world):
    _, panel = small_world
    rel = panel.market_relative_close("US")
    assert np.nanmax(np.abs(rel.mean(axis=1).to_numpy())) < 1e-12


def test_market_relative_close_arithmetic():
    dates = ["2024-01-02", "2024-01-03"]
    panel = make_panel(
        {"US": {"A": [1.0, 1.05], "B": [1.0, 1.01], "C": [1.0, 0.97]}}, {"US": dates}
    )
    # mean market move is +1%: A is +4% relative
    assert panel.market_relative_daily_return("A", "2024-01-03") == pytest.approx(0.04, abs=1e-12)


def test_open_open_t2_uses_own_calendar():
    # US trades every day; JP skips 2024-01-03 (holiday), so JP's D+2 after
    # 2024-01-02 is 2024-01-05 and D+3 is 2024-01-08
    us_dates = ["2024-01-02", "2024-01-03", "2024-01-04", "2024-01-05", "2024-01-08"]
    jp_dates = ["2024-01-02", "2024-01-04", "2024-01-05", "2024-01-08", "2024-01-09"]
    jp_open = [10.0, 11.0, 12.0, 13.0, 14.0]
    opens = {"JP": {f: jp_open for f in ("J1", "J2", "J3")}, "US": {f: [1.0] * 5 for f in ("U1", "U2", "U3")}}
    panel = make_panel(
        {"US": {f: [1.0] * 5 for f in ("U1", "U2", "U3")}, "JP": {f: jp_open for f in ("J1", "J2", "J3")}},
        {"US": us_dates, "JP": jp_dates},
        opens=opens,
    )
    row = panel.execution_row("JP", "2024-01-02")
    cal = panel.calendars["JP"]
    assert cal[row] == pd.Timestamp("2024-01-05")
    assert cal[row + 1] == pd.Timestamp("2024-01-08")
    assert panel.open_to_open("JP")["J1"].iloc[row] == pytest.approx(13.0 / 12.0 - 1)
    # both execution dates strictly after D, one buffer day skipped
    assert cal[row - 1] > pd.Timestamp("2024-01-02")
    assert cal.searchsorted(pd.Timestamp("2024-01-02"), side="right") == row - 1


def test_execution_row_past_end_is_none():
    dates = ["2024-01-02", "2024-01-03", "2024-01-04"]
    panel = make_panel({"US": {"A": [1, 1, 1], "B": [1, 1, 1], "C": [1, 1, 1]}}, {"US": dates})
    assert panel.execution_row("US", "2024-01-02") is None
    assert math.isnan(panel.market_relative_daily_return("A", "2024-01-02", "open_open_t2"))


def test_log_market_cap():
    dates = ["2024-01-30", "2024-01-31"]
    panel = make_panel({"US": {"A": [2.0, 4.0]}}, {"US": dates}, shares=1000.0)
    assert panel.log_market_cap("A", "2024-01") == pytest.approx(math.log(4000.0))


def test_perturbed_leaves_past_untouched(small_world):
    _, panel = small_world
    start = pd.Timestamp("2016-06-01")
    noisy = panel.perturbed(start, seed=3)
    a = panel.field("US", "adj_close")
    b = noisy.field("US", "adj_close")
    early = a.index < start
    assert np.array_equal(a[early].to_numpy(), b[early].to_numpy(), equal_nan=True)
    assert not np.allclose(a[~early].to_numpy(), b[~early].to_numpy(), equal_nan=True)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=2, max_size=8))
def test_monthly_returns_above_minus_one(daily):
    closes = [100.0]
    for r in daily:
        closes.append(closes[-1] * (1 + r))
    dates = pd.bdate_range("2023-12-29", periods=len(closes)).strftime("%Y-%m-%d").tolist()
    panel = make_panel({"US": {"A": closes}}, {"US": dates})
    vals = panel.monthly_returns("US")["A"].dropna()
    assert (vals > -1).all()
    assert np.prod(1 + vals.to_numpy()) == pytest.approx(closes[-1] / closes[0], rel=1e-12)
