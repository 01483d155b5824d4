from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from xmfactor.panel import Panel
from xmfactor.synth import SynthSpec, generate


def make_panel(closes: dict[str, dict[str, list[float]]], dates: dict[str, list[str]], sectors=None, opens=None, shares=1e6):
    """Panel from explicit per-market close paths.

    ``closes[market][firm]`` is a list aligned with ``dates[market]``; NaN
    means no print that day.
    """
    firm_rows, price_rows = [], []
    for market, paths in closes.items():
        for firm, path in paths.items():
            sector = (sectors or {}).get(firm, "S0")
            firm_rows.append((firm, market, sector, True))
            for k, (d, c) in enumerate(zip(dates[market], path)):
                if np.isnan(c):
                    continue
                o = opens[market][firm][k] if opens else c
                price_rows.append((firm, d, o, max(o, c), min(o, c), c, 100, shares))
    firms = pd.DataFrame(firm_rows, columns=["firm_id", "market", "sector", "listed"])
    prices = pd.DataFrame(
        price_rows,
        columns=["firm_id", "date", "open", "high", "low", "adj_close", "volume", "shares_outstanding"],
    )
    cal = {m: pd.DatetimeIndex(pd.to_datetime(d)) for m, d in dates.items()}
    return Panel(firms, prices, cal)


@pytest.fixture(scope="session")
def small_world():
    """Two markets, 60 firms each, 30 months: quick planted lead-lag world."""
    spec = SynthSpec(markets={"US": 60, "JP": 60}, months=30, embed_dim=48, sectors=4, seed=7)
    world = generate(spec)
    panel = Panel(world.firms, world.prices, world.calendars)
    return world, panel


@pytest.fixture(scope="session")
def world_dir(tmp_path_factory):
    """The default 200+200 firm, 120-month world written to disk once."""
    out = tmp_path_factory.mktemp("world")
    world = generate(SynthSpec(seed=0))
    world.write(out)
    return out, world


# (criterion, passed, detail) rows filled by the acceptance suite
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
