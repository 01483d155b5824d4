"""Release acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary and printed
as it runs) before asserting, so a failing criterion is reported rather than
hidden.  Sizes and tolerances are the release thresholds, not reduced ones.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pandas as pd
import pytest
from scipy.stats import kstest

import oracles
from conftest import ACCEPTANCE
from xmfactor.backtest import annret, cumret, ic, icir, maxdd, sharpe
from xmfactor.cli import main
from xmfactor.events import cluster_bootstrap, detect_events, nanmean, run_event_study
from xmfactor.factor import neutralize
from xmfactor.graph import sigmoid, top_k_neighbors
from xmfactor.panel import Panel
from xmfactor.synth import SynthSpec, generate, planted_event_means
from xmfactor.whiten import encode, fit_whitener, whiten

pytestmark = pytest.mark.acceptance

EVENT_MARKETS = ("US", "JP", "TW", "KR", "HK")


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_whitening_isotropy():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(50):
        # anisotropic cloud: random scales on a random basis
        basis, _ = np.linalg.qr(rng.normal(size=(64, 64)))
        X = rng.normal(size=(300, 64)) * rng.uniform(0.1, 5.0, 64) @ basis + rng.normal(size=64)
        for d in (8, 16, 32):
            Z = whiten(fit_whitener(X, d), X)
            zc = Z - Z.mean(axis=0)
            worst = max(worst, np.abs(zc.T @ zc / len(Z) - np.eye(d)).max())
    elapsed = time.perf_counter() - t0
    record(
        "whitening isotropy",
        worst <= 1e-6 and elapsed < 10,
        f"max |cov - I| = {worst:.2e} over 150 fits (tol 1e-6), {elapsed:.2f} s (< 10 s)",
    )


def test_sigmoid_constants():
    at_tau = float(sigmoid(0.99))
    near_top = float(sigmoid(0.999))
    n = 1000
    alpha = sigmoid(np.arange(1, n + 1) / n)
    share = float(np.sort(alpha)[::-1][:10].sum() / alpha.sum())
    ok = at_tau == 0.5 and abs(near_top - 0.6106) <= 1e-4 and share >= 0.85
    record(
        "sigmoid constants",
        ok,
        f"alpha(0.99) = {at_tau!r}, alpha(0.999) = {near_top:.6f}, "
        f"top-10 of 1000 mass share = {share:.4f} (required >= 0.85)",
    )


def test_metric_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {k: 0.0 for k in ("IC", "ICIR", "Sharpe", "MaxDD", "Ret", "CumRet")}
    for _ in range(1000):
        rets = rng.normal(0.005, 0.04, 120)
        ics = rng.normal(0.03, 0.1, 120)
        # a 120-name cross-section with ties in both legs
        f = np.round(rng.normal(size=120), 1)
        r = np.round(rng.normal(size=120), 1)
        ids = [f"F{k:03d}" for k in range(120)]
        pairs = {
            "IC": (ic(pd.Series(f, ids), pd.Series(r, ids)), oracles.spearman(list(f), list(r))),
            "ICIR": (icir(ics), oracles.icir(list(ics))),
            "Sharpe": (sharpe(rets), oracles.sharpe(list(rets))),
            "MaxDD": (maxdd(rets), oracles.maxdd(list(rets))),
            "Ret": (annret(rets), oracles.annret(list(rets))),
            "CumRet": (cumret(rets), oracles.cumret(list(rets))),
        }
        for k, (got, want) in pairs.items():
            worst[k] = max(worst[k], abs(got - want))
    elapsed = time.perf_counter() - t0
    err = max(worst.values())
    record(
        "metric oracle equivalence",
        err <= 1e-10 and elapsed < 30,
        f"max abs diff {err:.1e} (tol 1e-10) over 1000 series, {elapsed:.1f} s (< 30 s)",
    )


def test_neutralization_exactness():
    rng = np.random.default_rng(11)
    worst_mean = worst_cov = 0.0
    for _ in range(500):
        n = int(rng.integers(50, 501))
        g = int(rng.integers(2, 12))
        ids = [f"F{k:03d}" for k in range(n)]
        sectors = pd.Series(rng.integers(0, g, n).astype(str), ids)
        caps = pd.Series(rng.normal(8, 2, n), ids)
        values = pd.Series(rng.standard_t(4, n) + 0.3 * caps.to_numpy(), ids)
        out, _ = neutralize(values, sectors, caps)
        res = out.reindex(ids).to_numpy()
        size = caps.to_numpy()
        zsize = (size - size.mean()) / size.std()
        means = pd.Series(res).groupby(sectors.to_numpy()).mean()
        worst_mean = max(worst_mean, float(means.abs().max()))
        worst_cov = max(worst_cov, abs(oracles.covariance(list(res), list(zsize))))
    record(
        "neutralization exactness",
        worst_mean <= 1e-10 and worst_cov <= 1e-10,
        f"max |sector mean| = {worst_mean:.1e}, max |cov with size| = {worst_cov:.1e} over 500 cross-sections (tol 1e-10)",
    )


@pytest.fixture(scope="module")
def lead_lag_world(tmp_path_factory):
    """The default planted 200+200 firm, 120-month world, written by the CLI."""
    out = tmp_path_factory.mktemp("acceptance_world")
    t0 = time.perf_counter()
    assert main(["synth", "--seed", "0", "--out", str(out)]) == 0
    return out, time.perf_counter() - t0


def test_lookahead_guard(lead_lag_world, tmp_path):
    world, _ = lead_lag_world
    cfg = str(world / "config.ini")
    assert main(["backtest", "--config", cfg, "--out", str(tmp_path)]) == 0
    n_months = len(json.loads((tmp_path / "report_US_JP_L12_neutralized.json").read_text())["monthly"]["month"])
    code = main(["audit", "--config", cfg, "--out", str(tmp_path)])
    audit = json.loads((tmp_path / "audit_US_JP_L12_neutralized.json").read_text())
    ok = code == 0 and audit["passed"] and audit["months_checked"] >= n_months
    record(
        "look-ahead guard",
        ok,
        f"{audit['months_checked']} months audited against {n_months} backtest months, "
        f"contaminated months: {len(audit['contaminated'])}",
    )


def test_planted_recovery_cli(lead_lag_world, tmp_path):
    world, synth_seconds = lead_lag_world
    cfg = str(world / "config.ini")
    t0 = time.perf_counter()
    arms = {
        "cross": ([], "report_US_JP_L12_neutralized.json"),
        "shuffled": (["--shuffle-peers"], "report_US_JP_L12_neutralized.json"),
        "domestic": (["--source", "JP"], "report_JP_JP_L12_neutralized.json"),
    }
    icirs = {}
    for arm, (flags, name) in arms.items():
        out = tmp_path / arm
        assert main(["backtest", "--config", cfg, "--out", str(out), *flags]) == 0
        icirs[arm] = json.loads((out / name).read_text())["metrics"]["ICIR"]
    elapsed = synth_seconds + time.perf_counter() - t0
    ok = icirs["cross"] > 1.0 and abs(icirs["shuffled"]) < 0.3 and abs(icirs["domestic"]) < 0.3 and elapsed < 120
    record(
        "planted lead-lag recovery (CLI)",
        ok,
        f"ICIR cross {icirs['cross']:.3f} (> 1), shuffled {icirs['shuffled']:.3f}, "
        f"domestic {icirs['domestic']:.3f} (|.| < 0.3), {elapsed:.0f} s (< 120 s)",
    )


def _event_world(seed: int, echo: float, firms: int = 300, months: int = 24, embed_dim: int = 192):
    spec = SynthSpec(
        markets={m: firms for m in EVENT_MARKETS},
        months=months,
        link_pairs=[],
        event_sources_per_market=5,
        jump_prob=0.045,
        daily_noise=0.008,
        echo=echo,
        embed_dim=embed_dim,
        seed=seed,
    )
    world = generate(spec)
    panel = Panel(world.firms, world.prices, world.calendars)
    enc, _ = encode(world.embeddings, 128)
    events = detect_events(panel, world.event_sources, 0.03)
    return world, panel, enc, events


def test_event_lab_null_and_plant():
    t0 = time.perf_counter()
    percentiles, null_means, n_events = [], [], []
    for trial in range(20):
        _, panel, enc, events = _event_world(5000 + trial, echo=0.0)
        study = run_event_study(panel, enc, events, (10,), None, 200, seed=trial)
        rep = study.report(10, bootstrap_draws=200, seed=trial)
        percentiles.append(rep["market_random"]["graph_percentile"])
        null_means.append(nanmean(study.nulls[(10, "market")], axis=0))
        n_events.append(len(events))
    pooled = np.concatenate(null_means)
    pooled = pooled[np.isfinite(pooled)]
    null_z = pooled.mean() / (pooled.std(ddof=1) / math.sqrt(len(pooled)))
    ks_p = kstest(np.asarray(percentiles) / 100.0, "uniform").pvalue

    _, panel, enc, events = _event_world(6000, echo=0.005)
    study = run_event_study(panel, enc, events, (10,), None, 200, seed=0)
    rep = study.report(10, bootstrap_draws=200, seed=0)
    g = rep["graph_topk"]
    plant_z = (g["mean"] - 0.005) / (g["std"] / math.sqrt(g["n_events"]))
    pct_market = rep["market_random"]["graph_percentile"]
    pct_sector = rep["market_sector_random"]["graph_percentile"]
    elapsed = time.perf_counter() - t0
    ok = (
        abs(null_z) <= 3
        and ks_p > 0.01
        and abs(plant_z) <= 3
        and pct_market >= 95
        and pct_sector >= 95
        and elapsed < 180
    )
    record(
        "event lab null and plant",
        ok,
        f"unplanted: {np.mean(n_events):.0f} events/trial, market null mean z = {null_z:.2f}, "
        f"percentile KS p = {ks_p:.3f}; planted: mean {g['mean'] * 1e4:.1f} bp (z vs 50 bp = {plant_z:.2f}), "
        f"percentile {pct_market:.1f} / {pct_sector:.1f}; {elapsed:.0f} s (< 180 s)",
    )


def test_cluster_bootstrap_coverage():
    covered, p_pos = 0, []
    for trial in range(100):
        world, panel, enc, events = _event_world(1000 + trial, echo=0.005, firms=120, months=12, embed_dim=160)
        study = run_event_study(panel, enc, events, (10,), None, 0, seed=trial)
        r = study.returns[(10, "graph_topk")]
        baskets = {
            s: [f for f, _ in top_k_neighbors(enc, panel.firms, s, 10)] for s in world.event_sources
        }
        truth = planted_event_means(world, events, baskets)
        ok = np.isfinite(r) & np.isfinite(truth)
        boot = cluster_bootstrap(r, [e.source_id for e in events], 2000, seed=trial)
        target = float(truth[ok].mean())
        covered += boot["ci_low"] <= target <= boot["ci_high"]
        p_pos.append(boot["p_positive"])
    ok = covered >= 93 and min(p_pos) > 0.9
    record(
        "cluster bootstrap coverage",
        ok,
        f"95% CI covered the planted mean in {covered}/100 trials (>= 93), min P(mean > 0) = {min(p_pos):.3f} (> 0.9)",
    )


def _report_files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.is_file() and not p.name.startswith("manifest_")}


def test_determinism_across_threads(tmp_path):
    lead = tmp_path / "lead"
    assert main(["synth", "--firms-per-market", "40", "--months", "30", "--seed", "4", "--out", str(lead)]) == 0
    ev = tmp_path / "ev"
    assert main(["synth", "--preset", "events", "--firms-per-market", "60", "--months", "6", "--seed", "4", "--out", str(ev)]) == 0
    base = ["--dim", "16", "--lookback", "3"]
    commands = {
        "graph": [*base],
        "factor": [*base],
        "backtest": [*base],
        "geography": [*base],
        "sweep": [*base, "--param", "lookback", "--values", "1,3,6"],
        "audit": [*base, "--months", "3"],
        "events": ["--dim", "16", "--k", "10", "--null-draws", "50", "--bootstrap-draws", "200"],
    }
    mismatched, compared = [], 0
    for cmd, flags in commands.items():
        world = ev if cmd == "events" else lead
        a, b = tmp_path / cmd / "t1", tmp_path / cmd / "t4"
        assert main([cmd, "--config", str(world / "config.ini"), "--threads", "1", "--out", str(a), *flags]) == 0
        manifest = a / f"manifest_{cmd}.json"
        assert main([cmd, "--config", str(manifest), "--threads", "4", "--out", str(b)]) == 0
        fa, fb = _report_files(a), _report_files(b)
        compared += len(fa)
        if fa != fb:
            mismatched.append(cmd)
    again = tmp_path / "lead_again"
    assert main(["synth", "--firms-per-market", "40", "--months", "30", "--seed", "4", "--out", str(again)]) == 0
    for p in sorted(lead.rglob("*")):
        if p.is_file() and not p.name.startswith("manifest_"):
            compared += 1
            if p.read_bytes() != (again / p.relative_to(lead)).read_bytes():
                mismatched.append(f"synth:{p.name}")
    record(
        "determinism",
        not mismatched,
        f"{compared} report files compared across 1 vs 4 threads and repeated synth, mismatches: {mismatched or 'none'}",
    )
