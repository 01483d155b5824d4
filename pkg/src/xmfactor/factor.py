"""Monthly peer-momentum factor and its sector/size neutralization.

Timing: the month-``M`` factor only reads returns that end at month ``M-1``
and size measured at the end of ``M-1``.  :func:`lookahead_audit` proves it by
scrambling every price from the first day of ``M`` onward and recomputing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import pandas as pd

from .graph import PeerWeights
from .panel import Panel

logger = logging.getLogger(__name__)

VARIANTS = ("raw", "neutralized", "strict")
OWN_MOMENTUM_MONTHS = 12
WINSOR_PCT = 1.0

WeightsLike = Union[PeerWeights, Callable[[Panel, pd.Period], PeerWeights]]


class FactorError(ValueError):
    pass


def compute_factor(weights: PeerWeights, peer_returns: pd.Series) -> pd.Series:
    """Similarity-weighted mean of the peers' returns for every target firm.

    Peers without a valid return drop out of both numerator and denominator.
    Targets left with zero weight mass get NaN.
    """
    r = peer_returns.reindex(list(weights.source_ids)).to_numpy(dtype=float)
    valid = np.isfinite(r)
    alpha = weights.alpha * valid
    mass = alpha.sum(axis=1)
    num = alpha @ np.where(valid, r, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(mass > 0, num / np.where(mass > 0, mass, 1.0), np.nan)
    return pd.Series(f, index=list(weights.target_ids), name="factor")


@dataclass
class NeutralizationReport:
    month: object
    n: int
    sector_means: dict[str, float]
    size_beta: float
    residual_std: float
    flags: list[str] = field(default_factory=list)


def _zscore(x: np.ndarray) -> np.ndarray | None:
    sd = x.std()
    if not sd > 0:
        return None
    return (x - x.mean()) / sd


def _group_demean(x: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sums = np.bincount(codes, weights=x)
    counts = np.bincount(codes)
    means = sums / counts
    return x - means[codes], means


def _align(values: pd.Series, *others: pd.Series) -> pd.DataFrame:
    frame = pd.concat([values.rename("f"), *others], axis=1, join="inner")
    return frame.dropna()


def neutralize(values: pd.Series, sectors: pd.Series, log_caps: pd.Series, month=None):
    """Sector- and size-neutral residual of one factor cross-section.

    Steps: demean within sector, z-score, then regress on z-scored log market
    cap (itself taken within sector so the residual keeps zero sector means)
    and keep the residual.  The residual has zero mean in every sector and zero
    sample covariance with z-scored log cap.

    Returns
    -------
    (Series, NeutralizationReport)
        Residual indexed like the usable firms; firms missing any input are
        dropped.
    """
    frame = _align(values, sectors.rename("sector"), log_caps.rename("size"))
    report = NeutralizationReport(month, len(frame), {}, float("nan"), float("nan"))
    if len(frame) < 3:
        raise FactorError(f"{month}: need >= 3 firms to neutralize, got {len(frame)}")
    codes, uniques = pd.factorize(frame["sector"], sort=True)
    if len(uniques) == 1:
        report.flags.append("single_sector")

    f, sector_means = _group_demean(frame["f"].to_numpy(float), codes)
    report.sector_means = dict(zip(uniques, sector_means.tolist()))
    fz = _zscore(f)
    if fz is None:
        report.flags.append("zero_variance")
        report.size_beta = 0.0
        report.residual_std = 0.0
        return pd.Series(0.0, index=frame.index), report

    size = _zscore(frame["size"].to_numpy(float))
    if size is None:
        report.flags.append("constant_size")
        resid, beta = fz, 0.0
    else:
        size_w, _ = _group_demean(size, codes)
        ss = size_w @ size_w
        beta = float(fz @ size_w / ss) if ss > 0 else 0.0
        resid = fz - beta * size_w
    report.size_beta = beta
    report.residual_std = float(resid.std())
    return pd.Series(resid, index=frame.index), report


def winsorize(x: np.ndarray, pct: float = WINSOR_PCT) -> np.ndarray:
    lo, hi = np.percentile(x, [pct, 100.0 - pct])
    return np.clip(x, lo, hi)


def _independent_columns(X: np.ndarray, names: list[str], tol: float = 1e-9) -> tuple[np.ndarray, list[str], list[str]]:
    kept, kept_names, dropped = [], [], []
    for j, name in enumerate(names):
        trial = np.column_stack(kept + [X[:, j]]) if kept else X[:, [j]]
        if np.linalg.matrix_rank(trial, tol=tol * max(1.0, np.abs(trial).max())) == trial.shape[1]:
            kept.append(X[:, j])
            kept_names.append(name)
        else:
            dropped.append(name)
    return np.column_stack(kept), kept_names, dropped


def strict_neutralize(
    values: pd.Series,
    sectors: pd.Series,
    log_caps: pd.Series,
    industry_momentum: pd.Series,
    own_momentum: pd.Series,
    month=None,
):
    """Winsorize at 1/99%, standardize, then residualize on sector dummies,
    z-scored log cap, industry momentum and own momentum jointly.

    Collinear regressors are dropped (first-come order) and reported in the
    flags; industry momentum is sector-constant and therefore usually dropped.
    """
    frame = _align(
        values,
        sectors.rename("sector"),
        log_caps.rename("size"),
        industry_momentum.rename("ind_mom"),
        own_momentum.rename("own_mom"),
    )
    report = NeutralizationReport(month, len(frame), {}, float("nan"), float("nan"))
    if len(frame) < 3:
        raise FactorError(f"{month}: need >= 3 firms to neutralize, got {len(frame)}")
    f = _zscore(winsorize(frame["f"].to_numpy(float)))
    if f is None:
        report.flags.append("zero_variance")
        return pd.Series(0.0, index=frame.index), report

    dummies = pd.get_dummies(frame["sector"], prefix="sector", dtype=float)
    size = _zscore(frame["size"].to_numpy(float))
    cols = [dummies.to_numpy()]
    names = list(dummies.columns)
    for name, col in (("size", size), ("ind_mom", frame["ind_mom"].to_numpy(float)), ("own_mom", frame["own_mom"].to_numpy(float))):
        if col is not None:
            cols.append(col[:, None])
            names.append(name)
    X, kept, dropped = _independent_columns(np.hstack(cols), names)
    if dropped:
        report.flags.append("dropped:" + ",".join(dropped))
    coef, *_ = np.linalg.lstsq(X, f, rcond=None)
    resid = f - X @ coef
    codes, uniques = pd.factorize(frame["sector"], sort=True)
    report.sector_means = dict(zip(uniques, (np.bincount(codes, f) / np.bincount(codes)).tolist()))
    report.size_beta = float(coef[kept.index("size")]) if "size" in kept else float("nan")
    report.residual_std = float(resid.std())
    return pd.Series(resid, index=frame.index), report


@dataclass
class FactorPanel:
    """Factor values for one (source, target, lookback, scheme) configuration.

    ``values`` is a months x target-firm frame; NaN means no usable factor.
    """

    values: pd.DataFrame
    variant: str
    source_market: str
    target_market: str
    lookback: int
    scheme: str
    reports: list[NeutralizationReport] = field(default_factory=list)

    def cross_section(self, month) -> pd.Series:
        return self.values.loc[pd.Period(month, "M")].dropna()

    def to_long(self) -> pd.DataFrame:
        long = self.values.stack().rename(self.variant).reset_index()
        long.columns = ["month", "firm_id", self.variant]
        long["month"] = long["month"].astype(str)
        return long


def _resolve(weights: WeightsLike, panel: Panel, month: pd.Period) -> PeerWeights:
    return weights(panel, month) if callable(weights) else weights


def factor_cross_section(
    panel: Panel,
    weights: WeightsLike,
    source_market: str,
    target_market: str,
    month,
    lookback: int,
    variant: str = "raw",
) -> tuple[pd.Series, NeutralizationReport | None]:
    """Factor for a single month ``M`` using data that ends at ``M-1``."""
    if variant not in VARIANTS:
        raise FactorError(f"unknown variant {variant!r}")
    month = pd.Period(month, "M")
    prev = month - 1
    if prev not in panel.months:
        return pd.Series(dtype=float), None
    w = _resolve(weights, panel, month)
    peer_r = panel.sector_relative_returns(source_market, lookback).loc[prev]
    raw = compute_factor(w, peer_r).dropna()
    if variant == "raw":
        return raw, None

    sectors = panel.sectors(target_market)
    caps = panel.log_market_caps(target_market).loc[prev]
    try:
        if variant == "neutralized":
            return neutralize(raw, sectors, caps, month)
        own = panel.sector_relative_returns(target_market, OWN_MOMENTUM_MONTHS).loc[prev]
        ind = panel.sector_mean_returns(target_market, OWN_MOMENTUM_MONTHS).loc[prev]
        return strict_neutralize(raw, sectors, caps, ind, own, month)
    except FactorError as exc:
        logger.info("skipping month: %s", exc)
        return pd.Series(dtype=float), None


def build_factor_panel(
    panel: Panel,
    weights: WeightsLike,
    source_market: str,
    target_market: str,
    lookback: int = 12,
    variant: str = "raw",
    months=None,
    scheme: str | None = None,
) -> FactorPanel:
    """Factor values for every month (default: all panel months after the first)."""
    months = panel.months[1:] if months is None else pd.PeriodIndex(months, freq="M")
    targets = list(panel.market_firms(target_market))
    rows, reports = {}, []
    for m in months:
        values, report = factor_cross_section(panel, weights, source_market, target_market, m, lookback, variant)
        rows[m] = values.reindex(targets)
        if report is not None:
            reports.append(report)
    frame = pd.DataFrame(rows).T.reindex(months)
    frame.columns = targets
    if scheme is None:
        scheme = weights.scheme if isinstance(weights, PeerWeights) else "dynamic"
    return FactorPanel(frame, variant, source_market, target_market, lookback, scheme, reports)


@dataclass
class AuditResult:
    passed: bool
    months_checked: int
    contaminated: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "months_checked": self.months_checked,
            "contaminated": self.contaminated,
        }


def lookahead_audit(
    panel: Panel,
    weights: WeightsLike,
    source_market: str,
    target_market: str,
    lookback: int = 12,
    variant: str = "raw",
    months=None,
    seed: int = 0,
    compute=factor_cross_section,
) -> AuditResult:
    """Recompute each month's factor after scrambling all prices from that month on.

    Passes iff every recomputed value is bit-identical to the original.  The
    ``compute`` hook exists so the audit itself can be tested against a
    deliberately leaky factor.
    """
    months = panel.months[1:] if months is None else pd.PeriodIndex(months, freq="M")
    contaminated = {}
    for k, m in enumerate(months):
        base, _ = compute(panel, weights, source_market, target_market, m, lookback, variant)
        noisy_panel = panel.perturbed(m.start_time, seed=seed + k)
        noisy, _ = compute(noisy_panel, weights, source_market, target_market, m, lookback, variant)
        idx = base.index.union(noisy.index)
        a = base.reindex(idx).to_numpy(float)
        b = noisy.reindex(idx).to_numpy(float)
        same = (a == b) | (np.isnan(a) & np.isnan(b))
        if not same.all():
            contaminated[str(m)] = [str(f) for f in idx[~same]]
    if contaminated:
        logger.error("look-ahead audit failed for %d months", len(contaminated))
    return AuditResult(not contaminated, len(months), contaminated)
