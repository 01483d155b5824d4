"""Directed firm-pair similarity graphs and peer-weight schemes.

Scores for one ordered (source, target) market pair are stored densely as a
``targets x sources`` array; the graph is dense by construction so adjacency
lists buy nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .panel import Panel
from .whiten import Encodings

logger = logging.getLogger(__name__)

KAPPA = 50.0
TAU = 0.99
LOW_CONFIDENCE_CATEGORIES = 3


class GraphError(ValueError):
    pass


def _cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0 or not (np.isfinite(na) and np.isfinite(nb)):
        return None
    return float(a @ b / (na * nb))


def pair_score(z_i: dict[str, np.ndarray], z_j: dict[str, np.ndarray]) -> float:
    """Mean category cosine over the categories both firms have.

    Categories where either vector has zero norm are skipped; with no usable
    shared category the score is NaN.
    """
    cosines = []
    for cat in z_i.keys() & z_j.keys():
        c = _cosine(np.asarray(z_i[cat], float), np.asarray(z_j[cat], float))
        if c is not None:
            cosines.append(c)
    if not cosines:
        return float("nan")
    return float(np.mean(cosines))


def score_matrix(enc: Encodings, target_ids, source_ids) -> tuple[np.ndarray, np.ndarray]:
    """Scores and shared-category counts for every (target, source) pair."""
    u, usable = enc.unit()
    ti = enc.index_of(target_ids)
    si = enc.index_of(source_ids)
    num = np.einsum("cnd,cmd->nm", u[:, ti], u[:, si], optimize=True)
    counts = usable[ti].astype(np.int64) @ usable[si].T.astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(counts > 0, num / np.maximum(counts, 1), np.nan)
    return scores, counts


@dataclass(frozen=True)
class SimilarityGraph:
    source_market: str
    target_market: str
    target_ids: tuple[str, ...]
    source_ids: tuple[str, ...]
    scores: np.ndarray  # (n_targets, n_sources), NaN where unscored
    categories_used: np.ndarray  # (n_targets, n_sources) int

    @property
    def low_confidence(self) -> np.ndarray:
        return self.categories_used < LOW_CONFIDENCE_CATEGORIES

    @property
    def n_pairs(self) -> int:
        return self.scores.size

    def to_frame(self, weights: PeerWeights | None = None) -> pd.DataFrame:
        t, s = np.meshgrid(np.arange(len(self.target_ids)), np.arange(len(self.source_ids)), indexing="ij")
        frame = pd.DataFrame(
            {
                "target_id": np.asarray(self.target_ids, dtype=object)[t.ravel()],
                "source_id": np.asarray(self.source_ids, dtype=object)[s.ravel()],
                "score": self.scores.ravel(),
            }
        )
        if weights is not None:
            frame["alpha"] = weights.alpha.ravel()
        return frame

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            source_market=np.str_(self.source_market),
            target_market=np.str_(self.target_market),
            target_ids=np.array(self.target_ids),
            source_ids=np.array(self.source_ids),
            scores=self.scores,
            categories_used=self.categories_used,
        )

    @classmethod
    def load(cls, path: str | Path) -> SimilarityGraph:
        with np.load(path) as f:
            return cls(
                str(f["source_market"]),
                str(f["target_market"]),
                tuple(str(x) for x in f["target_ids"]),
                tuple(str(x) for x in f["source_ids"]),
                f["scores"],
                f["categories_used"],
            )


def build_graph(enc: Encodings, firms: pd.DataFrame, source_market: str, target_market: str) -> SimilarityGraph:
    """Score every (target, source) pair between two markets.

    For a domestic pair (source == target) a firm is never its own peer: the
    diagonal is left unscored.
    """
    encoded = set(enc.firm_ids)
    targets = [f for f in firms.index[firms["market"] == target_market] if f in encoded]
    sources = [f for f in firms.index[firms["market"] == source_market] if f in encoded]
    if not targets or not sources:
        side = "target" if not targets else "source"
        raise GraphError(f"no encoded firms on the {side} side ({source_market}->{target_market})")
    scores, counts = score_matrix(enc, targets, sources)
    if source_market == target_market:
        np.fill_diagonal(scores, np.nan)
        np.fill_diagonal(counts, 0)
    return SimilarityGraph(source_market, target_market, tuple(targets), tuple(sources), scores, counts)


# -- peer weights --------------------------------------------------------------


@dataclass
class PeerWeights:
    """Non-negative peer weights ``alpha[target, source]``; zero means no edge."""

    target_ids: tuple[str, ...]
    source_ids: tuple[str, ...]
    alpha: np.ndarray
    scheme: str
    uncovered: np.ndarray = field(default=None)
    flags: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.uncovered is None:
            self.uncovered = ~(self.alpha > 0).any(axis=1)

    def for_target(self, firm_id: str) -> pd.Series:
        k = self.target_ids.index(firm_id)
        return pd.Series(self.alpha[k], index=self.source_ids)

    def shuffled(self, seed: int) -> PeerWeights:
        """Same weights attached to a random permutation of the source firms."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self.source_ids))
        return PeerWeights(
            self.target_ids,
            self.source_ids,
            self.alpha[:, perm],
            f"{self.scheme}_shuffled",
            self.uncovered.copy(),
            dict(self.flags),
        )


def sigmoid(rank, kappa: float = KAPPA, tau: float = TAU):
    """Logistic peer weight ``1 / (1 + exp(-kappa (rank - tau)))``."""
    return 1.0 / (1.0 + np.exp(-kappa * (np.asarray(rank, dtype=float) - tau)))


def percentile_ranks(scores: np.ndarray) -> np.ndarray:
    """Per-row percentile rank in (0, 1] of the finite entries; NaN elsewhere.

    Rank is the average-method rank divided by the number of valid peers, so
    tied scores share the mean rank of their tie group.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    out = np.full(scores.shape, np.nan)
    for k, row in enumerate(scores):
        valid = np.isfinite(row)
        n = int(valid.sum())
        if n:
            out[k, valid] = rankdata(row[valid], method="average") / n
    return out


def rank_sigmoid_weights(
    scores: np.ndarray,
    target_ids,
    source_ids,
    scheme: str,
    kappa: float = KAPPA,
    tau: float = TAU,
) -> PeerWeights:
    ranks = percentile_ranks(scores)
    alpha = np.where(np.isfinite(ranks), sigmoid(np.nan_to_num(ranks), kappa, tau), 0.0)
    n_valid = np.isfinite(scores).sum(axis=1)
    flags = {
        "single_peer": [t for t, n in zip(target_ids, n_valid) if n == 1],
    }
    if flags["single_peer"]:
        logger.warning("%d targets have a single scored peer", len(flags["single_peer"]))
    return PeerWeights(tuple(target_ids), tuple(source_ids), alpha, scheme, n_valid == 0, flags)


def sigmoid_weights(graph: SimilarityGraph, kappa: float = KAPPA, tau: float = TAU) -> PeerWeights:
    """Per-target percentile rank of the text scores through the logistic."""
    return rank_sigmoid_weights(graph.scores, graph.target_ids, graph.source_ids, "text_sigmoid", kappa, tau)


def gics_equal_weights(firms: pd.DataFrame, source_market: str, target_market: str) -> PeerWeights:
    """Weight 1 for every source firm sharing the target's sector, else 0."""
    targets = firms.index[firms["market"] == target_market]
    sources = firms.index[firms["market"] == source_market]
    t_sec = firms.loc[targets, "sector"].to_numpy()
    s_sec = firms.loc[sources, "sector"].to_numpy()
    alpha = (t_sec[:, None] == s_sec[None, :]).astype(float)
    if source_market == target_market:
        np.fill_diagonal(alpha, 0.0)
    weights = PeerWeights(tuple(targets), tuple(sources), alpha, "gics_equal")
    weights.flags["uncovered"] = [t for t, u in zip(targets, weights.uncovered) if u]
    return weights


def masked_correlation(x: np.ndarray, y: np.ndarray, min_overlap: int) -> np.ndarray:
    """Pairwise-complete Pearson correlation between the columns of two
    ``T x n`` / ``T x m`` arrays; NaN where overlap < ``min_overlap``."""
    mx = np.isfinite(x).astype(float)
    my = np.isfinite(y).astype(float)
    x0 = np.nan_to_num(x)
    y0 = np.nan_to_num(y)
    n = mx.T @ my
    sx = x0.T @ my
    sy = mx.T @ y0
    sxy = x0.T @ y0
    sxx = (x0**2).T @ my
    syy = mx.T @ (y0**2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = n * sxy - sx * sy
        var = (n * sxx - sx**2) * (n * syy - sy**2)
        corr = cov / np.sqrt(var)
    corr[(n < min_overlap) | ~(var > 0)] = np.nan
    return np.clip(corr, -1.0, 1.0)


def corr_weights(
    panel: Panel,
    source_market: str,
    target_market: str,
    as_of,
    window: int = 252,
    min_overlap: int = 120,
    kappa: float = KAPPA,
    tau: float = TAU,
) -> PeerWeights:
    """Trailing daily-return correlation peers, ranked and passed through the logistic.

    The window is the last ``window`` trading dates of the target market on or
    before ``as_of``; source returns are matched by calendar date.
    """
    as_of = pd.Timestamp(as_of)
    t_ret = panel.daily_returns(target_market)
    s_ret = panel.daily_returns(source_market)
    t_win = t_ret.loc[:as_of].iloc[-window:]
    if t_win.empty:
        raise GraphError(f"no {target_market} returns on or before {as_of:%Y-%m-%d}")
    s_win = s_ret.reindex(t_win.index)
    corr = masked_correlation(t_win.to_numpy(), s_win.to_numpy(), min_overlap)
    if source_market == target_market:
        np.fill_diagonal(corr, np.nan)
    return rank_sigmoid_weights(corr, t_win.columns, s_win.columns, "corr_sigmoid", kappa, tau)


def top_k_neighbors(
    enc: Encodings,
    firms: pd.DataFrame,
    source_id: str,
    k: int,
    exclude_home: bool = True,
    exclude_markets=(),
) -> list[tuple[str, float]]:
    """The ``k`` highest-scoring firms for ``source_id`` pooled across markets.

    Ties are broken by firm id.  Returns fewer than ``k`` (with a warning) when
    the candidate pool is too small.
    """
    excluded = set(exclude_markets)
    if exclude_home:
        excluded.add(firms.at[source_id, "market"])
    keep = (
        (firms.index != source_id)
        & firms.index.isin(enc.firm_ids)
        & ~firms["market"].isin(sorted(excluded)).to_numpy()
    )
    pool = list(firms.index[keep])
    scores, _ = score_matrix(enc, [source_id], pool)
    ranked = sorted(
        ((f, float(s)) for f, s in zip(pool, scores[0]) if np.isfinite(s)),
        key=lambda fs: (-fs[1], fs[0]),
    )
    if len(ranked) < k:
        logger.warning("%s: only %d candidates for top-%d", source_id, len(ranked), k)
    return ranked[:k]
