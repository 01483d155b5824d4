"""PCA whitening of per-category disclosure embeddings.

A model is fitted independently for each schema category.  The transform is::

    z = sqrt(n) * diag(1 / s_d) @ V_d @ (e - mu)

with ``V_d`` the top-``d`` right singular vectors (rows) of the centred
``n x p`` embedding matrix and ``s_d`` their singular values.  On the fit set the
whitened vectors have zero mean and ``(1/n) Z^T Z = I_d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

MODEL_FORMAT_VERSION = 1

CATEGORIES: tuple[str, ...] = (
    "main_business_segments",
    "core_technologies",
    "primary_customers",
    "supply_chain_position",
    "geographic_coverage",
    "financial_profile",
    "revenue_model",
    "value_proposition",
    "strategic_focus",
    "key_competitors",
)

PCA_DIMS: tuple[int, ...] = (64, 128, 256, 512, 768, 1024)


class WhiteningError(ValueError):
    pass


@dataclass(frozen=True)
class WhitenModel:
    category: str
    mean: np.ndarray  # (p,)
    components: np.ndarray  # (d, p), orthonormal rows
    singular_values: np.ndarray  # (d,), descending, > 0
    n: int

    @property
    def d(self) -> int:
        return self.components.shape[0]

    @property
    def p(self) -> int:
        return self.components.shape[1]

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            version=np.int64(MODEL_FORMAT_VERSION),
            category=np.str_(self.category),
            mean=self.mean,
            components=self.components,
            singular_values=self.singular_values,
            n=np.int64(self.n),
        )

    @classmethod
    def load(cls, path: str | Path) -> WhitenModel:
        with np.load(path) as f:
            version = int(f["version"])
            if version != MODEL_FORMAT_VERSION:
                raise WhiteningError(f"unsupported model version {version}")
            return cls(
                category=str(f["category"]),
                mean=f["mean"],
                components=f["components"],
                singular_values=f["singular_values"],
                n=int(f["n"]),
            )


def effective_rank(singular_values: np.ndarray, shape: tuple[int, int]) -> int:
    if singular_values.size == 0 or singular_values[0] == 0:
        return 0
    tol = singular_values[0] * max(shape) * np.finfo(float).eps
    return int(np.sum(singular_values > tol))


def fit_whitener(embeddings, d: int, category: str = "") -> WhitenModel:
    """Fit the whitening transform on an ``n x p`` matrix of raw embeddings.

    Raises
    ------
    WhiteningError
        With fewer than two vectors, non-finite input, or when ``d`` exceeds the
        effective rank of the centred matrix.
    """
    X = np.asarray(embeddings, dtype=float)
    if X.ndim != 2:
        raise WhiteningError("embeddings must be a 2-D array")
    n, p = X.shape
    if n < 2:
        raise WhiteningError(f"need at least 2 vectors to fit, got {n}")
    if not np.isfinite(X).all():
        raise WhiteningError("embeddings contain non-finite entries")
    if d < 1:
        raise WhiteningError(f"dimension must be >= 1, got {d}")

    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank = effective_rank(s, X.shape)
    if d > min(n - 1, p) or d > rank:
        raise WhiteningError(
            f"requested d={d} but the centred matrix has effective rank {rank} "
            f"(n={n}, p={p})"
        )
    return WhitenModel(
        category=category,
        mean=mean,
        components=vt[:d].copy(),
        singular_values=s[:d].copy(),
        n=n,
    )


def whiten(model: WhitenModel, e) -> np.ndarray:
    """Apply a fitted model to one vector (``p``) or a stack (``m x p``)."""
    e = np.asarray(e, dtype=float)
    if e.shape[-1] != model.p:
        raise WhiteningError(f"vector length {e.shape[-1]} != model dimension {model.p}")
    projected = (e - model.mean) @ model.components.T
    return math.sqrt(model.n) * projected / model.singular_values


def whitened_covariance(z: np.ndarray) -> np.ndarray:
    """Fit-set covariance ``(1/n) sum (z - zbar)(z - zbar)^T`` (population form)."""
    z = np.asarray(z, dtype=float)
    zc = z - z.mean(axis=0)
    return zc.T @ zc / z.shape[0]


@dataclass(frozen=True)
class Encodings:
    """Whitened vectors for every firm and category.

    ``vectors[c, k]`` is firm ``firm_ids[k]``'s encoding for ``categories[c]``;
    rows of firms lacking a category are NaN and ``present[k, c]`` is False.
    """

    firm_ids: tuple[str, ...]
    categories: tuple[str, ...]
    vectors: np.ndarray  # (C, N, d)
    present: np.ndarray  # (N, C) bool

    def index_of(self, ids) -> np.ndarray:
        lookup = {f: k for k, f in enumerate(self.firm_ids)}
        return np.array([lookup[f] for f in ids], dtype=np.int64)

    def firm(self, firm_id: str) -> dict[str, np.ndarray]:
        k = self.index_of([firm_id])[0]
        return {
            c: self.vectors[ci, k]
            for ci, c in enumerate(self.categories)
            if self.present[k, ci]
        }

    def unit(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit-normalised vectors with missing or zero-norm rows zeroed, and
        the matching usable mask ``(N, C)``."""
        return self._unit

    @cached_property
    def _unit(self) -> tuple[np.ndarray, np.ndarray]:
        v = np.nan_to_num(self.vectors, nan=0.0)
        norms = np.linalg.norm(v, axis=2)
        usable = self.present & (norms.T > 0)
        safe = np.where(norms > 0, norms, 1.0)
        u = v / safe[:, :, None]
        u[~usable.T] = 0.0
        return u, usable


def encode(raw: dict[str, tuple[list[str], np.ndarray]], d: int) -> tuple[Encodings, dict[str, WhitenModel]]:
    """Fit one whitener per category and stack the whitened vectors.

    ``raw`` maps category -> (firm ids, ``n x p`` matrix).  A firm missing from
    a category is excluded from that category's fit and marked absent.
    """
    categories = tuple(raw)
    ids = sorted({f for fids, _ in raw.values() for f in fids})
    pos = {f: k for k, f in enumerate(ids)}
    vectors = np.full((len(categories), len(ids), d), np.nan)
    present = np.zeros((len(ids), len(categories)), dtype=bool)
    models = {}
    for ci, cat in enumerate(categories):
        fids, X = raw[cat]
        model = fit_whitener(X, d, category=cat)
        models[cat] = model
        rows = np.array([pos[f] for f in fids], dtype=np.int64)
        vectors[ci, rows] = whiten(model, X)
        present[rows, ci] = True
    return Encodings(tuple(ids), categories, vectors, present), models
