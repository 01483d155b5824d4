from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmfactor.graph import pair_score, score_matrix
from xmfactor.whiten import (
    PCA_DIMS,
    WhitenModel,
    WhiteningError,
    encode,
    fit_whitener,
    whiten,
    whitened_covariance,
)


def test_identical_vectors_rejected():
    X = np.tile([1.0, 2.0, 3.0], (3, 1))
    with pytest.raises(WhiteningError, match="effective rank 0"):
        fit_whitener(X, 1)


def test_single_vector_rejected():
    with pytest.raises(WhiteningError, match="at least 2"):
        fit_whitener(np.ones((1, 4)), 1)


def test_d_above_rank_reports_rank():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 20))  # rank 3
    with pytest.raises(WhiteningError, match="effective rank 3"):
        fit_whitener(X, 4)


def test_nonfinite_rejected():
    X = np.ones((5, 3))
    X[0, 0] = np.nan
    with pytest.raises(WhiteningError):
        fit_whitener(X, 1)


def test_against_eigendecomposition():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((200, 16)) * np.linspace(3, 0.5, 16)
    model = fit_whitener(X, 8)
    # independent route: eigenvectors of the (1/n) covariance
    C = np.cov(X, rowvar=False, bias=True)
    evals, evecs = np.linalg.eigh(C)
    order = np.argsort(evals)[::-1][:8]
    assert np.all(np.diff(model.singular_values) <= 0)
    assert np.allclose(model.components @ model.components.T, np.eye(8), atol=1e-8)
    assert np.allclose(model.singular_values**2 / 200, evals[order], rtol=1e-10)
    # rows agree up to sign
    overlap = np.abs(np.sum(model.components * evecs[:, order].T, axis=1))
    assert np.allclose(overlap, 1.0, atol=1e-8)


def test_two_d_square_toy():
    X = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    model = fit_whitener(X, 2)
    Z = whiten(model, X)
    assert np.allclose(whitened_covariance(Z), np.eye(2), atol=1e-10)
    # the centred square has both singular values equal to 2
    assert np.allclose(model.singular_values, [2.0, 2.0])


def test_mean_maps_to_zero():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((30, 6))
    model = fit_whitener(X, 4)
    assert np.allclose(whiten(model, model.mean), 0.0, atol=1e-14)


def test_length_mismatch():
    model = fit_whitener(np.random.default_rng(3).standard_normal((10, 5)), 2)
    with pytest.raises(WhiteningError, match="length"):
        whiten(model, np.zeros(4))


@pytest.mark.parametrize("d", PCA_DIMS)
def test_standard_dims_accepted(d):
    rng = np.random.default_rng(d)
    X = rng.standard_normal((d + 20, d + 8))
    model = fit_whitener(X, d)
    assert model.d == d


def test_isotropy_on_fit_set():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((300, 64)) @ rng.standard_normal((64, 64))
    model = fit_whitener(X, 32)
    cov = whitened_covariance(whiten(model, X))
    assert np.max(np.abs(cov - np.eye(32))) < 1e-6


def test_order_invariance():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((40, 10))
    perm = rng.permutation(40)
    a = whiten(fit_whitener(X, 5), X)
    b = whiten(fit_whitener(X[perm], 5), X[perm])
    cos_a = _cosines(a[perm])
    cos_b = _cosines(b)
    assert np.allclose(cos_a, cos_b, atol=1e-10)


def _cosines(Z):
    U = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    return U @ U.T


def test_sign_flip_leaves_scores():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((50, 12))
    model = fit_whitener(X, 6)
    signs = rng.choice([-1.0, 1.0], size=6)
    flipped = WhitenModel(model.category, model.mean, model.components * signs[:, None], model.singular_values, model.n)
    za, zb = whiten(model, X), whiten(flipped, X)
    for i, j in [(0, 1), (3, 7), (10, 40)]:
        assert pair_score({"c": za[i]}, {"c": za[j]}) == pytest.approx(pair_score({"c": zb[i]}, {"c": zb[j]}), abs=1e-12)


def test_anisotropy_reduction():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((200, 32)) + 6.0 * rng.standard_normal(32)
    before = _cosines(X)[np.triu_indices(200, 1)].mean()
    after = _cosines(whiten(fit_whitener(X, 16), X))[np.triu_indices(200, 1)].mean()
    assert after < before
    assert before > 0.5


def test_save_load_roundtrip(tmp_path):
    model = fit_whitener(np.random.default_rng(8).standard_normal((20, 6)), 3, category="core_technologies")
    path = tmp_path / "m.npz"
    model.save(path)
    back = WhitenModel.load(path)
    assert back.category == "core_technologies"
    assert back.n == 20 and back.d == 3
    assert np.array_equal(back.components, model.components)


def test_encode_missing_category_marked_absent():
    rng = np.random.default_rng(9)
    raw = {
        "a": (["F1", "F2", "F3", "F4"], rng.standard_normal((4, 5))),
        "b": (["F1", "F2", "F3"], rng.standard_normal((3, 5))),
    }
    enc, models = encode(raw, 2)
    assert set(models) == {"a", "b"}
    k = enc.index_of(["F4"])[0]
    assert enc.present[k].tolist() == [True, False]
    assert set(enc.firm("F4")) == {"a"}
    scores, counts = score_matrix(enc, ["F4"], ["F1"])
    assert counts[0, 0] == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 40), st.integers(3, 12), st.integers(0, 2**31 - 1))
def test_isotropy_property(n, p, seed):
    X = np.random.default_rng(seed).standard_normal((n, p))
    d = min(n - 1, p)
    cov = whitened_covariance(whiten(fit_whitener(X, d), X))
    assert np.max(np.abs(cov - np.eye(d))) < 1e-6
