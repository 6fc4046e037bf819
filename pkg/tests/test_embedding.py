"""PCA, perplexity calibration, and t-SNE against independent oracles."""

import logging

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from maskscope.embedding import (
    NumericError,
    TsneParams,
    build_descriptors,
    calibrate_perplexity,
    embed_descriptors,
    embed_masks,
    pca_reduce,
    squared_distances,
    tsne_embed,
)
from maskscope.gradcam import mask_pipeline
from maskscope.tensor_io import load_manifest

import synthdata


def pca_oracle(X, n_components):
    # Literal covariance eigendecomposition with the same sign convention.
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (len(X) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    V = evecs[:, order]
    for j in range(V.shape[1]):
        peak = np.argmax(np.abs(V[:, j]))
        if V[peak, j] < 0:
            V[:, j] = -V[:, j]
    return centered @ V


def row_entropy_bits(p_row):
    p = p_row[p_row > 0]
    return float(-(p * np.log2(p)).sum())


def test_pca_line_collapses_to_one_component():
    X = np.array([[0, 0], [1, 2], [2, 4], [3, 6]], dtype=float)
    _, ratios = pca_reduce(X, 2)
    assert abs(ratios[0] - 1.0) < 1e-9
    assert abs(ratios[1]) < 1e-9


def test_pca_matches_dense_eigen_oracle():
    rng = np.random.default_rng(21)
    X = rng.standard_normal((8, 5))
    scores, ratios = pca_reduce(X, 5)
    np.testing.assert_allclose(scores, pca_oracle(X, 5), atol=1e-6)
    assert ratios.shape == (5,)


def test_pca_full_rank_scores_preserve_geometry():
    # With as many components as the rank, projection is an isometry of
    # the centered rows, so the Gram matrix survives.
    rng = np.random.default_rng(22)
    X = rng.standard_normal((10, 4)) @ rng.standard_normal((4, 7))  # rank 4
    scores, _ = pca_reduce(X, 4)
    centered = X - X.mean(axis=0)
    np.testing.assert_allclose(scores @ scores.T, centered @ centered.T, atol=1e-8)


def test_pca_translation_invariance():
    rng = np.random.default_rng(23)
    X = rng.standard_normal((12, 6))
    shift = rng.standard_normal(6) * 100
    base, _ = pca_reduce(X, 4)
    moved, _ = pca_reduce(X + shift, 4)
    assert np.abs(base - moved).max() < 1e-6


def test_pca_ratio_ordering():
    rng = np.random.default_rng(24)
    _, ratios = pca_reduce(rng.standard_normal((30, 8)), 8)
    assert (ratios >= 0).all()
    assert (np.diff(ratios) <= 1e-12).all()
    assert ratios.sum() <= 1 + 1e-9


def test_pca_clamps_component_count(caplog):
    rng = np.random.default_rng(25)
    with caplog.at_level(logging.WARNING, logger="maskscope.embedding"):
        scores, ratios = pca_reduce(rng.standard_normal((4, 8)), 50)
    assert scores.shape == (4, 3)  # min(N-1, D)
    assert ratios.shape == (3,)
    assert any("clamping" in r.message for r in caplog.records)


def test_pca_rejects_tiny_input():
    with pytest.raises(ValueError):
        pca_reduce(np.ones((1, 4)), 2)


def test_pca_wide_matches_dense_eigen_oracle():
    # Far more columns than rows takes the Gram route internally; the
    # oracle still builds the full covariance, so the answers must agree.
    rng = np.random.default_rng(26)
    X = rng.standard_normal((8, 600))
    scores, ratios = pca_reduce(X, 5)
    np.testing.assert_allclose(scores, pca_oracle(X, 5), atol=1e-6)
    assert (np.diff(ratios) <= 1e-12).all()
    assert ratios.sum() <= 1 + 1e-9


def test_pca_wide_full_rank_preserves_geometry():
    rng = np.random.default_rng(27)
    X = rng.standard_normal((6, 100))
    scores, _ = pca_reduce(X, 5)
    centered = X - X.mean(axis=0)
    np.testing.assert_allclose(scores @ scores.T, centered @ centered.T, atol=1e-8)


def test_pca_wide_rank_deficient_stays_finite():
    # Repeated rows leave zero eigenvalues; those directions carry no
    # variance and must come back as zero scores, not overflow.
    rng = np.random.default_rng(28)
    X = np.repeat(rng.standard_normal((2, 50)), 3, axis=0)
    scores, ratios = pca_reduce(X, 3)
    assert np.isfinite(scores).all()
    assert np.abs(scores[:, 1:]).max() == 0.0
    np.testing.assert_allclose(scores[:, :1], pca_oracle(X, 1), atol=1e-8)
    assert abs(ratios[0] - 1.0) < 1e-9


def test_pca_handles_image_sized_descriptors():
    # Conv grids at full image resolution produce ~50k-dimensional rows;
    # the covariance matrix for those would need tens of GiB.
    rng = np.random.default_rng(29)
    X = rng.standard_normal((4, 224 * 224))
    scores, ratios = pca_reduce(X, 50)
    assert scores.shape == (4, 3)
    assert np.isfinite(scores).all()
    assert ratios.shape == (3,)


def test_squared_distances_basics():
    X = np.array([[0.0, 0.0], [3.0, 4.0]])
    d2 = squared_distances(X)
    np.testing.assert_allclose(d2, [[0, 25], [25, 0]], atol=1e-12)


def test_calibration_uniform_on_equidistant_points():
    # Regular tetrahedron: all pairwise distances equal, so every row is
    # uniform no matter what bandwidth the search lands on.
    X = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    P = calibrate_perplexity(squared_distances(X), 1.2)
    expected = np.full((4, 4), 1 / 3)
    np.fill_diagonal(expected, 0.0)
    np.testing.assert_allclose(P, expected, atol=1e-9)


def test_calibration_rows_sum_to_one():
    rng = np.random.default_rng(31)
    X = rng.standard_normal((25, 4))
    P = calibrate_perplexity(squared_distances(X), 6)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert (P >= 0).all()
    assert np.abs(np.diag(P)).max() == 0.0


def test_calibration_hits_entropy_target():
    rng = np.random.default_rng(32)
    for trial in range(5):
        X = rng.standard_normal((20, 6))
        P = calibrate_perplexity(squared_distances(X), 5)
        for i in range(20):
            assert abs(row_entropy_bits(P[i]) - np.log2(5)) < 1e-5


def test_calibration_input_validation():
    good = squared_distances(np.random.default_rng(33).standard_normal((10, 3)))
    with pytest.raises(ValueError, match="square"):
        calibrate_perplexity(good[:, :5], 2)
    skew = good.copy()
    skew[0, 1] += 1.0
    with pytest.raises(ValueError, match="symmetric"):
        calibrate_perplexity(skew, 2)
    dirty = good.copy()
    np.fill_diagonal(dirty, 0.5)
    with pytest.raises(ValueError, match="diagonal"):
        calibrate_perplexity(dirty, 2)
    negative = good.copy()
    negative[0, 1] = negative[1, 0] = -1.0
    with pytest.raises(ValueError, match="non-negative"):
        calibrate_perplexity(negative, 2)
    with pytest.raises(ValueError, match="perplexity"):
        calibrate_perplexity(good, 4)  # 10 <= 3*4


def test_joint_distribution_properties():
    from maskscope.embedding import _joint_probabilities

    rng = np.random.default_rng(34)
    X = rng.standard_normal((20, 4))
    P = _joint_probabilities(calibrate_perplexity(squared_distances(X), 5))
    assert (P >= 0).all()
    np.testing.assert_allclose(P, P.T, atol=1e-15)
    assert abs(P.sum() - 1.0) < 1e-9


def test_tsne_two_points():
    result = tsne_embed(np.array([[0.0, 0.0], [1.0, 0.0]]), TsneParams(0.5, 50, seed=1))
    assert result.coords.shape == (2, 2)
    assert np.isfinite(result.coords).all()
    assert not np.array_equal(result.coords[0], result.coords[1])
    assert all(np.isfinite(kl) for _, kl in result.kl_trace)


def test_tsne_separates_planted_clusters():
    rng = np.random.default_rng(35)
    a = rng.standard_normal((25, 50))
    b = rng.standard_normal((25, 50))
    b[:, 0] += 10.0  # 10 sigma apart
    X = np.vstack([a, b])
    labels = np.array([0] * 25 + [1] * 25)
    result = tsne_embed(X, TsneParams(perplexity=10, iterations=500, seed=2))
    assert silhouette_score(result.coords, labels) > 0.5


def test_tsne_kl_decreases():
    rng = np.random.default_rng(36)
    X = rng.standard_normal((40, 10))
    # Needs room past the exaggeration window for the plain objective to drop.
    result = tsne_embed(X, TsneParams(perplexity=8, iterations=600, seed=3))
    iterations = [it for it, _ in result.kl_trace]
    assert iterations[0] == 0 and iterations[-1] == 600
    assert result.kl_trace[-1][1] < result.kl_trace[0][1]
    assert all(kl >= 0 for _, kl in result.kl_trace)


def test_tsne_seed_reproducibility_is_bitwise():
    rng = np.random.default_rng(37)
    X = rng.standard_normal((30, 6))
    first = tsne_embed(X, TsneParams(perplexity=5, iterations=120, seed=9))
    second = tsne_embed(X, TsneParams(perplexity=5, iterations=120, seed=9))
    assert np.array_equal(first.coords, second.coords)
    assert first.kl_trace == second.kl_trace
    other = tsne_embed(X, TsneParams(perplexity=5, iterations=120, seed=10))
    assert not np.array_equal(first.coords, other.coords)


def test_tsne_keeps_duplicates_together():
    rng = np.random.default_rng(38)
    X = rng.standard_normal((30, 10))
    X[1] = X[0]
    coords = tsne_embed(X, TsneParams(perplexity=5, iterations=1000, seed=4)).coords
    d2 = squared_distances(coords.astype(np.float64))
    pair = d2[0, 1]
    median = np.median(d2[np.triu_indices(30, k=1)])
    assert pair < median


def test_tsne_rejects_oversized_perplexity():
    X = np.random.default_rng(39).standard_normal((9, 3))
    with pytest.raises(ValueError, match="perplexity"):
        tsne_embed(X, TsneParams(perplexity=3, iterations=10))


def test_tsne_numeric_blowup_is_reported():
    X = np.random.default_rng(40).standard_normal((20, 5))
    with np.errstate(all="ignore"):
        with pytest.raises(NumericError, match="non-finite"):
            tsne_embed(X, TsneParams(perplexity=4, iterations=30, learning_rate=1e300))


def test_params_validation():
    for bad in (
        TsneParams(perplexity=0),
        TsneParams(learning_rate=0),
        TsneParams(early_exaggeration=0),
        TsneParams(iterations=0),
        TsneParams(seed=-1),
    ):
        with pytest.raises(ValueError):
            bad.validate()


def test_build_descriptors_validation():
    with pytest.raises(ValueError, match="align"):
        build_descriptors(["a"], [])
    with pytest.raises(ValueError, match="disagree"):
        build_descriptors(["a", "b"], [np.zeros((2, 2)), np.zeros((3, 3))])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        build_descriptors(["a", "b"], [np.full((2, 2), 2.0), np.zeros((2, 2))])


def test_embed_masks_equals_manual_composition(tmp_path):
    manifest = load_manifest(synthdata.make_dataset(tmp_path, n_per_class=4))
    params = TsneParams(perplexity=2, iterations=60, seed=5)
    via_masks = embed_masks(manifest, "alpha", params)

    ids = [e.id for e in manifest.entries]
    masks = [mask_pipeline(e, "alpha", 0.5)[0].values for e in manifest.entries]
    manual = embed_descriptors(build_descriptors(ids, masks), params)
    np.testing.assert_array_equal(via_masks.coords, manual.coords)
    assert via_masks.kl_trace == manual.kl_trace
