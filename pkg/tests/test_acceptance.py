"""Acceptance gate: one test per shipping requirement, one verdict line each.

Run directly (``python3 tests/test_acceptance.py``) for the plain verdict
listing, or through pytest where each test maps to one requirement.
"""

import csv
import hashlib
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

import synthdata
from test_embedding import pca_oracle, row_entropy_bits
from test_gradcam import brute_heatmap, brute_weights
from maskscope.embedding import (
    TsneParams,
    calibrate_perplexity,
    pca_reduce,
    squared_distances,
    tsne_embed,
)
from maskscope.gradcam import channel_weights, compute_heatmap, normalize_mask
from maskscope.modelcmp import average_residual, residual_matrix
from maskscope.objstats import class_pixel_ratios, count_pixels
from maskscope.pipeline import RunConfig, run


class verdict:
    """Prints exactly one pass/fail line for the named requirement."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def __exit__(self, exc_type, exc, tb):
        state = "PASS" if exc_type is None else "FAIL"
        print(f"[accept] {self.name}: {state}", flush=True)
        return False


def tree_digest(root):
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    manifest = synthdata.make_dataset(root / "data", n_per_class=60, seed=0)
    out = root / "out"
    start = time.perf_counter()
    run(RunConfig(manifest=manifest, out=out))
    return manifest, out, time.perf_counter() - start


def test_gradcam_matches_brute_force():
    with verdict("grad-cam ops vs brute-force oracles (200 tensors)") as v:
        rng = np.random.default_rng(1000)
        for _ in range(200):
            k = int(rng.integers(1, 7))
            h, w = (int(x) for x in rng.integers(1, 9, size=2))
            grads = rng.standard_normal((k, h, w)).astype(np.float32)
            acts = rng.standard_normal((k, h, w)).astype(np.float32)
            weights = channel_weights(grads)
            assert np.abs(weights - brute_weights(grads)).max() < 1e-6
            heatmap = compute_heatmap(acts, weights)
            assert np.abs(heatmap - brute_heatmap(acts, weights)).max() < 1e-6
            assert (heatmap >= 0.0).all()
            mask = normalize_mask(heatmap).values
            assert (mask >= 0.0).all() and (mask <= 1.0).all()
        assert v.elapsed < 10.0


def test_normalization_ignores_affine_rescaling():
    with verdict("mask normalization affine invariance (50 transforms)"):
        rng = np.random.default_rng(1001)
        for _ in range(50):
            X = rng.random((6, 7))
            a = float(rng.uniform(0.1, 50.0))
            b = float(rng.uniform(-20.0, 20.0))
            base = normalize_mask(X).values
            scaled = normalize_mask(a * X + b).values
            assert np.abs(scaled - base).max() < 1e-6


def subspace_angle(A, B):
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


def test_pca_agrees_with_covariance_eigendecomposition():
    with verdict("pca vs explicit covariance eigendecomposition (20 matrices)"):
        rng = np.random.default_rng(1002)
        for _ in range(20):
            n = int(rng.integers(4, 11))
            d = int(rng.integers(2, 9))
            k = min(3, n - 1, d)
            X = rng.standard_normal((n, d))
            scores, _ = pca_reduce(X, k)
            expected = pca_oracle(X, k)
            assert subspace_angle(scores, expected) < 1e-6


def test_tsne_calibration_separation_and_reproducibility():
    with verdict("t-sne calibration, planted clusters, kl descent, seeding") as v:
        rng = np.random.default_rng(1003)
        # (a) every row of the calibrated kernel hits the entropy target
        for perplexity in (4.0, 5.0, 6.0):
            d2 = squared_distances(rng.standard_normal((20, 8)))
            P = calibrate_perplexity(d2, perplexity)
            for row in P:
                assert abs(row_entropy_bits(row) - np.log2(perplexity)) < 1e-5
        # (b) two clusters ten noise-sigmas apart separate in 2-D
        direction = rng.standard_normal(50)
        direction /= np.linalg.norm(direction)
        X = rng.standard_normal((50, 50))
        labels = np.repeat([0, 1], 25)
        X[labels == 1] += 10.0 * direction
        params = TsneParams(perplexity=10.0, iterations=1000, seed=7)
        result = tsne_embed(X, params)
        assert silhouette_score(result.coords, labels) > 0.5
        # (c) the optimizer leaves the objective below its starting point
        assert result.kl_trace[-1][1] < result.kl_trace[0][1]
        noise = tsne_embed(rng.standard_normal((40, 10)), TsneParams(perplexity=8.0, iterations=1000, seed=2))
        assert noise.kl_trace[-1][1] < noise.kl_trace[0][1]
        # (d) a fixed seed reproduces coordinates bit for bit
        again = tsne_embed(X, params)
        assert np.array_equal(result.coords, again.coords)
        assert result.kl_trace == again.kl_trace
        assert v.elapsed < 60.0


def test_coverage_ratio_suite():
    with verdict("object coverage ratio: bounds, pooling, extremes, monotone"):
        rng = np.random.default_rng(1004)
        # pooled counts, not averaged per-image ratios
        counts = []
        for covered_n, total_n in [(10, 20), (0, 20)]:
            covered = np.zeros(3, dtype=np.int64)
            total = np.zeros(3, dtype=np.int64)
            covered[0], total[0] = covered_n, total_n
            counts.append((covered, total))
        pooled = class_pixel_ratios(counts, "c", num_objects=3)
        assert pooled.ratio[0] == 0.25
        # full and empty masks pin the ratio to the endpoints
        seg = rng.integers(0, 6, size=(9, 9)).astype(np.uint16)
        full = class_pixel_ratios(
            [count_pixels(seg, np.ones((9, 9), dtype=bool), num_objects=6)], "c", num_objects=6
        )
        assert (full.ratio[full.defined] == 1.0).all()
        empty = class_pixel_ratios(
            [count_pixels(seg, np.zeros((9, 9), dtype=bool), num_objects=6)], "c", num_objects=6
        )
        assert (empty.ratio[empty.defined] == 0.0).all()
        # bounds and monotonicity across 100 random mask pairs
        for _ in range(100):
            seg = rng.integers(0, 8, size=(10, 10)).astype(np.uint16)
            small = rng.random((10, 10)) < 0.3
            big = small | (rng.random((10, 10)) < 0.3)
            stats_small = class_pixel_ratios(
                [count_pixels(seg, small, num_objects=8)], "c", num_objects=8
            )
            stats_big = class_pixel_ratios(
                [count_pixels(seg, big, num_objects=8)], "c", num_objects=8
            )
            defined = stats_small.defined
            r_small = stats_small.ratio[defined]
            r_big = stats_big.ratio[defined]
            assert (r_small >= 0.0).all() and (r_small <= 1.0).all()
            assert (r_small <= r_big).all()


def test_average_residual_suite():
    with verdict("average residual: identity, extremes, symmetry, triangle"):
        rng = np.random.default_rng(1005)
        mask = rng.random((7, 7))
        assert average_residual(mask, mask) == 0.0
        assert average_residual(np.ones((5, 5)), np.zeros((5, 5))) == 1.0
        a = np.array([[0.2, 0.4], [0.6, 0.8]])
        b = np.array([[0.4, 0.4], [0.6, 0.6]])
        assert abs(average_residual(a, b) - 0.1) <= 1e-9
        for _ in range(50):
            x = rng.random((6, 6))
            y = rng.random((6, 6))
            z = rng.random((6, 6))
            assert average_residual(x, y) == average_residual(y, x)
            assert average_residual(x, z) <= average_residual(x, y) + average_residual(y, z) + 1e-9


def test_synthetic_dataset_recovers_planted_structure(end_to_end):
    with verdict("end-to-end: planted objects rank first, classes separate, models differ"):
        manifest, out, elapsed = end_to_end
        assert elapsed < 300.0
        # (i) each class's planted object has the top coverage ratio
        for model in ("alpha", "beta"):
            with open(out / "objstats" / f"{model}.csv", newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            for class_name, planted in synthdata.PLANTED_LABEL.items():
                ratios = {
                    int(r["object_id"]): float(r["R"])
                    for r in rows
                    if r["class"] == class_name
                }
                top = max(ratios, key=ratios.get)
                assert top == planted
                others = [v for p, v in ratios.items() if p != planted]
                assert all(v < ratios[planted] for v in others)
        # (ii) the 2-D embedding separates the two classes
        for model in ("alpha", "beta"):
            with open(out / "embedding" / f"{model}.csv", newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            coords = np.array([[float(r["x"]), float(r["y"])] for r in rows])
            labels = [r["class"] for r in rows]
            assert silhouette_score(coords, labels) > 0.3
        # (iii) two differently seeded models disagree more than a model with itself
        with open(out / "ar" / "residuals.csv", newline="", encoding="utf-8") as fh:
            matrix_rows = list(csv.reader(fh))
        assert matrix_rows[0] == ["model", "alpha", "beta"]
        alpha_row = [float(v) for v in matrix_rows[1][1:]]
        beta_row = [float(v) for v in matrix_rows[2][1:]]
        assert alpha_row[0] == 0.0 and beta_row[1] == 0.0
        assert alpha_row[1] > 0.0
        assert alpha_row[1] == beta_row[0]


def test_identical_config_reproduces_output_tree(end_to_end):
    with verdict("same config twice: byte-identical output trees"):
        manifest, out, _ = end_to_end
        first = tree_digest(out)
        # in place: every stage is a cache hit and no file changes
        run(RunConfig(manifest=manifest, out=out))
        assert tree_digest(out) == first
        # from scratch: a fresh directory reproduces every byte
        fresh = out.parent / "out_again"
        run(RunConfig(manifest=manifest, out=fresh))
        assert tree_digest(fresh) == first


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-s"])
    sys.exit(code)
