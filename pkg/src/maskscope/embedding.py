"""Mask clustering: PCA to 50 features, then exact t-SNE to 2-D.

The flattened weighted masks act as image descriptors. PCA runs as an
eigendecomposition of the sample covariance with a deterministic sign
convention, so repeated runs agree bit-for-bit. t-SNE is the exact
O(N^2) formulation: per-point Gaussian bandwidths found by binary
search on the entropy target, a Student-t low-dimensional kernel with
one degree of freedom, and momentum gradient descent with per-coordinate
adaptive gains and an early-exaggeration phase. Everything downstream of
the seed is deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradcam
from .tensor_io import DatasetManifest

logger = logging.getLogger(__name__)

# Optimizer schedule: exaggeration and the low momentum apply to the
# first EXAGGERATION_ITERS iterations, then both switch off.
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
KL_TRACE_EVERY = 10
ENTROPY_TOLERANCE = 1e-5
MAX_BISECTION_STEPS = 50
P_FLOOR = 1e-12


class NumericError(Exception):
    """Optimization produced a non-finite objective or coordinates."""


@dataclass
class TsneParams:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    seed: int = 0

    def validate(self) -> None:
        if self.perplexity <= 0 or self.learning_rate <= 0 or self.early_exaggeration <= 0:
            raise ValueError("perplexity, learning_rate, early_exaggeration must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass
class DescriptorMatrix:
    """Flattened masks, one row per image in manifest order."""

    ids: list[str]
    values: np.ndarray


@dataclass
class EmbeddingResult:
    coords: np.ndarray
    kl_trace: list[tuple[int, float]] = field(default_factory=list)
    params: TsneParams = field(default_factory=TsneParams)


def build_descriptors(ids: list[str], masks: list[np.ndarray]) -> DescriptorMatrix:
    if len(ids) != len(masks):
        raise ValueError("ids and masks must align")
    if not masks:
        return DescriptorMatrix(ids=[], values=np.zeros((0, 0), dtype=np.float32))
    shape = masks[0].shape
    for mask in masks:
        if mask.shape != shape:
            raise ValueError(f"mask shapes disagree: {mask.shape} vs {shape}")
    values = np.stack([np.asarray(m, dtype=np.float32).ravel() for m in masks])
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("descriptor values must lie in [0, 1]")
    return DescriptorMatrix(ids=list(ids), values=values)


def pca_reduce(
    X: np.ndarray, n_components: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top principal components of their covariance.

    Returns (scores, explained variance ratios). Components are ordered
    by descending eigenvalue and sign-fixed so each component's largest-
    magnitude entry is positive. ``n_components`` is clamped to
    min(N-1, D) with a logged warning when it exceeds that bound.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got rank {X.ndim}")
    n, d = X.shape
    if n < 2:
        raise ValueError(f"PCA needs at least 2 rows, got {n}")
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    limit = min(n - 1, d)
    if n_components > limit:
        logger.warning(
            "clamping n_components from %d to %d (N=%d, D=%d)", n_components, limit, n, d
        )
        n_components = limit

    centered = X - X.mean(axis=0)
    if d <= n:
        covariance = (centered.T @ centered) / (n - 1)
        eigenvalues, eigenvectors = np.linalg.eigh(covariance)
        order = np.argsort(eigenvalues)[::-1]
        eigenvalues = np.clip(eigenvalues[order], 0.0, None)
        components = eigenvectors[:, order[:n_components]].copy()
    else:
        # Wide data: the DxD covariance may not even fit in memory, but its
        # nonzero spectrum equals that of the NxN Gram matrix, and each
        # covariance eigenvector is the centered data's projection of the
        # matching Gram eigenvector.
        gram = (centered @ centered.T) / (n - 1)
        eigenvalues, dual = np.linalg.eigh(gram)
        order = np.argsort(eigenvalues)[::-1]
        eigenvalues = np.clip(eigenvalues[order], 0.0, None)
        kept = eigenvalues[:n_components]
        # a zero eigenvalue has no recoverable direction; its scores are zero
        dead = kept <= kept.max(initial=0.0) * 1e-12
        norms = np.sqrt(kept * (n - 1))
        components = (centered.T @ dual[:, order[:n_components]]) / np.where(dead, 1.0, norms)
        components[:, dead] = 0.0

    for j in range(components.shape[1]):
        peak = np.argmax(np.abs(components[:, j]))
        if components[peak, j] < 0:
            components[:, j] = -components[:, j]

    scores = centered @ components
    # trace of the covariance, identical under both factorizations
    total = float((centered * centered).sum()) / (n - 1)
    ratios = eigenvalues[:n_components] / total if total > 0 else np.zeros(n_components)
    return scores, ratios


def squared_distances(X: np.ndarray) -> np.ndarray:
    """Symmetric pairwise squared euclidean distances with a zero diagonal."""
    X = np.asarray(X, dtype=np.float64)
    gram = X @ X.T
    norms = np.diag(gram)
    d2 = norms[:, None] + norms[None, :] - 2.0 * gram
    d2 = np.maximum((d2 + d2.T) / 2.0, 0.0)
    np.fill_diagonal(d2, 0.0)
    return d2


def _row_entropy_bits(beta: float, d2_row: np.ndarray) -> tuple[float, np.ndarray]:
    # Entropy in bits of the conditional distribution for one row, plus
    # the normalized row itself. Shifted by the max logit for stability:
    # H = ln(sum exp(shifted)) + shift + beta * E[d2], in nats.
    logits = -beta * d2_row
    shift = logits.max()
    p = np.exp(logits - shift)
    total = p.sum()
    if total <= 0.0:
        return 0.0, p
    p /= total
    mean_sq = float(np.dot(p, d2_row))
    entropy_nats = np.log(total) + shift + beta * mean_sq
    return entropy_nats / np.log(2.0), p


def calibrate_perplexity(d2: np.ndarray, perplexity: float) -> np.ndarray:
    """Per-row Gaussian bandwidth search; returns the conditional P matrix.

    Each row's precision is bisected (expanding bounds first) until the
    row entropy in bits matches log2(perplexity) within 1e-5, capped at
    50 steps. Rows sum to 1 and the diagonal is zero.
    """
    d2 = np.asarray(d2, dtype=np.float64)
    n = d2.shape[0]
    if d2.ndim != 2 or d2.shape[1] != n:
        raise ValueError("distance matrix must be square")
    if n <= perplexity * 3:
        raise ValueError(
            f"need more than 3*perplexity points, got N={n}, perplexity={perplexity}"
        )
    if not np.allclose(d2, d2.T, atol=1e-8):
        raise ValueError("distance matrix must be symmetric")
    if np.abs(np.diag(d2)).max(initial=0.0) != 0.0:
        raise ValueError("distance matrix diagonal must be zero")
    if d2.min() < 0.0:
        raise ValueError("distances must be non-negative")

    target = np.log2(perplexity)
    off_diag = ~np.eye(n, dtype=bool)
    P = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        row = d2[i][off_diag[i]]
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        entropy, p = _row_entropy_bits(beta, row)
        for _ in range(MAX_BISECTION_STEPS):
            diff = entropy - target
            if abs(diff) <= ENTROPY_TOLERANCE:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
            entropy, p = _row_entropy_bits(beta, row)
        P[i][off_diag[i]] = p
    return P


def _joint_probabilities(conditional: np.ndarray) -> np.ndarray:
    n = conditional.shape[0]
    joint = (conditional + conditional.T) / (2.0 * n)
    joint = np.maximum(joint, P_FLOOR)
    np.fill_diagonal(joint, 0.0)
    return joint


def _kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_embed(scores: np.ndarray, params: TsneParams) -> EmbeddingResult:
    """Exact t-SNE of the given score matrix down to 2-D.

    The KL divergence against the un-exaggerated joint distribution is
    recorded at iteration 0 and every 10 iterations after; a non-finite
    objective aborts with a diagnostic.
    """
    params.validate()
    X = np.asarray(scores, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"t-SNE needs at least 2 points, got {n}")
    if params.perplexity * 3 >= n:
        raise ValueError(
            f"perplexity must be below N/3, got perplexity={params.perplexity}, N={n}"
        )

    conditional = calibrate_perplexity(squared_distances(X), params.perplexity)
    P = _joint_probabilities(conditional)

    rng = np.random.default_rng(params.seed)
    Y = rng.standard_normal((n, 2)) * 1e-4
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace: list[tuple[int, float]] = []

    def low_dim_kernel(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d2 = squared_distances(coords)
        num = 1.0 / (1.0 + d2)
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), P_FLOOR)
        return num, Q

    def record(iteration: int, Q: np.ndarray) -> None:
        kl = _kl_divergence(P, Q)
        if not np.isfinite(kl):
            raise NumericError(
                f"KL divergence became non-finite at iteration {iteration} "
                f"(seed {params.seed}, perplexity {params.perplexity})"
            )
        trace.append((iteration, kl))

    _, Q = low_dim_kernel(Y)
    record(0, Q)

    for i in range(params.iterations):
        exaggerating = i < EXAGGERATION_ITERS
        P_eff = P * params.early_exaggeration if exaggerating else P
        momentum = MOMENTUM_EARLY if exaggerating else MOMENTUM_LATE

        num, Q = low_dim_kernel(Y)
        weighted = (P_eff - Q) * num
        gradient = 4.0 * (weighted.sum(axis=1)[:, None] * Y - weighted @ Y)

        # Per-coordinate gains: grow where the gradient keeps opposing the
        # running update, shrink where it agrees. Floor keeps them alive.
        agree = np.sign(gradient) == np.sign(update)
        gains = np.where(agree, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - params.learning_rate * gains * gradient
        Y = Y + update
        Y = Y - Y.mean(axis=0)

        iteration = i + 1
        if iteration % KL_TRACE_EVERY == 0 or iteration == params.iterations:
            _, Q_now = low_dim_kernel(Y)
            record(iteration, Q_now)

    if not np.isfinite(Y).all():
        raise NumericError(f"embedding coordinates became non-finite (seed {params.seed})")
    return EmbeddingResult(coords=Y.astype(np.float32), kl_trace=trace, params=params)


def embed_descriptors(
    descriptors: DescriptorMatrix, params: TsneParams, n_components: int = 50
) -> EmbeddingResult:
    scores, _ = pca_reduce(descriptors.values, n_components)
    return tsne_embed(scores, params)


def embed_masks(
    manifest: DatasetManifest, model: str, params: TsneParams
) -> EmbeddingResult:
    """Compute conv-resolution masks for ``model`` and embed them.

    Row order matches the manifest entry order.
    """
    ids = [entry.id for entry in manifest.entries]
    masks = []
    for entry in manifest.entries:
        conv_mask, _, _ = gradcam.mask_pipeline(entry, model, threshold=0.5)
        masks.append(conv_mask.values)
    return embed_descriptors(build_descriptors(ids, masks), params)
