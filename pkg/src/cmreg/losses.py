"""Training objectives: overlap contrastive, cross-modal contrastive, mask
prediction, matching score, and correspondence-search losses, plus their
unweighted sum over registration iterations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Value, concat
from .geometry import OverlapMasks, RigidTransform, apply_transform

EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    sigma_p: float = 0.1       # positive-pair margin (feature distance)
    sigma_n: float = 1.4       # negative-pair margin
    tau: float = 0.07          # contrastive temperature
    dist_threshold: float = 0.05   # correspondence label threshold (model units)
    overlap_threshold: float = 0.05
    include_pos_in_denominator: bool = False

    def __post_init__(self):
        if not 0 < self.sigma_p < self.sigma_n:
            raise ValueError("need 0 < sigma_p < sigma_n")
        if self.tau <= 0 or self.dist_threshold <= 0 or self.overlap_threshold <= 0:
            raise ValueError("tau and thresholds must be positive")


@dataclass(frozen=True)
class SupervisionLabels:
    s_hat: np.ndarray   # K binary matching-score labels
    y_hat: np.ndarray   # K binary correspondence labels
    j_star: np.ndarray  # K indices of the closest target keypoint under gt


def _pair_distances(f_a: Value, f_b: Value, idx_a: np.ndarray, idx_b: np.ndarray) -> Value:
    """Row-wise Euclidean feature distances for the given index pairs."""
    return (f_a.gather_rows(idx_a) - f_b.gather_rows(idx_b)).l2norm(axis=1)


def _hinge_sq_mean(d: Value) -> Value:
    r = d.relu()
    return (r * r).mean()


def ocl_loss(f_x: Value, f_y: Value, source: np.ndarray, target: np.ndarray,
             gt: RigidTransform, masks: OverlapMasks, cfg: LossConfig) -> Value:
    """Pull overlapping cross-cloud feature pairs inside sigma_p, push
    overlap/non-overlap pairs beyond sigma_n (squared hinge on both).

    Positives pair each overlapping source point with its nearest overlapping
    target point under the ground-truth transform.
    """
    if f_x.shape[0] != len(masks.source_overlap) or f_y.shape[0] != len(masks.target_overlap):
        raise ValueError("feature row counts do not match overlap masks")
    ox = np.flatnonzero(masks.source_overlap)
    oy = np.flatnonzero(masks.target_overlap)
    nx = np.flatnonzero(~masks.source_overlap)
    ny = np.flatnonzero(~masks.target_overlap)
    total = Value(0.0)
    if len(ox) and len(oy):
        moved = apply_transform(gt, np.asarray(source)[ox])
        d = np.linalg.norm(moved[:, None, :] - np.asarray(target)[oy][None, :, :], axis=2)
        partner = oy[d.argmin(axis=1)]
        d_pos = _pair_distances(f_x, f_y, ox, partner)
        total = total + _hinge_sq_mean(d_pos - cfg.sigma_p)
    else:
        warnings.warn("ocl_loss: no positive pairs, term omitted")
    if len(ox) and len(ny):
        ii = np.repeat(ox, len(ny))
        jj = np.tile(ny, len(ox))
        total = total + _hinge_sq_mean(cfg.sigma_n - _pair_distances(f_x, f_y, ii, jj))
    if len(oy) and len(nx):
        ii = np.repeat(oy, len(nx))
        jj = np.tile(nx, len(oy))
        total = total + _hinge_sq_mean(cfg.sigma_n - _pair_distances(f_y, f_x, ii, jj))
    return total


def _cosine_rows(a: Value, b: Value) -> Value:
    """Row-wise cosine similarity between two (B, C) values."""
    return (a * b).sum(axis=1) * _reciprocal(a.l2norm(axis=1) * b.l2norm(axis=1))


def _reciprocal(x: Value) -> Value:
    """1/x via exp(-log(x)); x must be positive."""
    return (-(x.log())).exp()


def cmcl_loss(p_bar: Value, p_img: Value, cfg: LossConfig) -> Value:
    """Symmetric batch contrastive loss tying point-cloud and image vectors.

    For each batch element b the positive is exp(cos(a_b, b_b)/tau); the
    denominator sums the negatives against all other batch elements of both
    modality streams (the positive itself is excluded unless configured in).
    """
    if p_bar.data.ndim != 2 or p_bar.shape != p_img.shape:
        raise ValueError(f"cmcl_loss: need matching (B, C) inputs, got {p_bar.shape} and {p_img.shape}")
    b_size = p_bar.shape[0]
    if b_size < 2:
        raise ValueError("cmcl_loss: batch size must be >= 2")

    def one_direction(anchors: Value, others: Value) -> Value:
        terms = []
        for b in range(b_size):
            anchor = anchors.gather_rows([b])
            rest = [k for k in range(b_size) if k != b]
            sim_pos = _cosine_rows(anchor, others.gather_rows([b])) / cfg.tau
            pos = sim_pos.exp()
            neg_same = _cosine_rows(anchors.gather_rows([b] * (b_size - 1)),
                                    anchors.gather_rows(rest)) / cfg.tau
            neg_cross = _cosine_rows(anchors.gather_rows([b] * (b_size - 1)),
                                     others.gather_rows(rest)) / cfg.tau
            neg = neg_same.exp().sum() + neg_cross.exp().sum()
            if cfg.include_pos_in_denominator:
                neg = neg + pos.sum()
            terms.append(-(pos.sum().log() - neg.log()))
        return terms

    all_terms = one_direction(p_bar, p_img) + one_direction(p_img, p_bar)
    total = all_terms[0]
    for t in all_terms[1:]:
        total = total + t
    return total / (2.0 * b_size)


def mp_loss(mask_scores: Value, matrix: Value) -> Value:
    """Mean squared gap between each score and its row's negative entropy.

    Confident (low-entropy) rows should carry high significance scores.
    """
    k = matrix.shape[0]
    row_sums = matrix.data.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        raise ValueError(f"mp_loss: matrix rows must sum to 1, got {row_sums}")
    neg_entropy = matrix.xlogx().sum(axis=1)
    gap = mask_scores.reshape(k) - neg_entropy
    return (gap * gap).mean()


def ms_loss(scores: Value, s_hat: np.ndarray) -> Value:
    """Mean binary cross-entropy of matching scores against distance labels."""
    s_hat = np.asarray(s_hat, dtype=np.float64).reshape(-1)
    k = len(s_hat)
    s = scores.reshape(k)
    pos = Value(s_hat) * s.clamped_log(EPS)
    neg = Value(1.0 - s_hat) * (1.0 - s).clamped_log(EPS)
    return -((pos + neg).mean())


def cs_loss(matrix: Value, y_hat: np.ndarray, j_star: np.ndarray) -> Value:
    """Gated negative log-likelihood of the ground-truth match per row."""
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    j_star = np.asarray(j_star, dtype=np.int64).reshape(-1)
    k = matrix.shape[0]
    flat = matrix.reshape(k * matrix.shape[1])
    picked = flat.gather_rows(np.arange(k) * matrix.shape[1] + j_star)
    return -((Value(y_hat) * picked.clamped_log(EPS)).mean())


def make_labels(selected_source: np.ndarray, selected_target: np.ndarray,
                gt: RigidTransform, dist_threshold: float) -> SupervisionLabels:
    """Distance-based supervision for the score and matching losses."""
    moved = apply_transform(gt, np.asarray(selected_source))
    d = np.linalg.norm(moved[:, None, :] - np.asarray(selected_target)[None, :, :], axis=2)
    j_star = d.argmin(axis=1)
    nearest = d[np.arange(len(moved)), j_star]
    labels = (nearest < dist_threshold).astype(np.float64)
    return SupervisionLabels(s_hat=labels, y_hat=labels.copy(), j_star=j_star)


def total_loss(l_ocl: Value, l_cmcl: Value, l_mp: Value,
               per_iteration: list) -> Value:
    """Unweighted sum: OCL + CMCL + MP + sum_n (MS_n + CS_n)."""
    total = l_ocl + l_cmcl + l_mp
    for l_ms_n, l_cs_n in per_iteration:
        total = total + l_ms_n + l_cs_n
    return total
