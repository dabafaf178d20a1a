"""Learned blocks: graph-conv point backbone, depth-image encoder, two
attention layers (cross-cloud interaction, then image fusion), keypoint mask
prediction, and the pairwise correspondence-search heads.

Blocks are plain functions over ``Value`` tensors; parameters live in a
``ModelParams`` dict so every block stays checkpointable and grad-checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Value, concat, repeat_rows
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import knn
from .projection import DepthImageStack


@dataclass(frozen=True)
class NetworkConfig:
    feature_dim: int = 64        # C, width of all per-point feature maps
    attn_dim: int = 64           # C_t, attention projection width
    edge_widths: tuple = (32, 32, 64)
    k_nn: int = 16
    views: int = 4
    resolution: int = 32
    conv_channels: tuple = (8, 16)


@dataclass
class ModelParams:
    config: NetworkConfig
    tensors: dict = field(default_factory=dict)

    def trainable(self) -> dict:
        return self.tensors

    def zero_grad(self) -> None:
        for v in self.tensors.values():
            v.zero_grad()

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self.tensors.items()})

    def load(self, path) -> None:
        loaded = load_checkpoint(path)
        for k, v in self.tensors.items():
            if k not in loaded:
                raise KeyError(f"checkpoint missing tensor {k!r}")
            if loaded[k].shape != v.data.shape:
                raise ValueError(f"checkpoint tensor {k!r} has shape {loaded[k].shape}, "
                                 f"expected {v.data.shape}")
            v.data = loaded[k]


def _mlp_params(rng, prefix: str, dims: tuple) -> dict:
    out = {}
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        scale = math.sqrt(2.0 / din)
        out[f"{prefix}.w{i}"] = Value(rng.normal(0.0, scale, size=(din, dout)), requires_grad=True)
        out[f"{prefix}.b{i}"] = Value(np.zeros(dout), requires_grad=True)
    return out


def init_params(config: NetworkConfig = NetworkConfig(), seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    C, Ct = config.feature_dim, config.attn_dim
    ch1, ch2 = config.conv_channels
    t = {}
    d_in = 3
    for l, w in enumerate(config.edge_widths, start=1):
        t.update(_mlp_params(rng, f"edge{l}", (2 * d_in, w, w)))
        d_in = w
    t.update(_mlp_params(rng, "edge_fuse", (sum(config.edge_widths), C)))
    t.update(_mlp_params(rng, "img_conv1", (9, ch1)))
    t.update(_mlp_params(rng, "img_conv2", (9 * ch1, ch2)))
    t.update(_mlp_params(rng, "img_fc", (ch2, C)))
    for name in ("interact", "fuse"):
        t.update(_mlp_params(rng, f"{name}.q", (C, Ct)))
        # key projection carries no bias: softmax cancels a constant key shift
        scale = math.sqrt(2.0 / C)
        t[f"{name}.k.w1"] = Value(rng.normal(0.0, scale, size=(C, Ct)), requires_grad=True)
        t.update(_mlp_params(rng, f"{name}.v", (C, Ct)))
        t.update(_mlp_params(rng, f"{name}.out", (Ct, Ct, C)))
    t.update(_mlp_params(rng, "mask", (3 * C + 3, C, 1)))
    # Matcher heads start as distance kernels so the row-softmax carries
    # signal from the first optimizer step instead of being uniform noise:
    # coord logits ~ -delta * |p_i - p_j| (the descriptor's last column is
    # that norm), feature logits ~ -gamma * sum_c |f_ic - f_jc| built from
    # paired leaky-relu units (lrelu(x) + lrelu(-x) = 0.8 |x|).
    t.update(_mlp_params(rng, "corr_coord", (10, 32, 1)))
    t["corr_coord.w1"].data *= 0.05
    t["corr_coord.w2"].data *= 0.05
    t["corr_coord.w1"].data[9, 0] = 1.0
    t["corr_coord.w2"].data[0, 0] = -4.0
    t.update(_mlp_params(rng, "corr_feat", (3 * C, 2 * C, 1)))
    t["corr_feat.w1"].data *= 0.05
    t["corr_feat.w2"].data *= 0.05
    gamma = 2.4 / math.sqrt(C)
    for c in range(C):
        t["corr_feat.w1"].data[2 * C + c, 2 * c] = 1.0
        t["corr_feat.w1"].data[2 * C + c, 2 * c + 1] = -1.0
        t["corr_feat.w2"].data[2 * c, 0] = -gamma / 0.8
        t["corr_feat.w2"].data[2 * c + 1, 0] = -gamma / 0.8
    t.update(_mlp_params(rng, "corr_score", (4, 16, 1)))
    t.update(_mlp_params(rng, "pose_reg", (2 * C, 64, 6)))
    return ModelParams(config=config, tensors=t)


def _linear(x: Value, params: ModelParams, prefix: str, i: int) -> Value:
    return x @ params.tensors[f"{prefix}.w{i}"] + params.tensors[f"{prefix}.b{i}"]


def _mlp2(x: Value, params: ModelParams, prefix: str) -> Value:
    """Two-layer MLP, LeakyReLU between, linear output."""
    return _linear(_linear(x, params, prefix, 1).leaky_relu(), params, prefix, 2)


# -- point backbone -----------------------------------------------------


def edgeconv_backbone(points: np.ndarray, params: ModelParams) -> Value:
    """Stacked graph convolutions with per-layer kNN graph rebuilding.

    Each layer forms per-edge inputs [f_i, f_j - f_i] over the current
    feature-space kNN graph, runs a shared two-layer MLP, and max-pools over
    the k neighbors.  Layer outputs are concatenated and fused down to C.
    """
    cfg = params.config
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if cfg.k_nn >= n:
        raise ValueError(f"edgeconv_backbone: k_nn={cfg.k_nn} must be < N={n}")
    rows = np.repeat(np.arange(n), cfg.k_nn)
    feat = Value(points)
    layer_outs = []
    for l in range(1, len(cfg.edge_widths) + 1):
        nbr = knn(feat.data, cfg.k_nn)
        f_i = feat.gather_rows(rows)
        f_j = feat.gather_rows(nbr.reshape(-1))
        edge = concat([f_i, f_j - f_i], axis=1)
        h = _linear(edge, params, f"edge{l}", 1).leaky_relu()
        h = _linear(h, params, f"edge{l}", 2).leaky_relu()
        feat = h.reshape(n, cfg.k_nn, cfg.edge_widths[l - 1]).max(axis=1)
        layer_outs.append(feat)
    fused = concat(layer_outs, axis=1)
    return _linear(fused, params, "edge_fuse", 1).leaky_relu()


# -- image encoder ------------------------------------------------------


def _conv_indices(v_count: int, h: int, w: int) -> tuple:
    """im2col row indices for a 3x3 stride-2 valid convolution."""
    ho, wo = (h - 3) // 2 + 1, (w - 3) // 2 + 1
    vv, yy, xx, ky, kx = np.meshgrid(np.arange(v_count), np.arange(ho), np.arange(wo),
                                     np.arange(3), np.arange(3), indexing="ij")
    flat = vv * h * w + (2 * yy + ky) * w + (2 * xx + kx)
    return flat.reshape(-1), ho, wo


def image_embedding(stack: DepthImageStack, params: ModelParams) -> Value:
    """Shared CNN per view, max-aggregated across views into one C-vector."""
    cfg = params.config
    v_count, r = stack.views.shape[0], stack.views.shape[1]
    ch1, ch2 = cfg.conv_channels
    x = Value(stack.views.reshape(-1, 1))
    idx, h1, w1 = _conv_indices(v_count, r, r)
    patches = x.gather_rows(idx).reshape(v_count * h1 * w1, 9)
    c1 = _linear(patches, params, "img_conv1", 1).leaky_relu()
    idx2, h2, w2 = _conv_indices(v_count, h1, w1)
    patches2 = c1.gather_rows(idx2).reshape(v_count * h2 * w2, 9 * ch1)
    c2 = _linear(patches2, params, "img_conv2", 1).leaky_relu()
    pooled = c2.reshape(v_count, h2 * w2, ch2).mean(axis=1)
    per_view = _linear(pooled, params, "img_fc", 1)
    return per_view.max(axis=0)


def image_encoder(stack: DepthImageStack, n_points: int, params: ModelParams) -> Value:
    """Aggregated view embedding repeated into an N x C feature map."""
    return repeat_rows(image_embedding(stack, params), n_points)


# -- attention layers ---------------------------------------------------


def _attention(query_feats: Value, kv_feats: Value, params: ModelParams, prefix: str) -> Value:
    """Single-head residual cross-attention: q + MLP(softmax(QK^T/sqrt(Ct)) V)."""
    ct = params.config.attn_dim
    q = _linear(query_feats, params, f"{prefix}.q", 1)
    k = kv_feats @ params.tensors[f"{prefix}.k.w1"]
    v = _linear(kv_feats, params, f"{prefix}.v", 1)
    attn = ((q @ k.T) / math.sqrt(ct)).softmax(axis=1)
    return query_feats + _mlp2(attn @ v, params, f"{prefix}.out")


def transformer_interact(f_x: Value, f_y: Value, params: ModelParams) -> tuple:
    """Cross-cloud information interaction (first attention layer)."""
    return _attention(f_x, f_y, params, "interact"), _attention(f_y, f_x, params, "interact")


def transformer_fuse(phi: Value, f_img: Value, params: ModelParams) -> Value:
    """Fuse point features with the (repeated) image feature (second layer)."""
    if phi.shape[0] != f_img.shape[0]:
        raise ValueError(f"transformer_fuse: row counts differ ({phi.shape[0]} vs {f_img.shape[0]})")
    return _attention(phi, f_img, params, "fuse")


# -- keypoint selection -------------------------------------------------


@dataclass(frozen=True)
class KeypointMask:
    mask: np.ndarray            # N binary flags
    k: int
    selected_indices: np.ndarray  # K indices, ascending


@dataclass
class MaskPrediction:
    keypoints: KeypointMask
    scores: Value               # (N,) soft significance scores in (0, 1)
    selected_scores: Value      # (K,) scores of the selected points
    selected_coords: np.ndarray  # (K, 3)
    selected_features: Value    # (K, C)


def mask_predict(f_self: Value, f_other: Value, coords_self: np.ndarray,
                 k: int, params: ModelParams) -> MaskPrediction:
    """Score each point's matching significance and hard-select the top k.

    The pointwise input is [pooled(self), pooled(other), own feature, own
    coordinates]; selection is hard top-k (ties to the lower index) while
    the soft scores stay in the graph for the mask loss.
    """
    n = f_self.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"mask_predict: k={k} out of range [1, {n}]")
    pooled_self = repeat_rows(f_self.max(axis=0), n)
    pooled_other = repeat_rows(f_other.max(axis=0), n)
    inp = concat([pooled_self, pooled_other, f_self, Value(coords_self)], axis=1)
    scores = _mlp2(inp, params, "mask").sigmoid().reshape(n)
    order = np.argsort(-scores.data, kind="stable")
    selected = np.sort(order[:k])
    mask = np.zeros(n, dtype=np.int64)
    mask[selected] = 1
    return MaskPrediction(
        keypoints=KeypointMask(mask=mask, k=k, selected_indices=selected),
        scores=scores,
        selected_scores=scores.gather_rows(selected),
        selected_coords=np.asarray(coords_self, dtype=np.float64)[selected],
        selected_features=f_self.gather_rows(selected),
    )


# -- correspondence search ----------------------------------------------


@dataclass
class MatchResult:
    matrix: Value          # (K, K) row-stochastic final matching matrix
    coord_matrix: Value    # (K, K) coordinate matching logits
    feature_matrix: Value  # (K, K) feature matching logits
    scores: Value          # (K,) matching scores in (0, 1)
    weights: np.ndarray    # (K,) correspondence weights, sum 1


def correspondence_search(coords_x: np.ndarray, coords_y: np.ndarray,
                          f_x: Value, f_y: Value, params: ModelParams) -> MatchResult:
    """Pairwise coordinate and feature matching heads plus per-point scores.

    Every (i, j) pair gets a coordinate descriptor [p_i, p_j, p_i - p_j,
    |p_i - p_j|] and a feature descriptor [f_i, f_j, f_i - f_j], each
    compressed to a scalar by a shared MLP; the summed logits are
    row-softmaxed into the final matching matrix.
    """
    kx, ky = len(coords_x), len(coords_y)
    if kx < 3 or ky < 3:
        raise ValueError("correspondence_search: need at least 3 keypoints per side")
    ii = np.repeat(np.arange(kx), ky)
    jj = np.tile(np.arange(ky), kx)
    pi = np.asarray(coords_x, dtype=np.float64)[ii]
    pj = np.asarray(coords_y, dtype=np.float64)[jj]
    diff = pi - pj
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    coord_desc = Value(np.concatenate([pi, pj, diff, dist], axis=1))
    m_p = _mlp2(coord_desc, params, "corr_coord").reshape(kx, ky)
    fi = f_x.gather_rows(ii)
    fj = f_y.gather_rows(jj)
    feat_desc = concat([fi, fj, fi - fj], axis=1)
    m_f = _mlp2(feat_desc, params, "corr_feat").reshape(kx, ky)
    logits = m_p + m_f
    matrix = logits.softmax(axis=1)
    row_max = logits.max(axis=1).reshape(kx, 1)
    row_mean = logits.mean(axis=1).reshape(kx, 1)
    feat_mean = f_x.mean(axis=1).reshape(kx, 1)
    feat_max = f_x.max(axis=1).reshape(kx, 1)
    score_in = concat([row_max, row_mean, feat_mean, feat_max], axis=1)
    scores = _mlp2(score_in, params, "corr_score").sigmoid().reshape(kx)
    weights = correspondence_weights(scores.data)
    return MatchResult(matrix=matrix, coord_matrix=m_p, feature_matrix=m_f,
                       scores=scores, weights=weights)


def correspondence_weights(scores: np.ndarray) -> np.ndarray:
    """Keep scores at or above the median, renormalized to sum 1.

    Median of K values is the ceil(K/2)-th smallest.
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = len(scores)
    median = np.sort(scores, kind="stable")[int(math.ceil(k / 2)) - 1]
    kept = scores * (scores >= median)
    return kept / kept.sum()


def soft_correspondences(matrix: np.ndarray, target_coords: np.ndarray) -> np.ndarray:
    """Convex-combination matches x'_i = sum_j M(i,j) y_j."""
    return np.asarray(matrix, dtype=np.float64) @ np.asarray(target_coords, dtype=np.float64)


def hard_correspondences(matrix: np.ndarray, target_coords: np.ndarray) -> np.ndarray:
    """Argmax matches (inference-time alternative to the soft rule)."""
    return np.asarray(target_coords, dtype=np.float64)[np.argmax(matrix, axis=1)]


def pose_regression(f_x: Value, f_y: Value, params: ModelParams) -> Value:
    """Direct 6-DoF regression head (ablation stand-in): pooled feats -> (6,).

    First three outputs are Euler angles in degrees, last three translation.
    """
    pooled = concat([f_x.max(axis=0).reshape(1, -1), f_y.max(axis=0).reshape(1, -1)], axis=1)
    return _mlp2(pooled, params, "pose_reg").reshape(6)
