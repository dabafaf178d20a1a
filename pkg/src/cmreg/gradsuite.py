"""Finite-difference verification of every loss and network block.

Each entry builds a deterministic scalar function of a set of leaf Values
(parameters or features) and compares analytic gradients against central
differences.  Seeds are fixed so the randomized inputs stay away from
kink/tie points of max-pooling and LeakyReLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as losses_mod
from . import network as net
from .autodiff import Value, grad_check
from .data import make_sample, synth_shape
from .geometry import overlap_select
from .losses import LossConfig
from .network import NetworkConfig, init_params
from .projection import render_views

SUITE_N = 32
SUITE_C = 16
SUITE_K = 16
SUITE_BATCH = 3


def _suite_config() -> NetworkConfig:
    return NetworkConfig(feature_dim=SUITE_C, attn_dim=SUITE_C,
                         edge_widths=(8, 8, 16), k_nn=4, views=2, resolution=8,
                         conv_channels=(3, 4))


def _params_subset(params, prefixes):
    return {k: v for k, v in params.tensors.items()
            if any(k.startswith(p) for p in prefixes)}


def _leaky(x):
    return np.where(x > 0.0, x, 0.2 * x)


def _nudge_unit_biases(params, name, inputs, margin=3e-4):
    """Shift one hidden-layer bias vector so no pre-activation sits within
    ``margin`` of the LeakyReLU kink, where central differences are invalid.

    Returns the post-activation output of the layer for downstream probes.
    """
    w1 = params.tensors[f"{name}.w1"].data
    b1 = params.tensors[f"{name}.b1"].data
    pre = inputs @ w1 + b1
    for u in range(pre.shape[1]):
        col = pre[:, u]
        if np.abs(col).min() >= margin:
            continue
        for step in range(1, 1000):
            delta = step * 2.0 * margin
            shifted = next((s for s in (delta, -delta)
                            if np.abs(col + s).min() >= margin), None)
            if shifted is not None:
                b1[u] += shifted
                pre[:, u] = col + shifted
                break
        else:
            raise RuntimeError(f"could not clear kinks in {name}.b1[{u}]")
    return _leaky(pre)


def _shift_biases_off_kinks(params, coords_x, coords_y, fx, fy):
    """Move the matcher heads' hidden pre-activations away from kink points.

    The suite contract excludes measure-zero kink/tie points by construction;
    with ~250k pre-activations in the pairwise heads, the smallest one lands
    near zero for almost every seed, so we nudge biases instead of reseeding.
    """
    def head_out(name, desc):
        hidden = _nudge_unit_biases(params, name, desc)
        return hidden @ params.tensors[f"{name}.w2"].data + params.tensors[f"{name}.b2"].data

    kx, ky = len(coords_x), len(coords_y)
    ii = np.repeat(np.arange(kx), ky)
    jj = np.tile(np.arange(ky), kx)
    pi, pj = coords_x[ii], coords_y[jj]
    diff = pi - pj
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    m_p = head_out("corr_coord", np.concatenate([pi, pj, diff, dist], axis=1))
    m_f = head_out("corr_feat", np.concatenate([fx[ii], fy[jj], fx[ii] - fy[jj]], axis=1))
    logits = (m_p + m_f).reshape(kx, ky)
    score_in = np.stack([logits.max(axis=1), logits.mean(axis=1),
                         fx.mean(axis=1), fx.max(axis=1)], axis=1)
    _nudge_unit_biases(params, "corr_score", score_in)


@dataclass
class SuiteEntry:
    name: str
    max_rel_error: float
    passed: bool


def _check(name, f, inputs, tolerance):
    report = grad_check(f, inputs, epsilon=1e-5, tolerance=tolerance)
    return SuiteEntry(name=name, max_rel_error=report.max_rel_error, passed=report.passed)


def run_suite(tolerance: float = 1e-3, seed: int = 7) -> list:
    """Grad-check all losses and blocks at desk scale; returns per-entry results."""
    rng = np.random.default_rng(seed)
    cfg = _suite_config()
    params = init_params(cfg, seed=seed)
    loss_cfg = LossConfig()
    entries = []

    cloud = synth_shape("torus", SUITE_N, seed=seed)
    cloud_y = synth_shape("cube", SUITE_N, seed=seed + 1)

    # network blocks: sum of outputs w.r.t. their own parameters
    def block(name, prefixes, forward):
        subset = _params_subset(params, prefixes)
        keys = sorted(subset)
        vals = [subset[k] for k in keys]
        entries.append(_check(name, lambda _inputs: forward(), vals, tolerance))

    block("edgeconv_backbone", ["edge"],
          lambda: net.edgeconv_backbone(cloud, params).sum())
    stack = render_views(cloud_y, cfg.views, cfg.resolution)
    block("image_encoder", ["img_"],
          lambda: net.image_encoder(stack, SUITE_N, params).sum())

    fx_data = rng.uniform(-1, 1, size=(SUITE_N, SUITE_C))
    fy_data = rng.uniform(-1, 1, size=(SUITE_N, SUITE_C))
    fx = Value(fx_data)
    fy = Value(fy_data)
    block("transformer_interact", ["interact."],
          lambda: (lambda pair: pair[0].sum() + pair[1].sum())(
              net.transformer_interact(fx, fy, params)))
    img = Value(rng.uniform(-1, 1, size=(SUITE_N, SUITE_C)))
    block("transformer_fuse", ["fuse."],
          lambda: net.transformer_fuse(fx, img, params).sum())
    block("mask_predict", ["mask."],
          lambda: net.mask_predict(fx, fy, cloud, SUITE_K, params).scores.sum())

    coords_x = cloud[:SUITE_K]
    coords_y = cloud_y[:SUITE_K]
    fxk = Value(fx_data[:SUITE_K])
    fyk = Value(fy_data[:SUITE_K])
    _shift_biases_off_kinks(params, coords_x, coords_y,
                            fx_data[:SUITE_K], fy_data[:SUITE_K])

    # Plain matrix.sum() is constant (each softmax row sums to 1), which would
    # leave the matcher gradients untested; weight the entries instead.
    probe = Value(rng.uniform(-1.0, 1.0, size=(SUITE_K, SUITE_K)))

    def corr_scalar():
        mr = net.correspondence_search(coords_x, coords_y, fxk, fyk, params)
        return (mr.matrix * probe).sum() + mr.scores.sum()

    block("correspondence_search", ["corr_"], corr_scalar)
    block("pose_regression", ["pose_reg"],
          lambda: net.pose_regression(fx, fy, params).sum())

    # losses: gradients w.r.t. the feature inputs
    sample = make_sample(cloud, "partial", seed=seed)
    masks = overlap_select(sample.source, sample.target, sample.gt,
                           loss_cfg.overlap_threshold)
    n_src, n_tgt = len(sample.source), len(sample.target)
    gx = Value(rng.uniform(-1, 1, size=(n_src, 8)), requires_grad=True)
    gy = Value(rng.uniform(-1, 1, size=(n_tgt, 8)), requires_grad=True)
    entries.append(_check(
        "ocl_loss",
        lambda inp: losses_mod.ocl_loss(inp[0], inp[1], sample.source, sample.target,
                                        sample.gt, masks, loss_cfg),
        [gx, gy], tolerance))

    pb = Value(rng.uniform(-1, 1, size=(SUITE_BATCH, SUITE_C)), requires_grad=True)
    pi = Value(rng.uniform(-1, 1, size=(SUITE_BATCH, SUITE_C)), requires_grad=True)
    entries.append(_check(
        "cmcl_loss",
        lambda inp: losses_mod.cmcl_loss(inp[0], inp[1], loss_cfg),
        [pb, pi], tolerance))

    logits = Value(rng.uniform(-1, 1, size=(SUITE_K, SUITE_K)), requires_grad=True)
    scores_leaf = Value(rng.uniform(-2, 2, size=SUITE_K), requires_grad=True)
    entries.append(_check(
        "mp_loss",
        lambda inp: losses_mod.mp_loss(inp[1].sigmoid(), inp[0].softmax(axis=1)),
        [logits, scores_leaf], tolerance))

    s_hat = (rng.random(SUITE_K) > 0.5).astype(float)
    entries.append(_check(
        "ms_loss",
        lambda inp: losses_mod.ms_loss(inp[0].sigmoid(), s_hat),
        [scores_leaf], tolerance))

    j_star = rng.integers(0, SUITE_K, size=SUITE_K)
    entries.append(_check(
        "cs_loss",
        lambda inp: losses_mod.cs_loss(inp[0].softmax(axis=1), s_hat, j_star),
        [logits], tolerance))

    return entries


def suite_passed(entries: list) -> bool:
    return all(e.passed for e in entries)
