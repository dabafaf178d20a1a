"""End-to-end training, iterative registration, evaluation, and ablations.

The registration loop extracts features once, then alternates correspondence
search and weighted pose estimation for a fixed number of iterations, moving
only the source keypoint coordinates between rounds.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import losses as losses_mod
from . import network as net
from .autodiff import AdamState, Value, adam_step, backward, concat
from .data import ProtocolConfig, RegistrationSample, shape_bank
from .geometry import (DegenerateGeometryError, RigidTransform, aggregate_errors,
                       apply_transform, compose, euler_to_matrix, icp_baseline,
                       matrix_to_euler, overlap_select, registration_error)
from .losses import LossConfig, SupervisionLabels, make_labels
from .network import ModelParams, NetworkConfig, init_params
from .projection import render_views

CORR_VARIANTS = ("full", "regression")


@dataclass(frozen=True)
class Toggles:
    """Component switches mirroring the ablation axes."""
    transformer_fusion: bool = True   # TF: both attention layers
    cross_modal_data: bool = True     # CMD: image features
    contrastive: bool = True          # MCL: overlap + cross-modal losses
    mask_prediction: bool = True      # MP: keypoint selection (off -> keep all)


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = NetworkConfig()
    loss: LossConfig = LossConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    toggles: Toggles = Toggles()
    n_points: int = 128
    n_keypoints: int = 0          # 0 -> ceil(min(N, M) / 2)
    n_iter: int = 3
    n_shapes: int = 8
    regime: str = "partial"
    corr_variant: str = "full"
    hard_correspondences: bool = False
    render_both_clouds: bool = False
    batch_size: int = 4
    train_pool: int = 0           # 0 -> fresh sample each step; >0 -> fixed cycled pool
    steps: int = 200
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    lr_milestones: tuple = (100, 150)  # in steps
    lr_factor: float = 0.5
    checkpoint_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.corr_variant not in CORR_VARIANTS:
            raise ValueError(f"corr_variant must be one of {CORR_VARIANTS}")
        if self.toggles.cross_modal_data and self.network.views < 1:
            raise ValueError("cross-modal data requires at least one projection view")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for key, typ in (("network", NetworkConfig), ("loss", LossConfig),
                         ("protocol", ProtocolConfig), ("toggles", Toggles)):
            if key in d and isinstance(d[key], dict):
                sub = d[key]
                if key == "network":
                    for tup in ("edge_widths", "conv_channels"):
                        if tup in sub:
                            sub[tup] = tuple(sub[tup])
                d[key] = typ(**sub)
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def lr_for_step(cfg: RunConfig, step: int) -> float:
    lr = cfg.base_lr
    for m in cfg.lr_milestones:
        if step >= m:
            lr *= cfg.lr_factor
    return lr


# -- feature extraction --------------------------------------------------


@dataclass
class FeatureBundle:
    raw_x: Value
    raw_y: Value
    hybrid_x: Value
    hybrid_y: Value
    image_vec: Value          # aggregated (C,) image embedding, or None
    mask_x: net.MaskPrediction
    mask_y: net.MaskPrediction


def extract_features(params: ModelParams, source: np.ndarray, target: np.ndarray,
                     cfg: RunConfig) -> FeatureBundle:
    """Run backbone, image encoder, attention layers, and keypoint selection."""
    n, m = len(source), len(target)
    raw_x = net.edgeconv_backbone(source, params)
    raw_y = net.edgeconv_backbone(target, params)
    c = params.config.feature_dim
    if cfg.toggles.cross_modal_data:
        stack = render_views(target, params.config.views, params.config.resolution)
        image_vec = net.image_embedding(stack, params)
        if cfg.render_both_clouds:
            stack_x = render_views(source, params.config.views, params.config.resolution)
            image_vec = concat([image_vec.reshape(1, c),
                                net.image_embedding(stack_x, params).reshape(1, c)],
                               axis=0).max(axis=0)
    else:
        image_vec = Value(np.zeros(c))
    if cfg.toggles.transformer_fusion:
        phi_x, phi_y = net.transformer_interact(raw_x, raw_y, params)
        hybrid_x = net.transformer_fuse(phi_x, net.repeat_rows(image_vec, n), params)
        hybrid_y = net.transformer_fuse(phi_y, net.repeat_rows(image_vec, m), params)
    else:
        hybrid_x, hybrid_y = raw_x, raw_y
    if cfg.toggles.mask_prediction:
        k = cfg.n_keypoints or math.ceil(min(n, m) / 2)
        k = min(k, n, m)
    else:
        k = min(n, m)
    mask_x = net.mask_predict(hybrid_x, hybrid_y, source, k, params)
    mask_y = net.mask_predict(hybrid_y, hybrid_x, target, k, params)
    return FeatureBundle(raw_x=raw_x, raw_y=raw_y, hybrid_x=hybrid_x, hybrid_y=hybrid_y,
                         image_vec=image_vec, mask_x=mask_x, mask_y=mask_y)


# -- iterative registration ---------------------------------------------


@dataclass
class IterationDiagnostics:
    match: net.MatchResult
    labels: SupervisionLabels
    transform: RigidTransform
    elapsed_s: float


@dataclass
class RegisterResult:
    transform: RigidTransform
    iterations: list
    bundle: FeatureBundle
    degenerate: bool = False


def register(params: ModelParams, sample: RegistrationSample, cfg: RunConfig,
             n_iter: int = None, force_matrix: np.ndarray = None) -> RegisterResult:
    """Features once, then n_iter rounds of correspondence search + pose solve.

    `force_matrix` is a test hook substituting the predicted matching matrix
    (e.g. one-hot true matches) while keeping the rest of the loop intact.
    """
    n_iter = n_iter or cfg.n_iter
    bundle = extract_features(params, sample.source, sample.target, cfg)
    if cfg.corr_variant == "regression":
        return _register_regression(params, sample, bundle, n_iter)
    sel_y = bundle.mask_y.selected_coords
    f_xk = bundle.mask_x.selected_features
    f_yk = bundle.mask_y.selected_features
    labels = make_labels(bundle.mask_x.selected_coords, sel_y, sample.gt,
                         cfg.loss.dist_threshold)
    accum = RigidTransform.identity()
    cur = bundle.mask_x.selected_coords.copy()
    iterations = []
    for _ in range(n_iter):
        t0 = time.perf_counter()
        match = net.correspondence_search(cur, sel_y, f_xk, f_yk, params)
        matrix = force_matrix if force_matrix is not None else match.matrix.data
        if cfg.hard_correspondences and force_matrix is None:
            matched = net.hard_correspondences(matrix, sel_y)
        else:
            matched = net.soft_correspondences(matrix, sel_y)
        try:
            step_tf = _pose_step(cur, matched, match.weights)
        except DegenerateGeometryError:
            return RegisterResult(transform=accum, iterations=iterations,
                                  bundle=bundle, degenerate=True)
        accum = compose(step_tf, accum)
        cur = apply_transform(step_tf, cur)
        iterations.append(IterationDiagnostics(match=match, labels=labels,
                                               transform=accum,
                                               elapsed_s=time.perf_counter() - t0))
    return RegisterResult(transform=accum, iterations=iterations, bundle=bundle)


def _pose_step(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> RigidTransform:
    from .geometry import weighted_svd
    return weighted_svd(src, dst, weights)


def _register_regression(params: ModelParams, sample: RegistrationSample,
                         bundle: FeatureBundle, n_iter: int) -> RegisterResult:
    """Direct pose regression stand-in for the correspondence-search ablation."""
    pred = net.pose_regression(bundle.hybrid_x, bundle.hybrid_y, params)
    angles = pred.data[:3] * 45.0
    trans = pred.data[3:] * 0.5
    tf = RigidTransform(euler_to_matrix(angles), trans)
    return RegisterResult(transform=tf, iterations=[], bundle=bundle)


# -- training ------------------------------------------------------------


@dataclass
class StepLosses:
    ocl: float
    cmcl: float
    mp: float
    ms: float
    cs: float
    total: float


@dataclass
class TrainResult:
    params: ModelParams
    curves: list  # StepLosses per step


def build_training_sample(cfg: RunConfig, bank: list, step: int, i: int) -> RegistrationSample:
    """Deterministic sample stream shared across configs with equal seeds.

    A positive train_pool cycles through that many fixed samples so the model
    revisits each one; train_pool = 0 draws a fresh sample every step.
    """
    flat = step * cfg.batch_size + i
    if cfg.train_pool:
        flat %= cfg.train_pool
    idx = flat % len(bank)
    seed = cfg.seed * 1_000_003 + flat
    return data_mod.make_sample(bank[idx], cfg.regime, seed, cfg.protocol)


def train_pool_samples(cfg: RunConfig, bank: list) -> list:
    """The fixed training samples a pooled run cycles through."""
    if not cfg.train_pool:
        raise ValueError("train_pool_samples: config has no fixed pool")
    return [build_training_sample(cfg, bank, 0, i) for i in range(cfg.train_pool)]


def _sample_losses(params: ModelParams, sample: RegistrationSample, cfg: RunConfig):
    """Forward one sample, returning loss terms and pooled vectors for CMCL."""
    result = register(params, sample, cfg)
    bundle = result.bundle
    zero = Value(0.0)
    if cfg.toggles.contrastive:
        masks = overlap_select(sample.source, sample.target, sample.gt,
                               cfg.loss.overlap_threshold)
        l_ocl = losses_mod.ocl_loss(bundle.raw_x, bundle.raw_y, sample.source,
                                    sample.target, sample.gt, masks, cfg.loss)
    else:
        l_ocl = zero
    per_iter = []
    if cfg.corr_variant == "regression":
        target_vec = np.concatenate([np.array(matrix_to_euler(sample.gt.rotation)) / 45.0,
                                     sample.gt.translation / 0.5])
        pred = net.pose_regression(bundle.hybrid_x, bundle.hybrid_y, params)
        diff = pred - Value(target_vec)
        l_mp = (diff * diff).mean()
    else:
        final = result.iterations[-1]
        l_mp = losses_mod.mp_loss(bundle.mask_x.selected_scores, final.match.matrix)
        for it in result.iterations:
            l_ms = losses_mod.ms_loss(it.match.scores, it.labels.s_hat)
            l_cs = losses_mod.cs_loss(it.match.matrix, it.labels.y_hat, it.labels.j_star)
            per_iter.append((l_ms, l_cs))
    c = params.config.feature_dim
    p_bar = ((bundle.raw_x.max(axis=0) + bundle.raw_y.max(axis=0)) / 2.0).reshape(1, c)
    p_img = bundle.image_vec.reshape(1, c)
    return l_ocl, l_mp, per_iter, p_bar, p_img


def train(cfg: RunConfig, bank: list = None, progress=None) -> TrainResult:
    """Seeded training loop optimizing the summed objective with Adam."""
    if cfg.batch_size < 2:
        raise ValueError("batch_size must be >= 2 (cross-modal loss needs negatives)")
    bank = bank if bank is not None else shape_bank(cfg.n_shapes, cfg.n_points, cfg.seed)
    params = init_params(cfg.network, seed=cfg.seed)
    state = AdamState.init(params.trainable())
    curves = []
    use_cmcl = cfg.toggles.contrastive and cfg.toggles.cross_modal_data
    for step in range(cfg.steps):
        params.zero_grad()
        sample_terms = []
        p_bars, p_imgs = [], []
        for i in range(cfg.batch_size):
            sample = build_training_sample(cfg, bank, step, i)
            l_ocl, l_mp, per_iter, p_bar, p_img = _sample_losses(params, sample, cfg)
            sample_terms.append((l_ocl, l_mp, per_iter))
            p_bars.append(p_bar)
            p_imgs.append(p_img)
        if use_cmcl:
            l_cmcl = losses_mod.cmcl_loss(concat(p_bars, axis=0), concat(p_imgs, axis=0), cfg.loss)
        else:
            l_cmcl = Value(0.0)
        batch_sum = None
        log = {"ocl": 0.0, "mp": 0.0, "ms": 0.0, "cs": 0.0}
        for l_ocl, l_mp, per_iter in sample_terms:
            per_sample = losses_mod.total_loss(l_ocl, Value(0.0), l_mp, per_iter)
            batch_sum = per_sample if batch_sum is None else batch_sum + per_sample
            log["ocl"] += float(l_ocl.data) / cfg.batch_size
            log["mp"] += float(l_mp.data) / cfg.batch_size
            log["ms"] += sum(float(m.data) for m, _ in per_iter) / cfg.batch_size
            log["cs"] += sum(float(c_.data) for _, c_ in per_iter) / cfg.batch_size
        total = batch_sum / cfg.batch_size + l_cmcl
        if not np.isfinite(total.data):
            offender = next((k for k, v in log.items() if not np.isfinite(v)), "cmcl")
            raise FloatingPointError(f"non-finite training loss (component: {offender})")
        backward(total)
        adam_step(params.trainable(), state, lr_for_step(cfg, step), cfg.beta1, cfg.beta2)
        curves.append(StepLosses(ocl=log["ocl"], cmcl=float(l_cmcl.data), mp=log["mp"],
                                 ms=log["ms"], cs=log["cs"], total=float(total.data)))
        if progress:
            progress(step, curves[-1], params)
    return TrainResult(params=params, curves=curves)


# -- evaluation ----------------------------------------------------------


@dataclass
class EvalRow:
    sample_seed: int
    rmse_rot_deg: float
    mae_rot_deg: float
    rmse_trans: float
    mae_trans: float
    elapsed_ms: float


@dataclass
class EvalReport:
    rows: list
    aggregate: "object"
    mean_ms_per_sample: float
    n_iter: int


def eval_samples(cfg: RunConfig, bank: list, n_samples: int, seed_offset: int = 10_000) -> list:
    return [data_mod.make_sample(bank[i % len(bank)], cfg.regime,
                                 cfg.seed * 1_000_003 + seed_offset + i, cfg.protocol)
            for i in range(n_samples)]


def evaluate(params: ModelParams, samples: list, cfg: RunConfig,
             n_iter: int = None, use_icp: bool = False) -> EvalReport:
    """Register every sample, compare to ground truth, aggregate RMSE/MAE."""
    n_iter = n_iter or cfg.n_iter
    rows = []
    pairs = []
    for sample in samples:
        t0 = time.perf_counter()
        if use_icp:
            predicted = icp_baseline(sample.source, sample.target).transform
        else:
            predicted = register(params, sample, cfg, n_iter=n_iter).transform
        elapsed = (time.perf_counter() - t0) * 1000.0
        err = registration_error(predicted, sample.gt)
        pairs.append((predicted, sample.gt))
        rows.append(EvalRow(sample_seed=sample.seed, rmse_rot_deg=err.rmse_rot_deg,
                            mae_rot_deg=err.mae_rot_deg, rmse_trans=err.rmse_trans,
                            mae_trans=err.mae_trans, elapsed_ms=elapsed))
    agg = aggregate_errors(pairs)
    mean_ms = float(np.mean([r.elapsed_ms for r in rows]))
    return EvalReport(rows=rows, aggregate=agg, mean_ms_per_sample=mean_ms, n_iter=n_iter)


def metrics_csv(report: EvalReport) -> str:
    """Fixed-header CSV; one row per sample, aggregate row last.

    Wall-clock timings stay on the EvalReport object so the file is
    byte-identical across reruns with the same config and seed.
    """
    lines = ["RMSE_R,MAE_R,RMSE_t,MAE_t"]
    for r in report.rows:
        lines.append(f"{r.rmse_rot_deg:.9f},{r.mae_rot_deg:.9f},"
                     f"{r.rmse_trans:.9f},{r.mae_trans:.9f}")
    a = report.aggregate
    lines.append(f"{a.rmse_rot_deg:.9f},{a.mae_rot_deg:.9f},"
                 f"{a.rmse_trans:.9f},{a.mae_trans:.9f}")
    return "\n".join(lines) + "\n"


def losses_csv(curves: list) -> str:
    lines = ["step,ocl,cmcl,mp,ms,cs,total"]
    for i, c in enumerate(curves):
        lines.append(f"{i},{c.ocl:.9f},{c.cmcl:.9f},{c.mp:.9f},{c.ms:.9f},{c.cs:.9f},{c.total:.9f}")
    return "\n".join(lines) + "\n"


# -- ablation ------------------------------------------------------------

TOGGLE_PRESETS = {
    # rows of the component-ablation table
    "baseline": Toggles(transformer_fusion=False, cross_modal_data=False,
                        contrastive=False, mask_prediction=False),
    "tf": Toggles(transformer_fusion=True, cross_modal_data=False,
                  contrastive=False, mask_prediction=False),
    "tf_cmd": Toggles(transformer_fusion=True, cross_modal_data=True,
                      contrastive=False, mask_prediction=False),
    "tf_cmd_mcl": Toggles(transformer_fusion=True, cross_modal_data=True,
                          contrastive=True, mask_prediction=False),
    "full": Toggles(),
}


@dataclass
class AblationRow:
    axis: str
    value: str
    rmse_rot_deg: float
    mae_rot_deg: float
    rmse_trans: float
    mae_trans: float
    mean_ms_per_sample: float


def ablate(cfg: RunConfig, axes: dict, eval_samples_count: int = 16) -> list:
    """Train/evaluate once per axis value with a shared seeded sample stream."""
    rows = []
    for axis, values in axes.items():
        for value in values:
            if axis == "n_iter":
                run_cfg = replace(cfg, n_iter=int(value))
            elif axis == "components":
                run_cfg = replace(cfg, toggles=TOGGLE_PRESETS[str(value)])
            elif axis == "variant":
                run_cfg = replace(cfg, corr_variant=str(value))
            else:
                raise ValueError(f"unknown ablation axis {axis!r}")
            bank = shape_bank(run_cfg.n_shapes, run_cfg.n_points, run_cfg.seed)
            trained = train(run_cfg, bank)
            report = evaluate(trained.params, eval_samples(run_cfg, bank, eval_samples_count),
                              run_cfg)
            a = report.aggregate
            rows.append(AblationRow(axis=axis, value=str(value),
                                    rmse_rot_deg=a.rmse_rot_deg, mae_rot_deg=a.mae_rot_deg,
                                    rmse_trans=a.rmse_trans, mae_trans=a.mae_trans,
                                    mean_ms_per_sample=report.mean_ms_per_sample))
    return rows


def ablation_csv(rows: list) -> str:
    lines = ["axis,value,RMSE_R,MAE_R,RMSE_t,MAE_t,ms"]
    for r in rows:
        lines.append(f"{r.axis},{r.value},{r.rmse_rot_deg:.9f},{r.mae_rot_deg:.9f},"
                     f"{r.rmse_trans:.9f},{r.mae_trans:.9f},{r.mean_ms_per_sample:.3f}")
    return "\n".join(lines) + "\n"
