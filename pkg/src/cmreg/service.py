"""FastAPI service exposing the registration pipeline.

Request/response bodies are pydantic models; point clouds travel as nested
float lists.  Model parameters are loaded from a checkpoint path on the
service host, or freshly initialized from a seed when none is given.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .data import REGIMES, SHAPE_KINDS, ProtocolConfig, make_sample, synth_shape
from .geometry import icp_baseline, registration_error
from .gradsuite import run_suite, suite_passed
from .network import init_params
from .pipeline import RunConfig, eval_samples, evaluate, register
from .data import shape_bank
from .projection import render_views

app = FastAPI(title="cmreg", version=__version__)


class SynthRequest(BaseModel):
    kind: str = Field("sphere", description=f"one of {SHAPE_KINDS}")
    n_points: int = 128
    seed: int = 0


class CloudResponse(BaseModel):
    points: list[list[float]]


class SampleRequest(BaseModel):
    kind: str = "torus"
    n_points: int = 128
    regime: str = Field("partial", description=f"one of {REGIMES}")
    seed: int = 0


class TransformModel(BaseModel):
    rotation: list[list[float]]
    translation: list[float]


class SampleResponse(BaseModel):
    source: list[list[float]]
    target: list[list[float]]
    gt: TransformModel
    regime: str
    seed: int


class RegisterRequest(BaseModel):
    source: list[list[float]]
    target: list[list[float]]
    config: Optional[dict] = None
    checkpoint_path: Optional[str] = None
    n_iter: Optional[int] = None
    use_icp: bool = False


class RegisterResponse(BaseModel):
    transform: TransformModel
    iterations: int
    degenerate: bool


class EvaluateRequest(BaseModel):
    config: Optional[dict] = None
    checkpoint_path: Optional[str] = None
    n_samples: int = 8
    n_iter: Optional[int] = None
    use_icp: bool = False


class EvalRowModel(BaseModel):
    sample_seed: int
    rmse_rot_deg: float
    mae_rot_deg: float
    rmse_trans: float
    mae_trans: float
    elapsed_ms: float


class EvaluateResponse(BaseModel):
    rows: list[EvalRowModel]
    aggregate: EvalRowModel
    n_iter: int


class GradCheckEntry(BaseModel):
    name: str
    max_rel_error: float
    passed: bool


class GradCheckResponse(BaseModel):
    entries: list[GradCheckEntry]
    passed: bool


class RenderRequest(BaseModel):
    points: list[list[float]]
    views: int = 4
    resolution: int = 32


class RenderResponse(BaseModel):
    views: list[list[list[float]]]
    view_angles: list[float]


def _load_config(raw: Optional[dict]) -> RunConfig:
    try:
        return RunConfig.from_dict(raw) if raw else RunConfig()
    except (TypeError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=f"bad config: {exc}")


def _load_params(cfg: RunConfig, checkpoint_path: Optional[str]):
    params = init_params(cfg.network, seed=cfg.seed)
    if checkpoint_path:
        try:
            params.load(checkpoint_path)
        except (OSError, KeyError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"checkpoint load failed: {exc}")
    return params


def _transform_model(tf) -> TransformModel:
    return TransformModel(rotation=tf.rotation.tolist(), translation=tf.translation.tolist())


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.get("/config/defaults")
def config_defaults():
    import json
    return json.loads(RunConfig().to_json())


@app.post("/synth", response_model=CloudResponse)
def synth(req: SynthRequest):
    try:
        cloud = synth_shape(req.kind, req.n_points, req.seed)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return CloudResponse(points=cloud.tolist())


@app.post("/sample", response_model=SampleResponse)
def sample(req: SampleRequest):
    try:
        base = synth_shape(req.kind, req.n_points, req.seed)
        s = make_sample(base, req.regime, req.seed)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return SampleResponse(source=s.source.tolist(), target=s.target.tolist(),
                          gt=_transform_model(s.gt), regime=s.regime, seed=s.seed)


@app.post("/register", response_model=RegisterResponse)
def register_endpoint(req: RegisterRequest):
    cfg = _load_config(req.config)
    source = np.asarray(req.source, dtype=np.float64)
    target = np.asarray(req.target, dtype=np.float64)
    if source.ndim != 2 or source.shape[1] != 3 or target.ndim != 2 or target.shape[1] != 3:
        raise HTTPException(status_code=422, detail="clouds must be Nx3")
    if req.use_icp:
        res = icp_baseline(source, target)
        return RegisterResponse(transform=_transform_model(res.transform),
                                iterations=res.iterations, degenerate=False)
    params = _load_params(cfg, req.checkpoint_path)
    from .data import RegistrationSample
    from .geometry import RigidTransform
    pseudo = RegistrationSample(source=source, target=target,
                                gt=RigidTransform.identity(), regime="clean", seed=0)
    try:
        res = register(params, pseudo, cfg, n_iter=req.n_iter)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return RegisterResponse(transform=_transform_model(res.transform),
                            iterations=len(res.iterations), degenerate=res.degenerate)


@app.post("/evaluate", response_model=EvaluateResponse)
def evaluate_endpoint(req: EvaluateRequest):
    cfg = _load_config(req.config)
    params = _load_params(cfg, req.checkpoint_path)
    bank = shape_bank(cfg.n_shapes, cfg.n_points, cfg.seed)
    samples = eval_samples(cfg, bank, req.n_samples)
    report = evaluate(params, samples, cfg, n_iter=req.n_iter, use_icp=req.use_icp)
    rows = [EvalRowModel(**vars(r)) for r in report.rows]
    a = report.aggregate
    agg = EvalRowModel(sample_seed=-1, rmse_rot_deg=a.rmse_rot_deg, mae_rot_deg=a.mae_rot_deg,
                       rmse_trans=a.rmse_trans, mae_trans=a.mae_trans,
                       elapsed_ms=report.mean_ms_per_sample)
    return EvaluateResponse(rows=rows, aggregate=agg, n_iter=report.n_iter)


@app.post("/gradcheck", response_model=GradCheckResponse)
def gradcheck_endpoint():
    entries = run_suite()
    return GradCheckResponse(entries=[GradCheckEntry(**vars(e)) for e in entries],
                             passed=suite_passed(entries))


@app.post("/render", response_model=RenderResponse)
def render_endpoint(req: RenderRequest):
    points = np.asarray(req.points, dtype=np.float64)
    try:
        stack = render_views(points, req.views, req.resolution)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return RenderResponse(views=stack.views.tolist(), view_angles=stack.view_angles.tolist())
