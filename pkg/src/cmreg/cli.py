"""Command-line harness: synth, train, register, eval, ablate, gradcheck,
render-debug, serve.

All outputs land under --out; runs are fully seeded so identical config +
seed gives byte-identical CSVs.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps reductions deterministic run-to-run
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .data import (REGIMES, SHAPE_KINDS, ParseError, load_cloud, make_sample,
                   save_sample, shape_bank, synth_shape)
from .geometry import icp_baseline
from .gradsuite import run_suite, suite_passed
from .network import init_params
from .pipeline import (RunConfig, ablate, ablation_csv, eval_samples, evaluate,
                       losses_csv, metrics_csv, register, train)
from .projection import render_views, write_pgm_views

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_CONTRACT)


def _load_config(args) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = RunConfig.from_json(fh.read())
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_resolved(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    base = synth_shape(args.kind, cfg.n_points, cfg.seed)
    sample = make_sample(base, args.regime, cfg.seed, cfg.protocol)
    save_sample(sample, args.out)
    print(f"wrote sample ({args.kind}, {args.regime}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    ckpt_path = os.path.join(args.out, "checkpoint.cmig")

    def progress(step, losses, params):
        if step % 20 == 0 or step == cfg.steps - 1:
            print(f"step {step:4d}  total {losses.total:.4f}")
        if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            params.save(ckpt_path)

    bank = shape_bank(cfg.n_shapes, cfg.n_points, cfg.seed)
    result = train(cfg, bank, progress=progress)
    result.params.save(ckpt_path)
    with open(os.path.join(args.out, "losses.csv"), "w") as fh:
        fh.write(losses_csv(result.curves))
    report = evaluate(result.params, eval_samples(cfg, bank, args.eval_samples), cfg)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(metrics_csv(report))
    print(f"trained {cfg.steps} steps; final total loss {result.curves[-1].total:.4f}")
    print(f"train-set MAE(R) = {report.aggregate.mae_rot_deg:.3f} deg")
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    source = load_cloud(args.source, n_points=cfg.n_points, seed=cfg.seed)
    target = load_cloud(args.target, n_points=cfg.n_points, seed=cfg.seed + 1)
    if args.icp:
        tf = icp_baseline(source, target).transform
    else:
        params = init_params(cfg.network, seed=cfg.seed)
        if args.checkpoint:
            params.load(args.checkpoint)
        from .data import RegistrationSample
        from .geometry import RigidTransform
        pseudo = RegistrationSample(source=source, target=target,
                                    gt=RigidTransform.identity(), regime="clean", seed=cfg.seed)
        tf = register(params, pseudo, cfg).transform
    result = {"rotation": tf.rotation.tolist(), "translation": tf.translation.tolist()}
    with open(os.path.join(args.out, "transform.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    print(json.dumps(result))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    params = init_params(cfg.network, seed=cfg.seed)
    if args.checkpoint:
        params.load(args.checkpoint)
    elif not args.random_model and not args.icp:
        print("note: evaluating a randomly initialized model (pass --random-model to silence)")
    bank = shape_bank(cfg.n_shapes, cfg.n_points, cfg.seed)
    samples = eval_samples(cfg, bank, args.n_samples)
    report = evaluate(params, samples, cfg, use_icp=args.icp)
    csv_text = metrics_csv(report)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(csv_text)
    print(csv_text.splitlines()[0])
    print(csv_text.splitlines()[-1])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    axes = json.loads(args.axes)
    rows = ablate(cfg, axes, eval_samples_count=args.n_samples)
    csv_text = ablation_csv(rows)
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(csv_text)
    print(csv_text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    entries = run_suite()
    for e in entries:
        print(f"{e.name:24s} max_rel={e.max_rel_error:.3e} {'PASS' if e.passed else 'FAIL'}")
    return EXIT_OK if suite_passed(entries) else EXIT_CONTRACT


def cmd_render_debug(args) -> int:
    cfg = _load_config(args)
    if args.input:
        cloud = load_cloud(args.input, n_points=cfg.n_points, seed=cfg.seed)
    else:
        cloud = synth_shape(args.kind, cfg.n_points, cfg.seed)
    stack = render_views(cloud, cfg.network.views, cfg.network.resolution)
    paths = write_pgm_views(stack, args.out)
    print(f"wrote {len(paths)} PGM views to {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="cmreg", description="cross-modal point cloud registration harness")
    parser.add_argument("--config", help="path to a JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic registration sample")
    p.add_argument("--kind", choices=SHAPE_KINDS, default="torus")
    p.add_argument("--regime", choices=REGIMES, default="partial")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the model on synthetic shapes")
    p.add_argument("--eval-samples", type=int, default=16)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register two point cloud files")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--checkpoint")
    p.add_argument("--icp", action="store_true", help="use the ICP baseline")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="evaluate on seeded synthetic samples")
    p.add_argument("--checkpoint")
    p.add_argument("--n-samples", type=int, default=16)
    p.add_argument("--icp", action="store_true")
    p.add_argument("--random-model", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation axes, e.g. '{\"n_iter\": [2,3]}'")
    p.add_argument("axes")
    p.add_argument("--n-samples", type=int, default=16)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render-debug", help="dump depth views as ASCII PGM files")
    p.add_argument("--input", help="cloud file (OFF/PLY/XYZ); default synthetic")
    p.add_argument("--kind", choices=SHAPE_KINDS, default="torus")
    p.set_defaults(func=cmd_render_debug)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
