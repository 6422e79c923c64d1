"""Command-line entry points: datagen, train, eval, animate, verify-linearity, serve."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import blobs
from .dataset import SyntheticCorpusConfig, generate_corpus, load_corpus, split_corpus
from .emotion import EmotionSchedule, verify_logit_linearity
from .losses import LossConfig
from .pipeline import Bundle, animate, dump_obj_frames
from .trainer import TrainConfig, build_untrained_bundle, evaluate, train


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _train_config(args) -> TrainConfig:
    d = _load_json(args.config) if args.config else {}
    if "loss" in d and isinstance(d["loss"], dict):
        d["loss"] = LossConfig(**d["loss"])
    if "split_ratios" in d:
        d["split_ratios"] = tuple(d["split_ratios"])
    cfg = TrainConfig(**d)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    for flag in ("no_vertex_loss", "no_mouth_loss", "no_style", "no_emotion_module"):
        if getattr(args, flag):
            overrides[flag] = True
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def cmd_datagen(args) -> int:
    d = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.clips is not None:
        d["n_clips"] = args.clips
    config = SyntheticCorpusConfig.from_dict(d)
    manifest = generate_corpus(config, args.out)
    print(f"wrote {len(manifest['clips'])} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    if args.rand_init:
        seed = args.seed if args.seed is not None else 1000
        bundle_dir = build_untrained_bundle(corpus, Path(args.out) / "bundle", seed=seed)
        print(f"wrote untrained bundle to {bundle_dir}")
        return 0
    config = _train_config(args)
    result = train(config, corpus, args.out)
    print(f"bundle: {result['bundle']}")
    for stage, info in result["stages"].items():
        print(f"  {stage}: first {info['first_loss']:.5f} final {info['final_loss']:.5f}")
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    bundle = Bundle.load(args.bundle)
    if args.split == "all":
        ids = None
    else:
        splits = split_corpus(corpus, seed=args.seed if args.seed is not None else 0)
        ids = splits[args.split]
    report = evaluate(bundle, corpus, ids, seed=args.seed if args.seed is not None else 0)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(
        f"lip error mean {report['lip_error']['mean_mm']:.3f} mm, "
        f"max {report['lip_error']['max_mm']:.3f} mm over {report['n_clips']} clips"
    )
    return 0


def cmd_animate(args) -> int:
    bundle = Bundle.load(args.bundle)
    schedule = EmotionSchedule.from_json(args.schedule) if args.schedule else None
    identity = None
    if args.identity:
        identity = np.asarray(_load_json(args.identity), dtype=np.float64)
    seq = animate(bundle, args.audio, schedule, identity)
    seq.save_json(args.out)
    print(f"{seq.n_frames} frames ({seq.stage}) -> {args.out}")
    if args.dump_obj:
        paths = dump_obj_frames(bundle.face_model, seq, args.dump_obj)
        print(f"dumped {len(paths)} OBJ frames to {args.dump_obj}")
    return 0


def cmd_verify_linearity(args) -> int:
    lo, hi, n = (float(x) for x in args.grid.split(":"))
    report = verify_logit_linearity(
        args.mu,
        args.sigma,
        np.linspace(lo, hi, int(n)),
        n_samples=args.samples,
        seed=args.seed if args.seed is not None else 0,
        mode=args.mode,
    )
    payload = {
        "mode": report.mode,
        "slope": report.slope,
        "intercept": report.intercept,
        "expected_slope": 2.0 * args.mu / args.sigma**2,
        "etas": report.etas.tolist(),
        "delta_z": report.delta_z.tolist(),
        "max_abs_residual": report.max_abs_residual,
    }
    if args.out:
        Path(args.out).write_text(blobs.canonical_json(payload))
    print(
        f"slope {report.slope:.6f} (theory {payload['expected_slope']:.6f}), "
        f"max residual {report.max_abs_residual:.2e}"
    )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(Bundle.load(args.bundle))
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emoface",
        description="Emotion-controllable speech-driven 3D facial animation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic training corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON corpus config")
    p.add_argument("--seed", type=int)
    p.add_argument("--clips", type=int)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train a model bundle on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON train config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-vertex-loss", dest="no_vertex_loss", action="store_true")
    p.add_argument("--no-mouth-loss", dest="no_mouth_loss", action="store_true")
    p.add_argument("--no-style", dest="no_style", action="store_true")
    p.add_argument("--no-emotion-module", dest="no_emotion_module", action="store_true")
    p.add_argument("--rand-init", action="store_true", help="write an untrained bundle")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a bundle on a corpus split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test", "all"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("animate", help="audio + schedule -> parameter sequence")
    p.add_argument("--bundle", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--schedule")
    p.add_argument("--identity", help="JSON file with shape coefficients")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-obj", dest="dump_obj")
    p.add_argument("--seed", type=int)  # accepted for interface symmetry
    p.set_defaults(fn=cmd_animate)

    p = sub.add_parser("verify-linearity", help="check the logit/strength linearity")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--mode", default="closed_form", choices=["closed_form", "monte_carlo"])
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--grid", default="-2:2:9", help="lo:hi:n eta grid")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify_linearity)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--bundle", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
