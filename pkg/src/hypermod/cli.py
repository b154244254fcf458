"""Command-line entry points for every pipeline stage.

Stages chain through checkpoint files: synth -> pretrain-gen / train-embed /
train-rsim / train-oracle -> select-layers -> train-editor -> edit / interp /
eval / grid.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation, selector, shapes, training
from .editor import Editor, EditPipeline
from .embedding import ContrastiveConfig, JointEmbedding, train_contrastive
from .errors import ConvergenceError
from .generator import GeneratorBundle, PretrainConfig, pretrain_generator
from .training import ShapeFeatureNet


def _load_image(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _save_png(arr: np.ndarray, path: str) -> None:
    Image.fromarray(arr, mode="RGB").save(path)


def _pipeline(args) -> EditPipeline:
    bundle = GeneratorBundle.load(args.gen)
    embedding = JointEmbedding.load(args.embed)
    editor = Editor.load(args.editor)
    return EditPipeline(bundle, embedding, editor)


def cmd_synth(args) -> int:
    samples = shapes.generate_dataset(args.n, args.seed)
    shapes.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_pretrain_gen(args) -> int:
    samples = shapes.load_dataset(args.data)
    embedding = JointEmbedding.load(args.embed) if args.embed else None
    cfg = PretrainConfig(steps=args.steps, seed=args.seed, embed_weight=0.05 if embedding else 0.0)
    result = pretrain_generator(samples, cfg=cfg, embedding=embedding)
    result.bundle.save(args.out)
    print(f"held-out PSNR {result.holdout_psnr:.2f} dB; saved {args.out}")
    return 0


def cmd_train_embed(args) -> int:
    samples = shapes.load_dataset(args.data)
    result = train_contrastive(samples, cfg=ContrastiveConfig(steps=args.steps, seed=args.seed))
    result.model.save(args.out)
    print(f"held-out retrieval top-1 {result.retrieval_top1:.3f}; saved {args.out}")
    return 0


def cmd_train_rsim(args) -> int:
    samples = shapes.load_dataset(args.data)
    net = training.train_shape_features(samples, steps=args.steps, seed=args.seed)
    net.save(args.out)
    print(f"saved {args.out}")
    return 0


def cmd_train_oracle(args) -> int:
    samples = shapes.load_dataset(args.data)
    result = evaluation.train_oracle(samples, steps=args.steps, seed=args.seed)
    result.oracle.save(args.out)
    acc = ", ".join(f"{k}={v:.3f}" for k, v in result.accuracy.items())
    print(f"held-out accuracy {acc}; saved {args.out}")
    return 0


def cmd_select_layers(args) -> int:
    bundle = GeneratorBundle.load(args.gen)
    embedding = JointEmbedding.load(args.embed)
    dw = selector.probe_optimize(
        bundle, embedding, args.target, args.source, m=args.m, seeds=tuple(range(args.seeds))
    )
    selection = selector.select_layers(dw, args.lambda_std)
    selector.write_selection_csv(args.out, selection)
    print(f"delta_omega={[round(v, 5) for v in selection.delta_omega]}")
    print(f"phi={selection.phi:.5f} selected={list(selection.layers)}; saved {args.out}")
    return 0


def cmd_train_editor(args) -> int:
    cfg, extra = training.load_train_config_file(args.config)
    for key in ("data", "gen", "embed", "rsim", "out"):
        if key not in extra:
            raise SystemExit(f"train config must set {key}=")
    samples = shapes.load_dataset(extra["data"])
    bundle = GeneratorBundle.load(extra["gen"])
    embedding = JointEmbedding.load(extra["embed"])
    rsim = ShapeFeatureNet.load(extra["rsim"])
    result = training.train_editor(cfg, bundle, embedding, rsim, samples, out_dir=extra["out"])
    print(
        f"alignment {result.align_initial:.4f} -> {result.align_final:.4f}; "
        f"editor and losses.csv in {extra['out']}"
    )
    return 0


def cmd_edit(args) -> int:
    pipeline = _pipeline(args)
    image = _load_image(args.image)
    grid = evaluation.render_edit_grid(pipeline, [image], (args.target, args.source), k=1)
    _save_png(grid, args.out)
    print(f"saved {args.out}")
    return 0


def cmd_interp(args) -> int:
    pipeline = _pipeline(args)
    image = _load_image(args.image)
    fa = pipeline.edit(image, args.target_a, args.source_a).factors
    fb = pipeline.edit(image, args.target_b, args.source_b).factors
    strip = evaluation.render_interpolation_strip(pipeline, image, fa, fb, eta_steps=args.eta_steps)
    _save_png(strip, args.out)
    print(f"saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    pipeline = _pipeline(args)
    rsim = ShapeFeatureNet.load(args.rsim)
    oracle = evaluation.AttributeOracle.load(args.oracle)
    samples = shapes.load_dataset(args.data)
    if args.limit:
        samples = samples[: args.limit]
    report = evaluation.evaluate_edit(pipeline, rsim, oracle, samples, (args.target, args.source))
    report.write_csv(args.out)
    print(
        f"target_success={report.target_success_rate:.3f} preservation={report.preservation_rate:.3f} "
        f"mean_psnr={report.mean('psnr'):.2f} mean_alignment={report.mean('directional_alignment'):.3f}"
    )
    print(f"saved {args.out}")
    return 0


def cmd_grid(args) -> int:
    pipeline = _pipeline(args)
    samples = shapes.load_dataset(args.data)
    grid = evaluation.render_edit_grid(pipeline, [s.image for s in samples], (args.target, args.source), k=args.images)
    _save_png(grid, args.out)
    print(f"saved {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypermod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a captioned shape dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain-gen", help="pretrain the generator + inversion encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=PretrainConfig.steps)
    p.add_argument("--embed", default=None, help="optional embedding checkpoint for a feature loss term")
    p.set_defaults(func=cmd_pretrain_gen)

    p = sub.add_parser("train-embed", help="train the contrastive text-image embedding")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=ContrastiveConfig.steps)
    p.set_defaults(func=cmd_train_embed)

    p = sub.add_parser("train-rsim", help="train the frozen identity-feature net")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=600)
    p.set_defaults(func=cmd_train_rsim)

    p = sub.add_parser("train-oracle", help="train the attribute oracle classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2500)
    p.set_defaults(func=cmd_train_oracle)

    p = sub.add_parser("select-layers", help="probe latents and pick the layers to edit")
    p.add_argument("--gen", required=True)
    p.add_argument("--embed", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--lambda-std", type=float, default=selector.DEFAULT_LAMBDA_STD)
    p.add_argument("--m", type=int, default=selector.DEFAULT_PROBE_STEPS)
    p.add_argument("--seeds", type=int, default=len(selector.DEFAULT_PROBE_SEEDS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_layers)

    p = sub.add_parser("train-editor", help="train the hypernetwork editor from a key=value config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_editor)

    p = sub.add_parser("edit", help="edit one image and save a source/recon/edit panel")
    for flag in ("--gen", "--embed", "--editor", "--image", "--target", "--source", "--out"):
        p.add_argument(flag, required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("interp", help="interpolate between two prompts' weight factors")
    for flag in ("--gen", "--embed", "--editor", "--image", "--target-a", "--source-a", "--target-b", "--source-b", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--eta-steps", type=int, default=6)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("eval", help="score edits with the oracle and write a report CSV")
    for flag in ("--editor", "--gen", "--embed", "--oracle", "--rsim", "--data", "--target", "--source", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="render source/recon/edit triplets for the first k images")
    for flag in ("--gen", "--embed", "--editor", "--data", "--target", "--source", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--images", type=int, default=8)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"training gate failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
