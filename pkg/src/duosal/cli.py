"""Command-line front end.

Subcommands: gen, train, eval, infer, plot-pr. Exit codes: 0 success,
2 invalid configuration or arguments, 3 diverged training loss.
"""

from __future__ import annotations

import argparse
import csv
import pathlib
import sys

import numpy as np

from . import imgio, metrics, svgplot, synth
from . import tensor as T
from .config import ConfigError, ModelConfig, TrainConfig, load_config, parse_canonical
from .pipeline import (CheckpointFormatError, Model, TrainDivergenceError,
                       count_params_flops, load_checkpoint, read_checkpoint,
                       save_checkpoint, train_loop)
from .synth import SyntheticSceneSpec
from .tensor import Tensor


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)           # csv defaults are RFC-4180 (\r\n, quoting)
        w.writerow(header)
        w.writerows(rows)


def _scene_spec(train_cfg, model_cfg, seed=None):
    return SyntheticSceneSpec(
        seed=train_cfg.seed if seed is None else seed,
        image_hw=tuple(model_cfg.input_hw),
        n_objects=train_cfg.n_objects,
        modality=train_cfg.modality,
        noise_level=train_cfg.noise_level,
        supp_corruption=train_cfg.supp_corruption,
        primary_corruption=train_cfg.primary_corruption,
    )


def _load_configs(args):
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "modality", None) is not None:
        overrides["modality"] = args.modality
    if overrides:
        import dataclasses
        train_cfg = dataclasses.replace(train_cfg, **overrides)
    want = synth.PACKED_FOCAL_CHANNELS if train_cfg.modality == "focal_stack" else 1
    if model_cfg.supp_channels != want:
        import dataclasses
        model_cfg = dataclasses.replace(model_cfg, supp_channels=want)
    return model_cfg, train_cfg


def _ensure_out(args):
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    model_cfg, train_cfg = _load_configs(args)
    out = _ensure_out(args)
    spec = _scene_spec(train_cfg, model_cfg)
    images, supps, gts = synth.generate_dataset(spec, args.count)
    for i in range(args.count):
        imgio.save_rgb(out / f"image_{i:04d}.png", images[i])
        imgio.save_gray(out / f"gt_{i:04d}.png", gts[i, 0])
        if train_cfg.modality == "focal_stack":
            np.save(out / f"supp_{i:04d}.npy", supps[i])
        else:
            imgio.save_gray(out / f"supp_{i:04d}.png", supps[i, 0])
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _load_supp(path, channels):
    path = pathlib.Path(path)
    if path.suffix == ".npy":
        supp = np.load(path)
    else:
        supp = imgio.load_gray(path)[None]
    if supp.shape[0] != channels:
        raise ConfigError(
            f"supplementary input {path} has {supp.shape[0]} channels, "
            f"model wants {channels}")
    return supp


def cmd_train(args):
    model_cfg, train_cfg = _load_configs(args)
    out = _ensure_out(args)
    spec = _scene_spec(train_cfg, model_cfg)
    images, supps, gts = synth.generate_dataset(spec, train_cfg.n_samples)

    prev = T.set_default_dtype(np.float32)
    try:
        model = Model(model_cfg, seed=train_cfg.seed)
        n_params, flops = count_params_flops(model)
        print(f"model: {n_params} params, {flops / 1e6:.1f} MFLOPs/forward")
        history = train_loop(model, images.astype(np.float32),
                             supps.astype(np.float32), gts, train_cfg,
                             log=print)
    finally:
        T.set_default_dtype(prev)

    save_checkpoint(out / "model.ckpt", model, step=history["steps"][-1])
    _write_csv(out / "loss.csv", ["step", "loss"],
               [(s, f"{v:.6f}") for s, v in zip(history["steps"], history["loss"])])
    if history["eval_steps"]:
        _write_csv(out / "train_eval.csv", ["step", "mae", "fmeasure"],
                   [(s, f"{m:.6f}", f"{f:.6f}") for s, m, f in
                    zip(history["eval_steps"], history["mae"], history["fmeasure"])])
    print(f"checkpoint and logs in {out}")
    return 0


def _model_from_ckpt(path):
    try:
        cfg_text, _, _ = read_checkpoint(path)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from None
    except CheckpointFormatError as e:
        raise ConfigError(f"bad checkpoint {path}: {e}") from None
    model_cfg = parse_canonical(cfg_text)
    prev = T.set_default_dtype(np.float32)
    try:
        model = Model(model_cfg, seed=0)
    finally:
        T.set_default_dtype(prev)
    load_checkpoint(path, model)
    return model, model_cfg


def cmd_eval(args):
    out = _ensure_out(args)
    if args.pred_dir and args.gt_dir:
        acc = metrics.MetricAccumulator(with_pr=True)
        pred_dir = pathlib.Path(args.pred_dir)
        gt_dir = pathlib.Path(args.gt_dir)
        names = sorted(p.name for p in pred_dir.iterdir()
                       if p.suffix in (".png", ".pgm"))
        if not names:
            raise ConfigError(f"no predictions found in {pred_dir}")
        for name in names:
            gt_path = gt_dir / name
            if not gt_path.exists():
                raise ConfigError(f"no ground truth for {name}")
            acc.update(imgio.load_gray(pred_dir / name), imgio.load_mask(gt_path))
        res = acc.results()
    else:
        if not args.ckpt:
            raise ConfigError("eval needs either --ckpt or --pred-dir/--gt-dir")
        model, model_cfg = _model_from_ckpt(args.ckpt)
        _, train_cfg = _load_configs(args)
        spec = _scene_spec(train_cfg, model_cfg)
        if spec.supp_channels() != model_cfg.supp_channels:
            raise ConfigError(
                f"modality {spec.modality!r} provides {spec.supp_channels()} "
                f"channels but the checkpoint expects {model_cfg.supp_channels}")
        images, supps, gts = synth.generate_dataset(spec, args.count,
                                                    seed_offset=args.seed_offset)
        acc = metrics.MetricAccumulator(with_pr=True)
        for i in range(args.count):
            prob = model.predict_prob(
                Tensor(images[i:i + 1], dtype=np.float32),
                Tensor(supps[i:i + 1], dtype=np.float32))
            acc.update(prob[0, 0].astype(np.float64), gts[i, 0])
        res = acc.results()

    _write_csv(out / "metrics.csv", ["metric", "value"],
               [(k, f"{res[k]:.6f}") for k in
                ("mae", "fmeasure", "smeasure", "emeasure")])
    _write_csv(out / "pr.csv", ["threshold", "precision", "recall"],
               [(f"{i / 255:.6f}", f"{p:.6f}", f"{r:.6f}")
                for i, (p, r) in enumerate(zip(res["precision"], res["recall"]))])
    for k in ("mae", "fmeasure", "smeasure", "emeasure"):
        print(f"{k}: {res[k]:.4f}")
    print(f"metrics.csv and pr.csv in {out}")
    return 0


def cmd_infer(args):
    model, model_cfg = _model_from_ckpt(args.ckpt)
    image = imgio.load_rgb(args.image)
    if image.shape[1:] != tuple(model_cfg.input_hw):
        raise ConfigError(
            f"image is {image.shape[1:]}, model wants {tuple(model_cfg.input_hw)}")
    supp = _load_supp(args.supp, model_cfg.supp_channels)
    prob = model.predict_prob(Tensor(image[None], dtype=np.float32),
                              Tensor(supp[None], dtype=np.float32))
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    imgio.save_gray(out, prob[0, 0].astype(np.float64))
    print(f"saliency map written to {out}")
    return 0


def cmd_plot_pr(args):
    curves = []
    for path in args.csv:
        xs, ys = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                xs.append(float(row["recall"]))
                ys.append(float(row["precision"]))
        curves.append((pathlib.Path(path).parent.name or path, xs, ys))
    svg = svgplot.line_plot(curves, title="Precision / recall",
                            xlabel="recall", ylabel="precision")
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    print(f"plot written to {out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="duosal",
        description="two-modality salient object detection, end to end")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file ([model]/[train]/[data])")
        p.add_argument("--seed", type=int, help="override train/data seed")
        p.add_argument("--out", required=True, help="output directory/file")
        p.add_argument("--modality", choices=synth.MODALITIES,
                       help="override supplementary modality")

    p = sub.add_parser("gen", help="write a synthetic dataset to disk")
    common(p)
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train on synthetic scenes")
    common(p)
    p.add_argument("--steps", type=int, help="override optimizer steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dir")
    common(p)
    p.add_argument("--ckpt", help="checkpoint to evaluate")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed-offset", type=int, default=10_000,
                   help="seed shift for the generated eval set")
    p.add_argument("--pred-dir", help="directory of prediction maps")
    p.add_argument("--gt-dir", help="directory of ground-truth masks")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="run one image pair through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--supp", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("plot-pr", help="render PR csv(s) to an SVG")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(fn=cmd_plot_pr)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except TrainDivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
