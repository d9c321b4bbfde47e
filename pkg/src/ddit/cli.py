"""Operator command line: dataset generation, training, sampling, evaluation.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 numeric failure.
The environment variable DDIT_SEED supplies a seed when no --seed flag is
given.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import toydata
from .dit_core import count_parameters
from .errors import (
    ConfigError,
    DditError,
    InputError,
    NumericError,
    PersistenceError,
    ShapeError,
    UsageError,
)
from .latentcodec import encode_condition, float_to_image, make_codec
from .metrics import evaluate
from .objectives import make_linear_schedule
from .runconfig import PRESETS, RunSettings, build_settings, write_effective_ini
from .samplers import GuidanceConfig, SamplerConfig, sample
from .trainer import Checkpoint, train

CLI_SAMPLER_KINDS = {"ddpm": "ddpm_ancestral", "ddim": "ddim", "euler": "rfm_euler"}


def _default_seed() -> int:
    return int(os.environ.get("DDIT_SEED", "0"))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy",
                   help="named configuration preset (default: toy)")
    p.add_argument("--config", type=Path, default=None,
                   help="INI config file overriding preset values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddit",
        description="Dual-stream multimodal diffusion transformer toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add_command(name, help_text):
        return sub.add_parser(
            name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )

    p = add_command("gen-data", "synthesize the toy multimodal dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=None, help="dataset seed (default: DDIT_SEED or 0)")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--size", type=int, default=32, choices=(32, 64), help="image side in pixels")
    p.set_defaults(func=cmd_gen_data)

    p = add_command("train", "train a model on a generated dataset")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoints and logs")
    p.add_argument("--objective", choices=("ddpm", "rfm"), default=None,
                   help="training objective override")
    p.add_argument("--seed", type=int, default=None, help="training seed")
    p.add_argument("--batch-size", type=int, default=None, help="micro-batch size override")
    p.add_argument("--max-steps", type=int, default=None, help="optimizer step budget override")
    p.add_argument("--lr", type=float, default=None, help="base learning rate override")
    p.add_argument("--resume", type=Path, default=None,
                   help="checkpoint prefix to continue exactly (configs come from the checkpoint)")
    p.add_argument("--init-from", type=Path, default=None,
                   help="checkpoint prefix whose weights warm-start a fresh run")
    p.set_defaults(func=cmd_train)

    p = add_command("sample", "generate images from a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint prefix")
    p.add_argument("--condition", type=Path, required=True, help="mask or sketch PNG")
    p.add_argument("--modality", choices=("mask", "sketch"), default="mask",
                   help="spatial condition type")
    p.add_argument("--caption", type=str, default="",
                   help="space-separated caption tokens, e.g. 'HAIR_RED EYES_BLUE'")
    p.add_argument("--cfg-scale", type=float, default=4.0, help="guidance scale")
    p.add_argument("--steps", type=int, default=50, help="sampling steps")
    p.add_argument("--sampler", choices=sorted(CLI_SAMPLER_KINDS), default="ddim",
                   help="sampler kind")
    p.add_argument("--eta", type=float, default=0.0, help="ddim stochasticity")
    p.add_argument("--clip-x0", type=float, default=None,
                   help="bound the clean-latent extrapolation in discrete samplers")
    p.add_argument("--spatial-cfg", action="store_true",
                   help="also null the spatial condition in the unconditional branch")
    p.add_argument("--seed", type=int, default=None, help="sampling seed")
    p.add_argument("--grid", type=int, default=1, help="tile this many seeds into one image")
    p.add_argument("--out", type=Path, default=Path("sample.png"), help="output image path")
    p.set_defaults(func=cmd_sample)

    p = add_command("eval", "score held-out generations against ground truth")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint prefix")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--n", type=int, default=64, help="held-out samples to evaluate")
    p.add_argument("--sampler", choices=sorted(CLI_SAMPLER_KINDS), default=None,
                   help="sampler kind (default matches the checkpoint objective)")
    p.add_argument("--steps", type=int, default=50, help="sampling steps")
    p.add_argument("--cfg-scale", type=float, default=4.0, help="guidance scale")
    p.add_argument("--clip-x0", type=float, default=None,
                   help="bound the clean-latent extrapolation in discrete samplers")
    p.add_argument("--spatial-cfg", action="store_true",
                   help="also null the spatial condition in the unconditional branch")
    p.add_argument("--seed", type=int, default=None, help="sampling seed")
    p.add_argument("--out", type=Path, default=None, help="directory for report files")
    p.set_defaults(func=cmd_eval)

    p = add_command("inspect", "print configuration and parameter counts")
    p.add_argument("--ckpt", type=Path, default=None, help="checkpoint prefix to inspect")
    _add_config_flags(p)
    p.add_argument("--tensors", action="store_true", help="also list per-tensor shapes")
    p.set_defaults(func=cmd_inspect)

    return parser


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    summary = toydata.write_dataset(args.n, seed, args.out, args.size)
    print(f"wrote {summary['n']} samples to {args.out} (seed={seed}, size={args.size})")
    for field, counts in summary["per_attribute"].items():
        shown = ", ".join(f"{name}={count}" for name, count in sorted(counts.items()))
        print(f"  {field}: {shown}")
    return 0


def cmd_train(args) -> int:
    if args.resume is not None:
        ck = Checkpoint.load(args.resume)
        model_cfg, train_cfg, codec_cfg = ck.model_cfg, ck.train_cfg, ck.codec_cfg
        settings = None
    else:
        overrides = {
            "train": {
                "objective": args.objective,
                "seed": args.seed if args.seed is not None else None,
                "batch_size": args.batch_size,
                "max_steps": args.max_steps,
                "base_lr": args.lr,
            }
        }
        settings = build_settings(args.preset, args.config, overrides)
        model_cfg, train_cfg, codec_cfg = settings.model, settings.train, settings.codec

    args.out.mkdir(parents=True, exist_ok=True)
    if settings is not None:
        write_effective_ini(args.out / "effective.ini", settings)
    checkpoint = train(
        train_cfg, model_cfg, codec_cfg, args.data, args.out,
        resume=args.resume, init_from=args.init_from,
    )
    print(f"finished at step {checkpoint.step}; final checkpoint {checkpoint.path}")
    return 0


def _load_condition(path: Path, modality: str) -> np.ndarray:
    try:
        img = Image.open(path)
        arr = np.asarray(img)
    except OSError as exc:
        raise PersistenceError(f"cannot read condition {path}: {exc}") from exc
    if modality == "mask":
        if arr.ndim != 2:
            raise InputError(f"mask PNG must be single-channel labels, got shape {arr.shape}")
        if arr.max(initial=0) >= toydata.NUM_CLASSES:
            raise InputError(f"mask labels must be < {toydata.NUM_CLASSES}")
        return arr.astype(np.uint8)
    if arr.ndim != 2:
        raise InputError(f"sketch PNG must be bilevel, got shape {arr.shape}")
    return (arr > 0).astype(np.uint8)


def _parse_caption(text: str) -> torch.Tensor:
    names = [part for part in text.split() if part]
    ids = [toydata.token_id(name) for name in names]
    return torch.tensor([ids], dtype=torch.long) if ids else torch.zeros((1, 1), dtype=torch.long)


def cmd_sample(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    ck = Checkpoint.load(args.ckpt)
    model = ck.build_model(use_ema=True)
    model.eval()
    codec = make_codec(ck.codec_cfg)

    kind = CLI_SAMPLER_KINDS[args.sampler]
    modality_flag = 0 if args.modality == "mask" else 1
    raster = _load_condition(args.condition, args.modality)
    z_c = encode_condition(codec, raster, modality_flag).unsqueeze(0)
    caption = model.encode_caption(_parse_caption(args.caption))
    guidance = GuidanceConfig.for_model(model, args.cfg_scale, null_spatial=args.spatial_cfg)
    sched = make_linear_schedule(ck.train_cfg.timesteps, ck.train_cfg.beta_start, ck.train_cfg.beta_end)
    modality = torch.tensor([modality_flag], dtype=torch.long)

    if args.grid < 1:
        raise UsageError(f"--grid must be positive, got {args.grid}")
    images = []
    with torch.no_grad():
        for i in range(args.grid):
            cfg = SamplerConfig(kind=kind, steps=args.steps, eta=args.eta, seed=seed + i,
                                clip_x0=args.clip_x0)
            latent = sample(model, z_c, caption, modality, guidance, cfg,
                            sched=sched, objective=ck.train_cfg.objective)
            images.append(float_to_image(codec.decode(latent)[0]))

    side = images[0].shape[0]
    cols = math.ceil(math.sqrt(len(images)))
    rows = math.ceil(len(images) / cols)
    canvas = np.zeros((rows * side, cols * side, 3), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        canvas[r * side:(r + 1) * side, c * side:(c + 1) * side] = img
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(args.out, format="PNG")
    print(f"wrote {args.out} ({len(images)} sample{'s' if len(images) > 1 else ''}, seed={seed})")
    return 0


def cmd_eval(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    ck = Checkpoint.load(args.ckpt)
    if args.sampler is None:
        kind = "rfm_euler" if ck.train_cfg.objective == "rfm" else "ddim"
    else:
        kind = CLI_SAMPLER_KINDS[args.sampler]
    cfg = SamplerConfig(kind=kind, steps=args.steps, seed=seed, clip_x0=args.clip_x0)

    out_dir = args.out if args.out is not None else args.ckpt.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate(ck, args.data, cfg, args.n, omega=args.cfg_scale,
                      null_spatial=args.spatial_cfg,
                      csv_path=out_dir / "eval_samples.csv")
    report.save(out_dir / "eval_report.txt")
    print(f"n={report.n_samples} ssim={report.ssim:.4f} "
          f"pixel_accuracy={report.pixel_accuracy:.4f} miou={report.miou:.4f}")
    print(f"report written to {out_dir / 'eval_report.txt'}")
    return 0


def cmd_inspect(args) -> int:
    if args.ckpt is not None:
        ck = Checkpoint.load(args.ckpt)
        n_params = sum(t.numel() for t in ck.model_state.values())
        print(f"checkpoint: {args.ckpt}")
        print(f"step: {ck.step}")
        print(f"objective: {ck.train_cfg.objective}")
        print(f"parameters: {n_params}")
        print(f"model config: {json.dumps(ck.model_cfg.__dict__, sort_keys=True)}")
        print(f"codec config: {json.dumps(ck.codec_cfg.__dict__, sort_keys=True)}")
        if args.tensors:
            for name in sorted(ck.model_state):
                t = ck.model_state[name]
                print(f"  {name} {tuple(t.shape)} {str(t.dtype).removeprefix('torch.')}")
    else:
        settings: RunSettings = build_settings(args.preset, args.config, None)
        print(f"preset: {args.preset}")
        print(f"parameters: {count_parameters(settings.model)}")
        print(f"model config: {json.dumps(settings.model.__dict__, sort_keys=True)}")
        print(f"codec config: {json.dumps(settings.codec.__dict__, sort_keys=True)}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, PersistenceError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
