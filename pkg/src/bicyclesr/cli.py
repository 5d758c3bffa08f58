"""Command-line surface: train, degrade, sr, eval, sweep-noise."""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from typing import List, Optional

import numpy as np

from . import classical, dataio, trainer as trainer_mod
from .losses import LossWeights
from .optim import LrSchedule
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, desk_profile

_CONFIG_KEYS = {
    "profile",
    "scale",
    "batch_size",
    "hr_patch",
    "alpha",
    "beta",
    "eta",
    "gamma",
    "base_lr",
    "halve_every",
    "total_steps",
    "ablation",
    "seed",
    "hr_dir",
    "lr_dir",
    "checkpoint_every",
    "iterations",
    "g_width",
    "g_blocks",
    "r_width",
    "r_blocks",
    "r_residual_scale",
    "p_width_scale",
    "p_input_size",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
}

_INT_KEYS = {
    "scale",
    "batch_size",
    "hr_patch",
    "halve_every",
    "total_steps",
    "seed",
    "checkpoint_every",
    "iterations",
    "g_width",
    "g_blocks",
    "r_width",
    "r_blocks",
    "p_input_size",
}
_FLOAT_KEYS = {
    "alpha",
    "beta",
    "eta",
    "gamma",
    "base_lr",
    "r_residual_scale",
    "p_width_scale",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
}


def parse_config_file(path: str) -> dict:
    """key=value config; '#' comments; unknown keys rejected."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value
    return values


def build_train_config(values: dict) -> TrainConfig:
    values = dict(values)
    profile = values.pop("profile", "full")
    if profile not in ("full", "desk"):
        raise ValueError(f"profile must be 'full' or 'desk', got {profile!r}")
    kwargs = {}
    weights_kw = {}
    sched_kw = {}
    for key, raw in values.items():
        if key in _INT_KEYS:
            val = int(raw)
        elif key in _FLOAT_KEYS:
            val = float(raw)
        else:
            val = raw
        if key in ("alpha", "beta", "eta", "gamma"):
            weights_kw[key] = val
        elif key in ("base_lr", "halve_every", "total_steps"):
            sched_kw[key] = val
        else:
            kwargs[key] = val
    if weights_kw:
        kwargs["weights"] = LossWeights(**weights_kw)
    if sched_kw:
        kwargs["schedule"] = LrSchedule(**sched_kw)
    if profile == "desk":
        return desk_profile(**kwargs)
    return TrainConfig(**kwargs)


def _apply_flag_overrides(values: dict, args) -> dict:
    for key in ("scale", "ablation", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    return values


# -- subcommands ----------------------------------------------------------


def cmd_train(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    _apply_flag_overrides(values, args)
    try:
        cfg = build_train_config(values)
        t = trainer_mod.Trainer(cfg)
        t.attach_data()  # fail before any output on bad datasets
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    log_path = args.log or (os.path.join(args.out, "train.log") if args.out else None)
    ckpt_path = args.checkpoint or (os.path.join(args.out, "final.ckpt") if args.out else None)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    t.run(log_path=log_path, checkpoint_path=ckpt_path)
    if ckpt_path:
        trainer_mod.save_checkpoint(ckpt_path, t.to_checkpoint())
    return 0


def _load_images(in_dir: str):
    files = sorted(f for f in os.listdir(in_dir) if f.lower().endswith(".png"))
    if not files:
        raise ValueError(f"no PNG files in {in_dir}")
    return files


def _crop_to_multiple(arr: np.ndarray, scale: int, name: str) -> np.ndarray:
    h, w = arr.shape[:2]
    ch, cw = h - h % scale, w - w % scale
    if (ch, cw) != (h, w):
        warnings.warn(f"{name}: cropped {h}x{w} to {ch}x{cw} (multiple of {scale})")
    return arr[:ch, :cw]


def cmd_degrade(args) -> int:
    mode = args.mode
    scale = args.scale or 4
    g = None
    if mode == "learned":
        if not args.checkpoint:
            print("error: learned mode requires --checkpoint", file=sys.stderr)
            return 1
        ckpt = trainer_mod.load_checkpoint(args.checkpoint)
        nets = trainer_mod.nets_from_checkpoint(ckpt)
        if nets.g is None:
            print("error: checkpoint has no degradation network", file=sys.stderr)
            return 1
        if args.scale and nets.g.scale != args.scale:
            print(
                f"error: checkpoint scale {nets.g.scale} does not match --scale {args.scale}",
                file=sys.stderr,
            )
            return 1
        g = nets.g
        scale = g.scale
    os.makedirs(args.out, exist_ok=True)
    for name in _load_images(args.in_dir):
        img = dataio.load_image(os.path.join(args.in_dir, name)).float_data()
        img = _crop_to_multiple(img, scale, name)
        if mode == "bicubic":
            lr = classical.bicubic_resize(img, scale, "down")
        elif mode == "nearest":
            lr = classical.nearest_resize(img, scale, "down")
        else:
            with no_grad():
                out = g(dataio.to_tensor([img]))
            lr = out.data[0].transpose(1, 2, 0)
        dataio.save_image(os.path.join(args.out, name), dataio.ImageBuffer.from_float(lr))
    return 0


def tiled_super_resolve(r_net, img: np.ndarray, tile: int = 48, overlap: int = 8) -> np.ndarray:
    """Apply R tile-wise with linear-ramp blending in the overlap regions."""
    h, w = img.shape[:2]
    scale = r_net.scale
    th, tw = min(tile, h), min(tile, w)
    stride_h, stride_w = max(th - overlap, 1), max(tw - overlap, 1)

    def starts(total, t, stride):
        s = list(range(0, max(total - t, 0) + 1, stride))
        if s[-1] != total - t:
            s.append(total - t)
        return s

    def ramp(n):
        r = np.minimum(np.arange(n) + 1, n - np.arange(n))
        r = np.minimum(r, overlap + 1).astype(np.float64)
        return r / (overlap + 1)

    acc = np.zeros((h * scale, w * scale, img.shape[2]), dtype=np.float64)
    wacc = np.zeros((h * scale, w * scale, 1), dtype=np.float64)
    wy = ramp(th * scale)[:, None]
    wx = ramp(tw * scale)[None, :]
    tile_weight = (wy * wx)[..., None]
    for ys in starts(h, th, stride_h):
        for xs in starts(w, tw, stride_w):
            patch = img[ys : ys + th, xs : xs + tw]
            with no_grad():
                out = r_net(dataio.to_tensor([patch]))
            sr = out.data[0].transpose(1, 2, 0).astype(np.float64)
            acc[ys * scale : (ys + th) * scale, xs * scale : (xs + tw) * scale] += sr * tile_weight
            wacc[ys * scale : (ys + th) * scale, xs * scale : (xs + tw) * scale] += tile_weight
    return np.clip(acc / wacc, 0.0, 1.0).astype(np.float32)


def cmd_sr(args) -> int:
    ckpt = trainer_mod.load_checkpoint(args.checkpoint)
    nets = trainer_mod.nets_from_checkpoint(ckpt)
    os.makedirs(args.out, exist_ok=True)
    for name in _load_images(args.in_dir):
        img = dataio.load_image(os.path.join(args.in_dir, name)).float_data()
        sr = tiled_super_resolve(nets.r, img)
        dataio.save_image(os.path.join(args.out, name), dataio.ImageBuffer.from_float(sr))
    return 0


def cmd_eval(args) -> int:
    scale = args.scale or 4
    report = classical.evaluate(args.gt, args.sr, border=scale)
    csv = report.to_csv()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


def cmd_sweep_noise(args) -> int:
    sigmas = [float(s) for s in args.sigmas.split(",")]
    scale = args.scale or 4
    r_net = None
    if args.checkpoint:
        nets = trainer_mod.nets_from_checkpoint(trainer_mod.load_checkpoint(args.checkpoint))
        r_net = nets.r
        if args.scale and r_net.scale != scale:
            print(
                f"error: checkpoint scale {r_net.scale} does not match --scale {scale}",
                file=sys.stderr,
            )
            return 1
        scale = r_net.scale
    files = _load_images(args.in_dir)
    lines = ["sigma_percent,baseline_psnr,baseline_ssim,learned_psnr,learned_ssim"]
    for sigma in sigmas:
        rng = np.random.default_rng(args.seed or 0)
        base_p, base_s, learn_p, learn_s = [], [], [], []
        for name in files:
            hr = dataio.load_image(os.path.join(args.in_dir, name)).float_data()
            hr = _crop_to_multiple(hr, scale, name)
            lr = classical.bicubic_resize(hr, scale, "down")
            lr = classical.add_gaussian_noise(lr, sigma, rng)
            up = classical.resize_to(lr, hr.shape[0], hr.shape[1])
            p, s = classical.score_pair(hr, up, border=scale)
            base_p.append(p)
            base_s.append(s)
            if r_net is not None:
                sr = tiled_super_resolve(r_net, lr)
                p, s = classical.score_pair(hr, sr, border=scale)
                learn_p.append(p)
                learn_s.append(s)
        row = [f"{sigma:g}", f"{np.mean(base_p):.4f}", f"{np.mean(base_s):.4f}"]
        if r_net is not None:
            row += [f"{np.mean(learn_p):.4f}", f"{np.mean(learn_s):.4f}"]
        else:
            row += ["", ""]
        lines.append(",".join(row))
    csv = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "noise_sweep.csv"), "w", encoding="utf-8") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


# -- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bicyclesr", description="Unsupervised degradation-learning super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--scale", type=int, choices=(2, 4), default=None)
        sp.add_argument("--ablation", choices=trainer_mod.ABLATIONS, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--in", dest="in_dir", default=None, metavar="DIR")
        sp.add_argument("--out", default=None, metavar="DIR")

    sp = sub.add_parser("train", help="run the iterative training procedure")
    common(sp)
    sp.add_argument("--log", default=None, help="training log path")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("degrade", help="downscale images (learned or classical)")
    common(sp)
    sp.add_argument("--mode", choices=("learned", "bicubic", "nearest"), default="learned")
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("sr", help="super-resolve images with the reconstruction net")
    common(sp)
    sp.set_defaults(func=cmd_sr)

    sp = sub.add_parser("eval", help="PSNR/SSIM report over matched image pairs")
    common(sp)
    sp.add_argument("--gt", required=True, help="ground-truth directory")
    sp.add_argument("--sr", required=True, help="super-resolved directory")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-noise", help="metric sweep over Gaussian noise levels")
    common(sp)
    sp.add_argument("--sigmas", default="1,2,3,4,5,6,7", help="comma-separated noise percents")
    sp.set_defaults(func=cmd_sweep_noise)

    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
