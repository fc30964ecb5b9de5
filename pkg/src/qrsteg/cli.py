"""Command-line interface: ``qrsteg {encode,decode,simulate,train,eval}``.

Exit codes: 0 success, 1 the message could not be recovered, 2 bad usage or input.
Every command writes a JSON manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import __version__
from . import objectives as obj
from .config import RunConfig
from .distortion import DistortionConfig, DistortionSpec, apply, sample_spec
from .errors import FormatError, QRStegError
from .evaluation import evaluate, format_summary, parse_channels, plot_sweep, summarize, write_csv
from .model import StegoModel
from .qr_codec import decode_matrix, emr, encode_message, render
from .trainer import HostDataset, Trainer, load_checkpoint, load_image, quantize, save_image

MANIFEST_SCHEMA = 1

EXIT_OK, EXIT_DECODE_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def write_manifest(path: Path, command: str, argv: List[str], seed: Optional[int], config: Optional[RunConfig],
                   inputs: dict, outputs: dict, checkpoint: Optional[str] = None,
                   config_path: Optional[str] = None, extra: Optional[dict] = None) -> Path:
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "package_version": __version__,
        "command": command,
        "argv": argv,
        "seed": seed,
        "config_path": config_path,
        "checkpoint": checkpoint,
        "inputs": inputs,
        "outputs": outputs,
        "config": config.to_dict() if config is not None else None,
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _load_model(checkpoint: str) -> StegoModel:
    if not Path(checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint).model
    model.eval()
    return model


def _load_host(path: str, side: int) -> torch.Tensor:
    if not Path(path).is_file():
        raise UsageError(f"image not found: {path}")
    img = load_image(path)
    if img.shape[-2:] != (side, side):
        # the model works at a fixed resolution; resample the host to it
        pil = Image.open(path).convert("RGB").resize((side, side), Image.BICUBIC)
        img = torch.from_numpy(np.asarray(pil, dtype=np.float32) / 255.0).permute(2, 0, 1).contiguous()
    return img


# ---------------------------------------------------------------------------
# commands


def cmd_encode(args, argv) -> int:
    model = _load_model(args.checkpoint)
    cfg = model.cfg
    host = _load_host(args.host, cfg.image_side)
    mm = encode_message(args.message, cfg.qr_version)
    qr = render(mm, cfg.qr_module_px, cfg.image_side)
    with torch.no_grad():
        stego, _, residual = model.embed(host.unsqueeze(0), qr.unsqueeze(0))
    stego = quantize(stego)[0]
    out = Path(args.out)
    save_image(stego, out)
    psnr = obj.psnr(host, stego)
    ssim = float(obj.ssim_metric(host, stego))
    print(f"wrote {out}")
    print(f"PSNR {psnr:.3f} dB  SSIM {ssim:.4f}")
    print(f"residual tokens: mean {residual.mean().item():.4f}  std {residual.std().item():.4f}")
    write_manifest(_manifest_path(out), "encode", argv, None, load_checkpoint(args.checkpoint).config,
                   {"host": args.host, "message": args.message}, {"stego": str(out)}, args.checkpoint,
                   extra={"metrics": {"psnr": psnr, "ssim": ssim}})
    return EXIT_OK


def cmd_decode(args, argv) -> int:
    model = _load_model(args.checkpoint)
    cfg = model.cfg
    stego = _load_host(args.stego, cfg.image_side)
    with torch.no_grad():
        restored, _ = model.extract(stego.unsqueeze(0), args.seed)
    grid = model.read(restored)[0]
    message = decode_matrix(grid)
    stego_path = Path(args.stego)
    outputs, metrics = {}, {}
    if message is not None:
        print(message.decode("utf-8", errors="replace"))
        if args.truth is not None:
            metrics["match"] = message == args.truth.encode()
    else:
        print("decode failed: restored code is unreadable", file=sys.stderr)
        if args.truth is not None:
            metrics["emr"] = emr(grid, encode_message(args.truth, cfg.qr_version))
            print(f"EMR vs ground truth: {metrics['emr']:.3f}%", file=sys.stderr)
        restored_path = Path(args.restored_out) if args.restored_out else stego_path.with_name(
            stego_path.stem + "_restored.png")
        save_image(restored[0], restored_path)
        outputs["restored"] = str(restored_path)
        print(f"restored code saved to {restored_path}", file=sys.stderr)
    outputs["message"] = None if message is None else message.decode("utf-8", errors="replace")
    write_manifest(stego_path.with_name(stego_path.stem + ".decode.manifest.json"), "decode", argv, args.seed,
                   load_checkpoint(args.checkpoint).config, {"stego": args.stego}, outputs, args.checkpoint,
                   extra={"metrics": metrics})
    if message is None or metrics.get("match") is False:
        return EXIT_DECODE_FAILED
    return EXIT_OK


def _resolve_distortion(text: str, seed: int) -> DistortionSpec:
    """``none``, ``mixed``, a spec file (``key = value`` lines) or a run config file."""
    if text == "none":
        return DistortionSpec()
    if text == "mixed":
        return sample_spec(DistortionConfig(), seed)
    path = Path(text)
    if not path.is_file():
        raise UsageError(f"distortion must be 'none', 'mixed' or a file; {text!r} not found")
    body = path.read_text()
    if "[" in body.split("\n", 1)[0]:
        return sample_spec(RunConfig.load(path).distortion, seed)
    return DistortionSpec.from_text(body)


def cmd_simulate(args, argv) -> int:
    if not Path(args.inp).is_file():
        raise UsageError(f"image not found: {args.inp}")
    img = load_image(args.inp)
    spec = _resolve_distortion(args.distortion, args.seed)
    out = Path(args.out)
    save_image(apply(img, spec), out)
    print(f"wrote {out}")
    write_manifest(_manifest_path(out), "simulate", argv, args.seed, None,
                   {"image": args.inp, "distortion": args.distortion}, {"image": str(out)},
                   extra={"distortion_spec": spec.to_text()})
    return EXIT_OK


def _train_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.for_profile(args.profile)
    d = cfg.to_dict()
    if args.no_iqrt:
        d["model"]["iqrt_on"] = False
    if args.no_itf:
        d["model"]["itf_on"] = False
    if args.no_cross_attn:
        d["model"]["cross_attn_on"] = False
    if args.aacb_count is not None:
        d["model"]["aacb_count"] = args.aacb_count
    if args.iterations is not None:
        d["train"]["iterations"] = args.iterations
    if args.seed is not None:
        d["train"]["seed"] = args.seed
    return RunConfig.from_dict(d)


def cmd_train(args, argv) -> int:
    out = Path(args.out)
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config not found: {args.config}")
    state = None
    if args.resume:
        ckpt = out / "checkpoint.ckpt"
        if not ckpt.is_file():
            raise UsageError(f"--resume given but {ckpt} does not exist")
        state = load_checkpoint(ckpt)
        config = state.config
        if args.iterations is not None:
            config.train.iterations = args.iterations
    else:
        config = _train_config(args)
    trainer = Trainer(config, args.data, out, state)
    config.save(out / "config.ini")
    start = trainer.state.iteration
    records = trainer.run(progress=not args.quiet)
    if records:
        first, last = records[0]["loss"]["total"], records[-1]["loss"]["total"]
        print(f"iterations {start} -> {trainer.state.iteration}; total loss {first:.4f} -> {last:.4f}")
    write_manifest(out / "manifest.json", "train", argv, config.train.seed, config,
                   {"data": args.data, "resumed_from": start if args.resume else None},
                   {"checkpoint": str(trainer.checkpoint_path), "log": str(trainer.log_path),
                    "config": str(out / "config.ini")}, config_path=args.config)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    model = _load_model(args.checkpoint)
    config = load_checkpoint(args.checkpoint).config
    channels = parse_channels(args.channels)
    if not channels:
        raise UsageError("no channels given")
    ds = HostDataset(args.hosts, model.cfg.image_side, args.seed)
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    hosts = [ds.crop(0, i) for i in range(n)]
    ids = [ds.names[int(j)] for j in ds.order(0)[:n]]
    rows = evaluate(model, hosts, channels, config.distortion, seed=args.seed, reveal_seed=args.seed, image_ids=ids)
    out = Path(args.out)
    write_csv(rows, out)
    summary = summarize(rows)
    print(format_summary(summary))
    outputs = {"csv": str(out)}
    plot = out.with_suffix(".png")
    if plot_sweep(summary, channels, plot):
        outputs["plot"] = str(plot)
    write_manifest(_manifest_path(out), "eval", argv, args.seed, config,
                   {"hosts": args.hosts, "channels": args.channels}, outputs, args.checkpoint,
                   extra={"summary": summary})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qrsteg", description="Hide QR codes in images with an invertible flow.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="embed a message into a host image")
    p.add_argument("--host", required=True)
    p.add_argument("--message", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="recover the message from a stego image")
    p.add_argument("--stego", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed of the Gaussian residual draw")
    p.add_argument("--truth", help="expected message; reported as EMR on failure")
    p.add_argument("--restored-out", help="where to save the restored code on failure")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("simulate", help="apply a print/photo distortion to an image")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--distortion", default="mixed", help="'none', 'mixed', a spec file or a config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a folder of host images")
    p.add_argument("--config", help="INI run config; defaults to --profile")
    p.add_argument("--profile", choices=("desk", "paper"), default="paper")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.ckpt")
    p.add_argument("--no-iqrt", action="store_true")
    p.add_argument("--no-itf", action="store_true")
    p.add_argument("--no-cross-attn", action="store_true")
    p.add_argument("--aacb-count", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="encode, distort and decode over a host folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hosts", required=True)
    p.add_argument("--channels", default="none,mixed",
                   help="comma list: none, mixed, noise:S, jpeg:Q, blur:S, brightness:B, contrast:C, warp:F, tamper:R")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="evaluate at most this many hosts")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except (UsageError, QRStegError, FormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
