"""Encode -> distort -> decode evaluation over a set of hosts and channels."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import objectives as obj
from .distortion import DistortionConfig, DistortionSpec, apply, apply_tamper, sample_spec
from .model import StegoModel
from .qr_codec import decode_matrix, emr, encode_message, recovered, render
from .trainer import derive_seed, quantize, random_message

CSV_COLUMNS = ("image_id", "psnr", "ssim", "lpips", "emr", "tra_flag", "distortion_spec_id")


@dataclass
class Channel:
    """A named distortion channel; ``level`` is the swept parameter, if any."""

    name: str
    kind: str
    level: Optional[float] = None

    def __call__(self, img: torch.Tensor, seed: int, dcfg: DistortionConfig) -> torch.Tensor:
        if self.kind == "none":
            return img
        if self.kind == "tamper":
            return apply_tamper(img, self.level, seed)
        if self.kind == "mixed":
            return apply(img, sample_spec(dcfg, seed))
        spec = DistortionSpec(noise_seed=seed, blur_kernel=dcfg.blur_kernel)
        if self.kind == "noise":
            spec.noise_sigma = self.level
        elif self.kind == "jpeg":
            spec.apply_jpeg, spec.jpeg_quality = True, int(self.level)
        elif self.kind == "blur":
            spec.blur_sigma = self.level
        elif self.kind == "brightness":
            spec.brightness = self.level
        elif self.kind == "contrast":
            spec.contrast = self.level
        elif self.kind == "warp":
            f = self.level
            spec.warp = (f, f, -f, f, -f, -f, f, -f)
        return apply(img, spec)


CHANNEL_KINDS = ("none", "noise", "jpeg", "blur", "brightness", "contrast", "warp", "tamper", "mixed")


def parse_channel(text: str) -> Channel:
    """``none``, ``mixed`` or ``kind:level`` such as ``noise:0.1`` or ``jpeg:40``."""
    text = text.strip()
    kind, _, level = text.partition(":")
    if kind not in CHANNEL_KINDS:
        raise ValueError(f"unknown channel {text!r}; kinds are {CHANNEL_KINDS}")
    if kind in ("none", "mixed"):
        return Channel(text, kind)
    if not level:
        raise ValueError(f"channel {kind!r} needs a level, e.g. {kind}:0.1")
    return Channel(text, kind, float(level))


def parse_channels(text: str) -> List[Channel]:
    return [parse_channel(t) for t in text.split(",") if t.strip()]


@torch.no_grad()
def evaluate(model: StegoModel, hosts: Sequence[torch.Tensor], channels: Sequence[Channel],
             dcfg: Optional[DistortionConfig] = None, seed: int = 0, reveal_seed: int = 0,
             image_ids: Optional[Sequence[str]] = None) -> List[dict]:
    """One row per host x channel.  Stego images are quantised to 8 bits before distortion."""
    dcfg = dcfg or DistortionConfig()
    model.eval()
    cfg = model.cfg
    rng = np.random.default_rng(derive_seed(seed, 99))
    rows = []
    for i, host in enumerate(hosts):
        image_id = image_ids[i] if image_ids else f"{i:04d}"
        message = random_message(rng, cfg.qr_version)
        mm = encode_message(message, cfg.qr_version)
        qr = render(mm, cfg.qr_module_px, cfg.image_side)
        stego, _, _ = model.embed(host.unsqueeze(0), qr.unsqueeze(0))
        stego = quantize(stego)
        quality = {
            "psnr": obj.psnr(host.unsqueeze(0), stego),
            "ssim": float(obj.ssim_metric(host.unsqueeze(0), stego)),
            "lpips": float(obj.lpips_loss(host.unsqueeze(0), stego)),
        }
        for ch in channels:
            distorted = ch(stego, derive_seed(seed, i, zlib.crc32(ch.name.encode())), dcfg)
            restored, _ = model.extract(distorted, reveal_seed)
            grid = model.read(restored)[0]
            ok = recovered(decode_matrix(grid), message)
            rows.append({"image_id": image_id, **quality, "emr": emr(grid, mm), "tra_flag": int(ok),
                         "distortion_spec_id": ch.name})
    return rows


def summarize(rows: Sequence[dict]) -> Dict[str, dict]:
    out: Dict[str, dict] = {}
    for name in dict.fromkeys(r["distortion_spec_id"] for r in rows):
        sel = [r for r in rows if r["distortion_spec_id"] == name]
        out[name] = {
            "n": len(sel),
            "psnr": float(np.mean([r["psnr"] for r in sel])),
            "ssim": float(np.mean([r["ssim"] for r in sel])),
            "lpips": float(np.mean([r["lpips"] for r in sel])),
            "tra": float(np.mean([r["tra_flag"] for r in sel])),
            "emr": float(np.mean([r["emr"] for r in sel])),
        }
    return out


def format_summary(summary: Dict[str, dict]) -> str:
    lines = [f"{'channel':<16} {'n':>4} {'PSNR':>8} {'SSIM':>7} {'LPIPS':>7} {'TRA':>6} {'EMR%':>7}"]
    for name, s in summary.items():
        lines.append(f"{name:<16} {s['n']:>4} {s['psnr']:>8.3f} {s['ssim']:>7.4f} {s['lpips']:>7.4f} "
                     f"{s['tra']:>6.3f} {s['emr']:>7.3f}")
    return "\n".join(lines)


def write_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})


def plot_sweep(summary: Dict[str, dict], channels: Sequence[Channel], path) -> bool:
    """TRA and EMR against the level of every swept channel kind; False if nothing to plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kinds = {}
    for ch in channels:
        if ch.level is not None:
            kinds.setdefault(ch.kind, []).append(ch)
    if not kinds:
        return False
    fig, (ax_tra, ax_emr) = plt.subplots(1, 2, figsize=(9, 3.5))
    for kind, chs in kinds.items():
        chs = sorted(chs, key=lambda c: c.level)
        xs = [c.level for c in chs]
        ax_tra.plot(xs, [summary[c.name]["tra"] for c in chs], marker="o", label=kind)
        ax_emr.plot(xs, [summary[c.name]["emr"] for c in chs], marker="o", label=kind)
    ax_tra.set_xlabel("distortion level")
    ax_tra.set_ylabel("TRA")
    ax_emr.set_xlabel("distortion level")
    ax_emr.set_ylabel("EMR (%)")
    ax_tra.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True
