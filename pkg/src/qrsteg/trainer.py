"""Joint training of transition, fusion and flow with distortion in the loop.

Every random draw in a step (host crops, QR messages, distortion spec, reveal
noise) is derived from ``(seed, iteration)``, so a resumed run only needs the
parameters, optimizer moments and the iteration counter to continue exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import objectives as obj
from .config import RunConfig
from .distortion import apply as apply_distortion, sample_spec
from .errors import EmptyDataset, FormatError, NonFiniteLoss, NonFiniteValue
from .iqrt import transition_loss
from .model import StegoModel
from .qr_codec import ALPHANUMERIC, ModuleMatrix, encode_message, max_payload, render

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# stream ids for per-step seed derivation
_HOSTS, _QRS, _DISTORT, _REVEAL = range(4)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """Read an image file as a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path: Union[str, Path]) -> None:
    """Write a (3, H, W) tensor as an 8-bit PNG (clamped, rounded)."""
    arr = quantize(img).permute(1, 2, 0).cpu().numpy()
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)


def quantize(img: torch.Tensor) -> torch.Tensor:
    return torch.round(img.detach().clamp(0, 1) * 255) / 255


class HostDataset:
    """Folder of host images served as deterministic random crops.

    Unreadable files and files smaller than ``image_side`` are skipped and
    counted in ``skipped``.
    """

    def __init__(self, dir_path: Union[str, Path], image_side: int, seed: int = 0):
        self.image_side = image_side
        self.seed = seed
        self.images: List[torch.Tensor] = []
        self.names: List[str] = []
        self.skipped = 0
        root = Path(dir_path)
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if root.is_dir() else []
        for path in files:
            try:
                img = load_image(path)
            except (UnidentifiedImageError, OSError, ValueError):
                self.skipped += 1
                continue
            if min(img.shape[-2:]) < image_side:
                self.skipped += 1
                continue
            self.images.append(img)
            self.names.append(path.name)
        if self.skipped:
            warnings.warn(f"skipped {self.skipped} unreadable or undersized images in {root}")
        if not self.images:
            raise EmptyDataset(f"no usable host images in {root}")

    def __len__(self) -> int:
        return len(self.images)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng(derive_seed(self.seed, _HOSTS, epoch)).permutation(len(self))

    def crop(self, epoch: int, position: int) -> torch.Tensor:
        idx = int(self.order(epoch)[position])
        img = self.images[idx]
        h, w = img.shape[-2:]
        rng = np.random.default_rng(derive_seed(self.seed, _HOSTS, epoch, position))
        y = int(rng.integers(0, h - self.image_side + 1))
        x = int(rng.integers(0, w - self.image_side + 1))
        return img[:, y : y + self.image_side, x : x + self.image_side]

    def sample(self, index: int) -> torch.Tensor:
        """Crop number ``index`` of the endless epoch-by-epoch stream."""
        return self.crop(index // len(self), index % len(self))

    def batch(self, iteration: int, batch_size: int) -> torch.Tensor:
        start = iteration * batch_size
        return torch.stack([self.sample(start + i) for i in range(batch_size)])

    def epoch_of(self, iteration: int, batch_size: int) -> int:
        return (iteration * batch_size) // len(self)


def ingest_hosts(dir_path, image_side: int, seed: int = 0) -> Iterator[torch.Tensor]:
    """Endless stream of crops; one epoch is one pass over the files."""
    ds = HostDataset(dir_path, image_side, seed)
    index = 0
    while True:
        yield ds.sample(index)
        index += 1


def random_message(rng: np.random.Generator, version: int) -> str:
    chars = ALPHANUMERIC.decode()
    return "".join(chars[i] for i in rng.integers(0, len(chars), max_payload(version, "alphanumeric")))


def generate_qr_batch(count: int, version: int, seed: int, out_size: Optional[int] = None,
                      module_px: int = 5) -> List[Tuple[str, ModuleMatrix, torch.Tensor]]:
    """Random full-capacity alphanumeric messages with their symbols and renders."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        msg = random_message(rng, version)
        mm = encode_message(msg, version)
        out.append((msg, mm, render(mm, module_px, out_size)))
    return out


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(epoch: int, cfg=None) -> float:
    lr0, decay, floor = (1e-4, 0.9, 1e-5) if cfg is None else (cfg.lr_initial, cfg.lr_decay, cfg.lr_floor)
    return max(lr0 * decay**epoch, floor)


def make_optimizer(model: StegoModel, cfg) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr_initial, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


@dataclass
class TrainState:
    config: RunConfig
    model: StegoModel
    optimizer: torch.optim.Optimizer
    iteration: int = 0

    @classmethod
    def fresh(cls, config: RunConfig) -> "TrainState":
        model = StegoModel(config.model, seed=config.train.seed)
        return cls(config, model, make_optimizer(model, config.train))


def compute_losses(model: StegoModel, hosts: torch.Tensor, qr_imgs: torch.Tensor, qr_truth,
                   config: RunConfig, spec, reveal_seed: int) -> Dict[str, torch.Tensor]:
    mcfg = config.model
    stego, qr_star, _ = model.embed(hosts, qr_imgs)
    distorted = apply_distortion(stego, spec)
    restored, _ = model.extract(distorted, reveal_seed)
    comps = {
        "l1": obj.l1_loss(hosts, stego),
        "ssim": obj.ssim_loss(hosts, stego),
        "lpips": obj.lpips_loss(hosts, stego),
        "qr": obj.qr_loss(restored, qr_imgs),
        "transition": transition_loss(qr_star, qr_truth, mcfg.scan_threshold, mcfg.scan_kernel),
    }
    comps["total"] = obj.total_loss(comps, config.loss)
    return comps


def train_step(batch_hosts: torch.Tensor, batch_qrs, state: TrainState, lr: Optional[float] = None) -> Dict[str, float]:
    """One optimisation step; ``batch_qrs`` is a list of ``(message, ModuleMatrix, image)``."""
    config, model, opt = state.config, state.model, state.optimizer
    tcfg = config.train
    it = state.iteration
    spec = sample_spec(config.distortion, derive_seed(tcfg.seed, _DISTORT, it))
    reveal_seed = derive_seed(tcfg.seed, _REVEAL, it)
    qr_imgs = torch.stack([q[2] for q in batch_qrs])
    truth = [q[1] for q in batch_qrs]

    model.train()
    try:
        comps = compute_losses(model, batch_hosts, qr_imgs, truth, config, spec, reveal_seed)
    except NonFiniteValue as exc:
        raise NonFiniteLoss(str(exc), {"iteration": it, "spec": spec.to_text(), "reveal_seed": reveal_seed}) from exc
    if not torch.isfinite(comps["total"]):
        raise NonFiniteLoss(
            f"non-finite loss at iteration {it}",
            {"iteration": it, "spec": spec.to_text(), "reveal_seed": reveal_seed,
             "components": {k: float(v) for k, v in comps.items()}},
        )
    if lr is not None:
        for group in opt.param_groups:
            group["lr"] = lr
    opt.zero_grad(set_to_none=True)
    comps["total"].backward()
    params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
    if tcfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip)
    opt.step()
    state.iteration += 1
    if config.model.itf_on:
        cond = model.itf.condition_number()
        if cond > tcfg.cond_limit:
            raise NonFiniteLoss(f"fusion matrix condition number {cond:.3g} exceeds limit",
                                {"iteration": it, "cond": cond})
    return {k: float(v.detach()) for k, v in comps.items()}


class Trainer:
    """Drives ``train_step`` over a host folder, logging and checkpointing."""

    def __init__(self, config: RunConfig, data_dir, out_dir, state: Optional[TrainState] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dataset = HostDataset(data_dir, config.model.image_side, config.train.seed)
        self.state = state or TrainState.fresh(config)
        self.log_path = self.out_dir / "train_log.ndjson"

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.ckpt"

    def qr_batch(self, iteration: int):
        m = self.config.model
        return generate_qr_batch(self.config.train.batch_size, m.qr_version,
                                 derive_seed(self.config.train.seed, _QRS, iteration), m.image_side, m.qr_module_px)

    def step(self) -> dict:
        tcfg = self.config.train
        it = self.state.iteration
        lr = lr_schedule(self.dataset.epoch_of(it, tcfg.batch_size), tcfg)
        hosts = self.dataset.batch(it, tcfg.batch_size)
        t0 = time.perf_counter()
        losses = train_step(hosts, self.qr_batch(it), self.state, lr)
        return {"iteration": it, "lr": lr, "loss": losses, "wall_time": time.perf_counter() - t0}

    def run(self, until: Optional[int] = None, progress: bool = False) -> List[dict]:
        until = self.config.train.iterations if until is None else until
        records = []
        self._trim_log(self.state.iteration)
        with open(self.log_path, "a") as fh:
            while self.state.iteration < until:
                rec = self.step()
                records.append(rec)
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
                if progress and (rec["iteration"] % 25 == 0 or self.state.iteration == until):
                    print(f"iter {rec['iteration']:5d}  lr {rec['lr']:.2e}  total {rec['loss']['total']:.4f}  "
                          f"qr {rec['loss']['qr']:.4f}  l1 {rec['loss']['l1']:.4f}", flush=True)
                every = self.config.train.checkpoint_every
                if every and self.state.iteration % every == 0:
                    save_checkpoint(self.state, self.checkpoint_path)
        save_checkpoint(self.state, self.checkpoint_path)
        return records

    def _trim_log(self, iteration: int) -> None:
        """Drop log lines at or past ``iteration`` so a resumed run does not duplicate them."""
        if not self.log_path.exists():
            return
        keep = [ln for ln in self.log_path.read_text().splitlines()
                if ln.strip() and json.loads(ln)["iteration"] < iteration]
        self.log_path.write_text("".join(ln + "\n" for ln in keep))


def read_log(path) -> List[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: MAGIC | u64 header length | JSON header | payload
# every tensor is stored as little-endian float32; the header records name,
# shape, offset and byte length of each entry plus a CRC32 of the payload.

MAGIC = b"QRSTEGCK"
FORMAT_VERSION = 1


def _entries(state: TrainState):
    named = dict(state.model.state_dict())
    names = {id(p): n for n, p in state.model.named_parameters()}
    opt_meta = {"param_groups": [], "state": {}}
    for group in state.optimizer.param_groups:
        meta = {k: v for k, v in group.items() if k != "params"}
        meta["betas"] = list(meta["betas"])
        meta["params"] = [names[id(p)] for p in group["params"]]
        opt_meta["param_groups"].append(meta)
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            pname = names[id(p)]
            opt_meta["state"][pname] = {"step": float(st["step"])}
            named[f"optim.{pname}.exp_avg"] = st["exp_avg"]
            named[f"optim.{pname}.exp_avg_sq"] = st["exp_avg_sq"]
    return named, opt_meta


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> None:
    tensors, opt_meta = _entries(state)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32", "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "rng": {"seed": state.config.train.seed, "next_iteration": state.iteration},
        "optimizer": opt_meta,
        "entries": entries,
        "payload_crc32": zlib.crc32(payload),
    }
    raw = json.dumps(header).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(raw).to_bytes(8, "little"))
        fh.write(raw)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[str, torch.Tensor]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    try:
        n = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
        start = len(MAGIC) + 8
        header = json.loads(blob[start : start + n])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError("corrupt checkpoint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"checkpoint format {header.get('format_version')} != {FORMAT_VERSION}")
    payload = blob[start + n :]
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise FormatError("checkpoint payload is truncated or corrupt")
    tensors = {}
    for e in header["entries"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    header, tensors = read_checkpoint(path)
    config = RunConfig.from_dict(header["config"])
    model = StegoModel(config.model, seed=config.train.seed)
    model_sd = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    model.load_state_dict(model_sd)
    opt = make_optimizer(model, config.train)
    params = dict(model.named_parameters())
    meta = header["optimizer"]
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        g["betas"] = tuple(g["betas"])
        g["params"] = [params[name] for name in g["params"]]
        groups.append(g)
    for group, saved in zip(opt.param_groups, groups):
        group.update({k: v for k, v in saved.items() if k != "params"})
    for pname, st in meta["state"].items():
        p = params[pname]
        opt.state[p] = {
            "step": torch.tensor(st["step"], dtype=torch.float32),
            "exp_avg": tensors[f"optim.{pname}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"optim.{pname}.exp_avg_sq"].clone(),
        }
    return TrainState(config, model, opt, header["iteration"])
