"""Train only the reveal path (QR reconstruction loss, no host losses, no distortion).

Measures how fast the conceal/reveal round trip learns to carry a QR code at a given
profile, isolated from the imperceptibility trade-off.

    python scripts/reveal_probe.py data/toy_hosts --steps 400 --out-init 0.02
"""

import argparse
import time

import torch

from qrsteg.config import RunConfig
from qrsteg.model import StegoModel
from qrsteg.qr_codec import decode_matrix
from qrsteg.trainer import HostDataset, generate_qr_batch


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("hosts")
    ap.add_argument("--profile", default="desk")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out-init", type=float, default=0.0,
                    help="std of phi/eta output weights; 0 keeps the zero initialisation")
    ap.add_argument("--every", type=int, default=25)
    args = ap.parse_args()

    cfg = RunConfig.for_profile(args.profile)
    m = cfg.model
    model = StegoModel(m, seed=0)
    if args.out_init:
        gen = torch.Generator().manual_seed(1)
        with torch.no_grad():
            for block in model.attnflow.blocks:
                for sub in (block.phi, block.eta):
                    sub.out.weight.copy_(torch.randn(sub.out.weight.shape, generator=gen) * args.out_init)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=args.lr, weight_decay=cfg.train.weight_decay)
    data = HostDataset(args.hosts, m.image_side, seed=0)

    start = time.perf_counter()
    for it in range(args.steps + 1):
        hosts = data.batch(it, args.batch)
        codes = generate_qr_batch(args.batch, m.qr_version, it, m.image_side, m.qr_module_px)
        qr = torch.stack([c[2] for c in codes])
        stego, _, _ = model.embed(hosts, qr)
        restored, _ = model.extract(stego, it)
        loss = (restored - qr).abs().mean()
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
        opt.step()
        if it % args.every == 0:
            ok = sum(decode_matrix(g) == c[0].encode() for g, c in zip(model.read(restored.detach()), codes))
            host_l1 = (stego - hosts).abs().mean().item()
            print(f"iter {it:4d}  qr_l1 {loss.item():.4f}  host_l1 {host_l1:.4f}  decoded {ok}/{args.batch}  "
                  f"{time.perf_counter() - start:.0f}s", flush=True)


if __name__ == "__main__":
    main()
