"""Build a small host-image folder from scikit-image's bundled sample photos.

    python scripts/make_toy_hosts.py data/toy_hosts --count 32 --side 96
    python scripts/make_toy_hosts.py data/toy_heldout --count 16 --side 96 --seed 1
"""

import argparse
from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image

SOURCES = [
    "astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "hubble_deep_field",
    "retina", "colorwheel", "cat", "camera", "brick", "grass", "gravel", "moon", "coins", "clock",
]


def load_sources():
    out = []
    for name in SOURCES:
        try:
            img = getattr(skimage.data, name)()
        except Exception:  # some samples need a download
            continue
        img = np.asarray(img)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        out.append(img[..., :3].astype(np.uint8))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("--count", type=int, default=32)
    ap.add_argument("--side", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    sources = load_sources()
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        src = sources[int(rng.integers(len(sources)))]
        # crop a window 1-3x the target side, then downscale so content varies in scale
        span = int(min(rng.integers(args.side, 3 * args.side + 1), *src.shape[:2]))
        y = int(rng.integers(0, src.shape[0] - span + 1))
        x = int(rng.integers(0, src.shape[1] - span + 1))
        tile = Image.fromarray(src[y : y + span, x : x + span]).resize((args.side, args.side), Image.BICUBIC)
        tile.save(args.out / f"host_{i:03d}.png")
    print(f"wrote {args.count} images to {args.out}")


if __name__ == "__main__":
    main()
