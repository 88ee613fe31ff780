"""Independent Monte-Carlo simulation of the random-blob mask algorithm.

Pins the reference statistics used by the mask tests: mean visible fraction
(with its standard error) and the blob-count histogram.
"""
import argparse
import json

import numpy as np


def blob_mask(h, w, rng, max_blobs=4, iter_min=2, iter_max=7):
    mask = np.zeros((h, w), dtype=np.uint8)
    num_blobs = rng.integers(1, max_blobs + 1)
    for _ in range(num_blobs):
        num_iters = rng.integers(iter_min, iter_max + 1)
        x0, y0 = rng.integers(0, w), rng.integers(0, h)
        mask[y0, x0] = 1
        frontier = [(y0, x0)]
        for _ in range(num_iters):
            nxt = []
            for y, x in frontier:
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and rng.random() > 0.5:
                        mask[ny, nx] = 1
                        nxt.append((ny, nx))
            frontier = nxt
    return mask, num_blobs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--count", type=int, default=10000)
    ap.add_argument("--size", type=int, nargs=2, default=[32, 32])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    h, w = args.size
    fracs, blobs = [], []
    for _ in range(args.count):
        m, b = blob_mask(h, w, rng)
        fracs.append(m.mean())
        blobs.append(int(b))
    fracs = np.array(fracs)
    print(json.dumps({
        "size": [h, w],
        "count": args.count,
        "mean_visible_fraction": float(fracs.mean()),
        "std_visible_fraction": float(fracs.std(ddof=1)),
        "blob_histogram": {str(k): blobs.count(k) for k in range(1, 5)},
    }, indent=2))


if __name__ == "__main__":
    main()
