"""Convert the digits bundled in the `mnist` npm package into gzipped IDX files.

Usage: python3 scripts/idx_from_npm_mnist.py <path/to/package/src/digits> <out_dir>

The package ships 10,000 MNIST digits grouped by class. Each class is split
85/15 into a training and a test pool, then each pool is shuffled with a fixed
seed and written as `train-*` / `t10k-*` IDX files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_FRACTION = 0.85


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for label in range(10):
        raw = json.loads((src / f"{label}.json").read_text())["data"]
        n = len(raw) // 784
        digits = [
            bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784 : (i + 1) * 784])
            for i in range(n)
        ]
        cut = int(n * TRAIN_FRACTION)
        train += [(d, label) for d in digits[:cut]]
        test += [(d, label) for d in digits[cut:]]
    rng = random.Random(20160701)
    for name, pool in (("train", train), ("t10k", test)):
        rng.shuffle(pool)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 2051, (len(pool), 28, 28),
                  b"".join(d for d, _ in pool))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 2049, (len(pool),),
                  bytes(l for _, l in pool))
        print(name, len(pool))


if __name__ == "__main__":
    main()
