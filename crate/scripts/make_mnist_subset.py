#!/usr/bin/env python3
"""Build the desk-scale MNIST fixture (6000 train / 1000 test) in gzipped IDX.

Source: the 10 000 digits bundled in the npm `mnist` package (src/digits/<d>.json,
pixel intensities scaled to [0,1] with three decimals). Usage:

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-desk
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

N_TRAIN, N_TEST, SEED = 6000, 1000, 20240501


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main(src, dst):
    samples = []
    for digit in range(10):
        data = json.loads(Path(src, f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[784 * k : 784 * (k + 1)]]
            samples.append((px, digit))
    random.Random(SEED).shuffle(samples)
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:N_TRAIN]), ("t10k", samples[N_TRAIN : N_TRAIN + N_TEST])):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(part), 28, 28], [p for s in part for p in s[0]])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(part)], [s[1] for s in part])
    print(f"{len(samples)} digits read; wrote {N_TRAIN} train / {N_TEST} test to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
