"""Convert the digits bundled in the `mnist` npm package (1.1.0) to IDX files.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist 5000

Pixels are stored there as byte/255 rounded to three decimals; rounding
v * 255 recovers the original byte. A class-balanced subset is drawn with a
fixed seed.
"""
import json
import random
import struct
import sys
from pathlib import Path


def main(src, out, total):
    src, out = Path(src), Path(out)
    per_class = total // 10
    rng = random.Random(20240601)
    samples = []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        n = len(data) // 784
        for i in sorted(rng.sample(range(n), per_class)):
            px = bytes(round(v * 255) for v in data[i * 784:(i + 1) * 784])
            samples.append((px, label))
    rng.shuffle(samples)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for px, _ in samples:
            f.write(px)
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2], int(sys.argv[3]) if len(sys.argv) > 3 else 5000)
