"""Builds the bundled IDX subset of MNIST digits 0, 1, 2 from the npm `mnist`
package (1.1.0, MIT), whose src/digits/<d>.json hold 784 floats in [0, 1] per image.

usage: python3 scripts/mnist_subset.py <package>/src/digits data/mnist [per_class]
"""
import json
import struct
import sys
from pathlib import Path

DIGITS = (0, 1, 2)


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    per_class = int(sys.argv[3]) if len(sys.argv) > 3 else 500
    images = {}
    for d in DIGITS:
        flat = json.loads((src / f"{d}.json").read_text())["data"]
        n = len(flat) // 784
        if n < per_class:
            sys.exit(f"digit {d}: only {n} images")
        images[d] = [flat[i * 784:(i + 1) * 784] for i in range(per_class)]
    pixels, labels = bytearray(), bytearray()
    for i in range(per_class):
        for d in DIGITS:
            pixels.extend(min(255, max(0, round(v * 255))) for v in images[d][i])
            labels.append(d)
    count = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "images-idx3-ubyte").write_bytes(struct.pack(">IIII", 2051, count, 28, 28) + pixels)
    (dst / "labels-idx1-ubyte").write_bytes(struct.pack(">II", 2049, count) + labels)


if __name__ == "__main__":
    main()
