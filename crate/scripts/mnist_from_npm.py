#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package (v1.1.0) to IDX files.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/dist/mnist.js data/mnist

The package ships 10000 MNIST digits grouped by class with pixel values in
[0, 1] rounded to three decimals. Pixels are rescaled to bytes and the classes
are interleaved round-robin so that any prefix of the output is close to
class-balanced.
"""
import gzip
import json
import re
import struct
import sys
from pathlib import Path


def main(src: str, out_dir: str) -> None:
    text = Path(src).read_text()
    starts = [
        (int(m.group(1)), m.end() - 1)
        for m in re.finditer(r'(\d+):\[function\(require,module,exports\)\{\nmodule\.exports=\{ "data": \[', text)
    ]
    per_class = {}
    decoder = json.JSONDecoder()
    for module_id, pos in starts:
        data, _ = decoder.raw_decode(text, pos)
        assert len(data) % 784 == 0
        per_class[module_id - 1] = [data[i:i + 784] for i in range(0, len(data), 784)]
    assert sorted(per_class) == list(range(10))

    images, labels = [], []
    depth = max(len(v) for v in per_class.values())
    for i in range(depth):
        for digit in range(10):
            if i < len(per_class[digit]):
                images.append(per_class[digit][i])
                labels.append(digit)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(images)
    pix = bytearray()
    for img in images:
        pix.extend(min(255, max(0, round(v * 255))) for v in img)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(pix))
    with gzip.GzipFile(out / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
