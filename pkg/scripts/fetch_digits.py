#!/usr/bin/env python3
"""Download the digit benchmark archives into a data root.

Usage: python scripts/fetch_digits.py [ROOT]

ROOT defaults to $SFDA_DATA_ROOT. Needs network access; the library itself
never downloads anything. Office-style object datasets must be fetched by
hand (license walls) and unpacked as one directory per class.
"""

import os
import sys
import urllib.request

MIRRORS = {
    "mnist": [
        ("https://ossci-datasets.s3.amazonaws.com/mnist/{f}", [
            "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
            "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"]),
    ],
    "usps": [
        ("https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass/{f}",
         ["usps.bz2", "usps.t.bz2"]),
    ],
    "svhn": [
        ("http://ufldl.stanford.edu/housenumbers/{f}",
         ["train_32x32.mat", "test_32x32.mat"]),
    ],
}


def fetch(root: str) -> int:
    failures = 0
    for name, sources in MIRRORS.items():
        out_dir = os.path.join(root, name)
        os.makedirs(out_dir, exist_ok=True)
        for url_tpl, files in sources:
            for f in files:
                dest = os.path.join(out_dir, f)
                if os.path.exists(dest):
                    print(f"have {dest}")
                    continue
                url = url_tpl.format(f=f)
                print(f"fetching {url}")
                try:
                    urllib.request.urlretrieve(url, dest)
                except Exception as exc:
                    print(f"  failed: {exc}")
                    failures += 1
    return failures


if __name__ == "__main__":
    root = sys.argv[1] if len(sys.argv) > 1 else os.environ.get("SFDA_DATA_ROOT")
    if not root:
        sys.exit("pass a root directory or set SFDA_DATA_ROOT")
    sys.exit(1 if fetch(root) else 0)
