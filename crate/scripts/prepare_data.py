#!/usr/bin/env python3
"""Rebuild the bundled datasets under data/.

Sources (all public, redistributed under their original licenses):
  * MNIST digits: the 10,000 digits shipped in the `mnist` npm package
    (`npm pack mnist`, src/digits/*.json), grey levels in [0,1].
  * Boston housing and Auto MPG (UCI): CSVs bundled in the mlxtend wheel.
  * Diabetes: scikit-learn's bundled raw diabetes data.

Usage: prepare_data.py <npm-mnist-package-dir> <mlxtend-wheel>
"""
import gzip
import io
import json
import os
import random
import struct
import sys
import zipfile

import numpy as np
import sklearn

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data")


def write_idx_images(path, images, rows, cols):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def mnist(pkg_dir):
    samples = []
    for digit in range(10):
        with open(os.path.join(pkg_dir, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        for i in range(len(flat) // 784):
            px = [min(255, max(0, int(round(v * 255)))) for v in flat[i * 784:(i + 1) * 784]]
            samples.append((px, digit))
    random.Random(0).shuffle(samples)
    out = os.path.join(ROOT, "mnist-desk")
    os.makedirs(out, exist_ok=True)
    for name, part in (("train", samples[:8000]), ("test", samples[8000:])):
        write_idx_images(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), [p for p, _ in part], 28, 28)
        write_idx_labels(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), [l for _, l in part])


def write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(repr(float(v)) for v in r) + "\n")


def tabular(wheel):
    out = os.path.join(ROOT, "uci")
    os.makedirs(out, exist_ok=True)
    z = zipfile.ZipFile(wheel)
    boston = np.loadtxt(io.BytesIO(z.read("mlxtend/data/data/boston_housing.csv")), delimiter=",")
    write_csv(os.path.join(out, "boston_housing.csv"),
              ["crim", "zn", "indus", "chas", "nox", "rm", "age", "dis", "rad", "tax", "ptratio", "b", "lstat", "medv"],
              boston)
    auto = gzip.decompress(z.read("mlxtend/data/data/autompg.csv.gz")).decode().splitlines()
    rows = []
    for line in auto:
        cells = line.split(",")
        rows.append([float(c) for c in cells[:7]] + [float(cells[-1])])
    write_csv(os.path.join(out, "auto_mpg.csv"),
              ["cylinders", "displacement", "horsepower", "weight", "acceleration", "model_year", "origin", "mpg"],
              rows)
    base = os.path.join(os.path.dirname(sklearn.__file__), "datasets", "data")
    x = np.loadtxt(os.path.join(base, "diabetes_data_raw.csv.gz"))
    y = np.loadtxt(os.path.join(base, "diabetes_target.csv.gz"))
    write_csv(os.path.join(out, "diabetes.csv"),
              ["age", "sex", "bmi", "bp", "s1", "s2", "s3", "s4", "s5", "s6", "progression"],
              np.column_stack([x, y]))


if __name__ == "__main__":
    mnist(sys.argv[1])
    tabular(sys.argv[2])
