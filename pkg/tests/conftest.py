"""Shared fixtures: tiny on-disk corpora in the three radiograph layouts."""

import numpy as np
import pytest
from PIL import Image


def write_gray_image(path, size=(64, 64), seed=0):
    w, h = size
    rng = np.random.default_rng(seed)
    arr = rng.integers(30, 220, size=(h, w), dtype=np.int64).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def write_annotation(path, points, extra_lines=()):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in points:
            fh.write(f"{x},{y}\n")
        for line in extra_lines:
            fh.write(line + "\n")


@pytest.fixture
def ceph_corpus(tmp_path):
    """8 images + two annotator files each; returns (root, {stem: (a, b)}).

    8 ids split 3/3/2 across train/test1/test2 under the 150/150/100
    protocol proportions. Image 001 carries hand-picked annotations so the
    averaging test has closed-form expectations.
    """
    root = tmp_path / "ceph"
    (root / "images").mkdir(parents=True)
    (root / "annotations" / "annotator1").mkdir(parents=True)
    (root / "annotations" / "annotator2").mkdir(parents=True)
    rng = np.random.default_rng(3)
    truth = {}
    for i in range(8):
        stem = f"{i + 1:03d}"
        write_gray_image(root / "images" / f"{stem}.png", size=(64, 64), seed=i)
        a = np.round(rng.uniform(4, 59, size=(19, 2)), 1)
        b = np.round(a + rng.uniform(-2, 2, size=a.shape), 1)
        if i == 0:
            a[0] = (10.0, 20.0)
            b[0] = (12.0, 24.0)
        write_annotation(root / "annotations" / "annotator1" / f"{stem}.txt", a)
        write_annotation(root / "annotations" / "annotator2" / f"{stem}.txt", b)
        truth[stem] = (a, b)
    return root, truth


@pytest.fixture
def hand_corpus(tmp_path):
    """9 images with 37-point files; wrist landmarks 0 and 4 sit 200 px apart."""
    root = tmp_path / "hand"
    (root / "images").mkdir(parents=True)
    (root / "annotations").mkdir(parents=True)
    rng = np.random.default_rng(5)
    truth = {}
    for i in range(9):
        stem = f"hand{i:02d}"
        write_gray_image(root / "images" / f"{stem}.png", size=(256, 256), seed=10 + i)
        pts = np.round(rng.uniform(5, 250, size=(37, 2)), 2)
        pts[0] = (20.0, 40.0 + i)
        pts[4] = (220.0, 40.0 + i)
        write_annotation(root / "annotations" / f"{stem}.txt", pts)
        truth[stem] = pts
    return root, truth


@pytest.fixture
def spine_corpus(tmp_path):
    """9 images with 68-point files (seeded-permutation split puts 1 in test)."""
    root = tmp_path / "spine"
    (root / "images").mkdir(parents=True)
    (root / "annotations").mkdir(parents=True)
    rng = np.random.default_rng(8)
    truth = {}
    for i in range(9):
        stem = f"sp{i:02d}"
        write_gray_image(root / "images" / f"{stem}.png", size=(96, 128), seed=20 + i)
        pts = np.round(rng.uniform(3, 90, size=(68, 2)), 2)
        write_annotation(root / "annotations" / f"{stem}.txt", pts)
        truth[stem] = pts
    return root, truth
