"""Synthetic 16x16 real/fake corpus.

"Real" images are a few smooth Gaussian blobs over a low-frequency ramp
background; "fake" images are the same construction plus an additive
high-frequency checkerboard fingerprint on one random channel. Every
sample regenerates bitwise from (seed, label, generator version).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GENERATOR_VERSION",
    "CHECKER_AMPLITUDE",
    "SyntheticSample",
    "sample_seed",
    "render_image",
    "gen_dataset",
    "split_arrays",
    "manifest_records",
    "write_manifest",
    "read_manifest",
]

GENERATOR_VERSION = 1
CHECKER_AMPLITUDE = 0.15
_H = _W = 16
_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray
    label: int
    seed: int
    split: str


def sample_seed(corpus_seed: int, label: int, index: int) -> int:
    """Stable 64-bit per-sample seed derived from the corpus seed."""
    ss = np.random.SeedSequence([int(corpus_seed), int(label), int(index), GENERATOR_VERSION])
    return int(ss.generate_state(1, np.uint64)[0])


def render_image(seed: int, label: int, amplitude: float = CHECKER_AMPLITUDE) -> np.ndarray:
    """Deterministically render one (3, 16, 16) image in [0, 1].

    label 1 adds the checkerboard fingerprint: a zero-mean +-amplitude/2
    pattern alternating with the parity of (row + col), with random sign
    phase, on a channel drawn from the same stream.
    """
    rng = np.random.default_rng(np.uint64(seed))
    yy, xx = np.mgrid[0:_H, 0:_W].astype(np.float64)
    base = rng.uniform(0.25, 0.75, 3)
    gx = rng.uniform(-0.3, 0.3, 3)
    gy = rng.uniform(-0.3, 0.3, 3)
    amp = rng.uniform(0.0, 0.15, 3)
    phase_bg = rng.uniform(0.0, 2.0 * np.pi, 3)
    img = (
        base[:, None, None]
        + gx[:, None, None] * (xx[None] / (_W - 1) - 0.5)
        + gy[:, None, None] * (yy[None] / (_H - 1) - 0.5)
        + amp[:, None, None]
        * np.sin(2.0 * np.pi * (xx + yy)[None] / (2.0 * _W) + phase_bg[:, None, None])
    )
    n_blobs = int(rng.integers(2, 5))
    for _ in range(n_blobs):
        cx = rng.uniform(2.0, _W - 3.0)
        cy = rng.uniform(2.0, _H - 3.0)
        width = rng.uniform(1.2, 4.5)
        color = rng.uniform(0.0, 1.0, 3)
        strength = rng.uniform(0.3, 0.9)
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width**2))
        # Blend toward the blob color; keeps values inside the color hull.
        img += strength * bump[None] * (color[:, None, None] - img)
    if label == 1:
        channel = int(rng.integers(0, 3))
        phase = 1.0 if rng.uniform() < 0.5 else -1.0
        checker = np.where((xx + yy) % 2 == 0, 1.0, -1.0)
        img[channel] += (amplitude / 2.0) * phase * checker
    img = np.clip(img, 0.0, 1.0)
    img.flags.writeable = False
    return img


def _split_for(index: int, n_per_class: int) -> str:
    n_train = int(n_per_class * 0.8)
    n_val = int(n_per_class * 0.1)
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def gen_dataset(
    n_per_class: int, seed: int, amplitude: float = CHECKER_AMPLITUDE
) -> list[SyntheticSample]:
    """Balanced corpus: real samples first, then fake; 80/10/10 split by index."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    samples = []
    for label in (0, 1):
        for index in range(n_per_class):
            s = sample_seed(seed, label, index)
            samples.append(
                SyntheticSample(
                    image=render_image(s, label, amplitude),
                    label=label,
                    seed=s,
                    split=_split_for(index, n_per_class),
                )
            )
    return samples


def split_arrays(samples, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (images, labels) arrays for one split."""
    if split not in _SPLITS:
        raise ValueError(f"unknown split {split!r}")
    chosen = [s for s in samples if s.split == split]
    images = np.stack([s.image for s in chosen]) if chosen else np.zeros((0, 3, _H, _W))
    labels = np.array([s.label for s in chosen], dtype=np.intp)
    return images, labels


def manifest_records(samples) -> list[dict]:
    return [{"seed": s.seed, "label": s.label, "split": s.split} for s in samples]


def write_manifest(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest_records(samples):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
