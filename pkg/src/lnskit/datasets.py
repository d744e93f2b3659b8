"""Seeded synthetic classification tasks.

Every generator appends a constant-1 feature so the bias-free affine layers
can still learn an offset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


def _with_bias(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _split(x, y, n_classes, test_fraction, rng) -> Dataset:
    idx = rng.permutation(len(y))
    n_test = int(round(len(y) * test_fraction))
    te, tr = idx[:n_test], idx[n_test:]
    x = _with_bias(x)
    return Dataset(x[tr], y[tr], x[te], y[te], n_classes)


def blobs(n: int, rng: np.random.Generator, separation: float = 4.0, test_fraction: float = 0.25) -> Dataset:
    """Two Gaussian blobs in the plane, linearly separable for large ``separation``."""
    y = rng.integers(0, 2, size=n)
    centers = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    x = centers[y] + rng.normal(0.0, 0.5, size=(n, 2))
    return _split(x, y, 2, test_fraction, rng)


def moons(n: int, rng: np.random.Generator, noise: float = 0.1, test_fraction: float = 0.25) -> Dataset:
    """Two interleaved half circles."""
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, np.pi, size=n)
    x = np.where(
        y[:, None] == 0,
        np.stack([np.cos(t), np.sin(t)], axis=1),
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
    )
    x = x + rng.normal(0.0, noise, size=x.shape)
    return _split(x - x.mean(axis=0), y, 2, test_fraction, rng)


def digits(n: int, rng: np.random.Generator, n_classes: int = 10, noise: float = 0.35,
           shift: bool = True, test_fraction: float = 0.25, prototype_seed: int = 1234) -> Dataset:
    """8x8 "digit-like" images: fixed random stroke prototypes plus noise and jitter.

    Prototypes come from ``prototype_seed`` so the class templates are the same
    task whatever ``rng`` is used for sampling.
    """
    if not 2 <= n_classes <= 16:
        raise ConfigError("digits supports 2..16 classes")
    proto_rng = np.random.default_rng(prototype_seed)
    protos = np.zeros((n_classes, 8, 8))
    for c in range(n_classes):
        for _ in range(3):  # three random strokes per class
            r0, c0 = proto_rng.integers(1, 7, size=2)
            dr, dc = proto_rng.choice([-1, 0, 1], size=2)
            if dr == 0 and dc == 0:
                dc = 1
            for k in range(5):
                r, cc = r0 + k * dr, c0 + k * dc
                if 0 <= r < 8 and 0 <= cc < 8:
                    protos[c, r, cc] = 1.0
    y = rng.integers(0, n_classes, size=n)
    imgs = protos[y]
    if shift:
        sr = rng.integers(-1, 2, size=n)
        sc = rng.integers(-1, 2, size=n)
        imgs = np.stack([np.roll(np.roll(im, a, axis=0), b, axis=1) for im, a, b in zip(imgs, sr, sc)])
    imgs = imgs + rng.normal(0.0, noise, size=imgs.shape)
    return _split(imgs.reshape(n, 64), y, n_classes, test_fraction, rng)


GENERATORS = {"blobs": blobs, "moons": moons, "digits": digits}


def make_dataset(name: str, n: int, seed: int, **kwargs) -> Dataset:
    if name not in GENERATORS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[name](n, np.random.default_rng(seed), **kwargs)
