"""Procedural desk-scale image classification data.

The "textured-patches-v1" recipe draws small RGB grids whose class is a
(grating, palette) pair: four oriented sinusoidal gratings times two color
palettes, eight classes total.  Color alone separates only the palette
pair, so a purely channel-mixing model plateaus well below a model that can
also mix spatial positions; that gap is what the side-branch search and
training experiments rely on.  Regeneration from (recipe, seed) is
bit-identical, and distinct experiment roles (defender pre-training, task
training, attacker auxiliary pool) use disjoint seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RECIPES = ("textured-patches-v1",)

_GRATINGS = ((1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (2.0, 1.0))
_PALETTES = (
    np.array([1.0, 0.35, -0.55]),
    np.array([-0.55, 0.9, 0.25]),
)


@dataclass(frozen=True)
class SyntheticDataset:
    recipe: str
    seed: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.y_train.max()) + 1

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.x_train.shape[1:]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return {"train": (self.x_train, self.y_train),
                "val": (self.x_val, self.y_val),
                "test": (self.x_test, self.y_test)}[name]


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    reps = int(np.ceil(n / num_classes))
    labels = np.tile(np.arange(num_classes), reps)[:n]
    rng.shuffle(labels)
    return labels


def _render_patches(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    # near-fixed phase: position-specific (spatial-mixing) detectors see the
    # grating first-order, while position-shared channel mixing cannot
    phases = 0.9 + rng.uniform(-0.45, 0.45, n)
    amplitudes = rng.uniform(0.6, 1.2, n)
    noise = rng.normal(0.0, 0.55, (n, 3, size, size))
    for i, label in enumerate(labels):
        grating = _GRATINGS[label // len(_PALETTES)]
        palette = _PALETTES[label % len(_PALETTES)]
        pattern = np.sin(2.0 * np.pi * (grating[0] * xx + grating[1] * yy) / size + phases[i])
        images[i] = amplitudes[i] * palette[:, None, None] * pattern[None] + noise[i]
    return images


def make_dataset(recipe: str, seed: int, n_train: int, n_val: int, n_test: int,
                 image_size: int = 16) -> SyntheticDataset:
    """Generate a class-balanced train/val/test dataset; bit-identical per seed."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown dataset recipe {recipe!r}; known: {RECIPES}")
    num_classes = len(_GRATINGS) * len(_PALETTES)
    rng = np.random.default_rng(np.random.SeedSequence([hash_recipe(recipe), seed]))
    splits = {}
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        labels = _balanced_labels(n, num_classes, rng)
        splits[name] = (_render_patches(labels, image_size, rng), labels.astype(np.int64))
    return SyntheticDataset(recipe, seed,
                            *splits["train"], *splits["val"], *splits["test"])


def hash_recipe(recipe: str) -> int:
    """Stable small integer id for a recipe name (seeds must not collide)."""
    return sum((i + 1) * ord(c) for i, c in enumerate(recipe)) % (2 ** 31)
