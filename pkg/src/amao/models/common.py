"""Shared classifier plumbing: labeled samples, geometry, splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..image import GrayImage


@dataclass
class LabeledSample:
    """One corpus member: raw program bytes, their image, true class, origin."""

    bytes: bytes
    image: GrayImage
    label: int
    source: str = ""


def pad_crop(pixels: np.ndarray, side: int) -> np.ndarray:
    """Fit a 2-D pixel array to (side, side): zero-pad bottom/right when
    smaller, center-crop when larger.  Content outside a crop cannot reach
    the model."""
    out = pixels
    h, w = out.shape
    if h > side:
        top = (h - side) // 2
        out = out[top : top + side, :]
    if w > side:
        left = (w - side) // 2
        out = out[:, left : left + side]
    h, w = out.shape
    if h < side or w < side:
        padded = np.zeros((side, side), dtype=out.dtype)
        padded[:h, :w] = out
        out = padded
    return out


def model_input(image: GrayImage | np.ndarray, side: int) -> np.ndarray:
    """Raw pixels -> normalized (side, side) float64 in [0, 1].  This is the
    only place pixel scaling happens."""
    pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    return pad_crop(pixels, side).astype(np.float64) / 255.0


def split_corpus(
    samples: list[LabeledSample], seed: int, fractions: tuple[float, float] = (0.7, 0.1)
) -> tuple[list[LabeledSample], list[LabeledSample], list[LabeledSample]]:
    """Deterministic stratified-ish train/val/test split."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_train = int(len(samples) * fractions[0])
    n_val = int(len(samples) * fractions[1])
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train : n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val :]]
    return train, val, test


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float((np.asarray(predicted) == labels).mean())
