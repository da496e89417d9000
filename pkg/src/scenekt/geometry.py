"""Bounding boxes and the absolute/relative spatial encodings.

Boxes are corner-form (top-left, bottom-right) in whatever units the data
source supplies; the synthetic generator uses [0, 1]-normalized coordinates
so feature scales stay comparable across scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class BoundingBox:
    x_t: float
    y_t: float
    x_b: float
    y_b: float

    def __post_init__(self):
        if not (self.x_t < self.x_b and self.y_t < self.y_b):
            raise ValueError(
                f"degenerate box: ({self.x_t}, {self.y_t}, {self.x_b}, {self.y_b})"
            )

    @property
    def width(self) -> float:
        return self.x_b - self.x_t

    @property
    def height(self) -> float:
        return self.y_b - self.y_t

    def as_array(self) -> np.ndarray:
        return np.array([self.x_t, self.y_t, self.x_b, self.y_b], dtype=np.float64)


def encode_absolute(b: BoundingBox) -> np.ndarray:
    """[x_t, y_t, x_b, y_b, w*h]."""
    return np.array(
        [b.x_t, b.y_t, b.x_b, b.y_b, b.width * b.height], dtype=np.float64
    )


def to_center_form(b: BoundingBox) -> np.ndarray:
    """[x_c, y_c, w, h]."""
    return np.array(
        [
            0.5 * (b.x_t + b.x_b),
            0.5 * (b.y_t + b.y_b),
            b.width,
            b.height,
        ],
        dtype=np.float64,
    )


def relative_spatial(b_i: BoundingBox, b_j: BoundingBox) -> np.ndarray:
    """Position of b_j relative to b_i's center, in b_i's width/height units.

    Asymmetric in general: the (i, j) encoding differs from (j, i).
    """
    w_i, h_i = b_i.width, b_i.height

    # (v - center) / extent written as the mean of the two corner offsets so
    # the self-encoding cancels exactly in floating point
    def off(v, lo, hi, extent):
        return 0.5 * ((v - lo) + (v - hi)) / extent

    return np.array(
        [
            off(b_j.x_t, b_i.x_t, b_i.x_b, w_i),
            off(b_j.y_t, b_i.y_t, b_i.y_b, h_i),
            off(b_j.x_b, b_i.x_t, b_i.x_b, w_i),
            off(b_j.y_b, b_i.y_t, b_i.y_b, h_i),
            (b_j.width * b_j.height) / (w_i * h_i),
        ],
        dtype=np.float64,
    )


def union_box(b_i: BoundingBox, b_j: BoundingBox) -> BoundingBox:
    """Smallest axis-aligned box containing both inputs."""
    return BoundingBox(
        min(b_i.x_t, b_j.x_t),
        min(b_i.y_t, b_j.y_t),
        max(b_i.x_b, b_j.x_b),
        max(b_i.y_b, b_j.y_b),
    )


def lift_spatial(s_raw: np.ndarray, lift_w: ad.Tensor, lift_b: ad.Tensor) -> ad.Tensor:
    """relu(W @ s_raw + b): raw 5-d relative encoding lifted to d_s dims."""
    x = ad.Tensor(np.asarray(s_raw, dtype=np.float64))
    return ad.relu(ad.add(ad.matvec(lift_w, x), lift_b))
