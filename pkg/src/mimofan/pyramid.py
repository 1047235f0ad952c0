"""Dyadic image and label pyramids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, avg_pool2

DEFAULT_SCALES = 5
KINDS = ("image", "label", "probability")


class ValidationError(ValueError):
    """Raised for inputs with invalid values (as opposed to invalid shapes)."""


@dataclass
class ScalePyramid:
    """``levels[s]`` has spatial size ``(h / 2**s, w / 2**s)``."""

    levels: list[Tensor]
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pyramid kind {self.kind!r}")
        if not self.levels:
            raise DimensionError("a pyramid needs at least one level")
        _, _, h, w = self.levels[0].shape
        for s, t in enumerate(self.levels):
            if t.shape[2:] != (h >> s, w >> s) or (h >> s) << s != h or (w >> s) << s != w:
                raise DimensionError(f"level {s} has spatial size {t.shape[2:]}, expected {(h >> s, w >> s)}")

    @property
    def scales(self) -> int:
        return len(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, s: int) -> Tensor:
        return self.levels[s]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.levels)


def check_divisible(h: int, w: int, scales: int) -> None:
    f = 1 << (scales - 1)
    if h % f or w % f:
        raise DimensionError(f"spatial size {h}x{w} must be divisible by 2^(S-1) = {f} for S={scales}")


def image_pyramid(image: Tensor, scales: int = DEFAULT_SCALES) -> ScalePyramid:
    """Level 0 is ``image``; each further level is the 2x2 average pool of the previous."""
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    check_divisible(image.shape[2], image.shape[3], scales)
    levels = [image]
    for _ in range(1, scales):
        levels.append(avg_pool2(levels[-1]))
    return ScalePyramid(levels, "image")


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """2x2 block mean thresholded at 0.5; a tie (exactly two of four) is foreground."""
    n, c, h, w = mask.shape
    mean = mask.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return (mean >= 0.5).astype(mask.dtype)


def label_pyramid(mask: Tensor, scales: int = DEFAULT_SCALES) -> ScalePyramid:
    data = mask.data
    if not np.all((data == 0) | (data == 1)):
        raise ValidationError("label mask must contain only 0 and 1")
    check_divisible(mask.shape[2], mask.shape[3], scales)
    levels = [data]
    for _ in range(1, scales):
        levels.append(downsample_mask(levels[-1]))
    return ScalePyramid([Tensor(x) for x in levels], "label")


def probability_pyramid(levels: Sequence[Tensor]) -> ScalePyramid:
    return ScalePyramid(list(levels), "probability")
