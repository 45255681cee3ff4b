"""Shared helpers for the test suite: deterministic random inputs."""

import numpy as np

from ciss.features import Box, Image


def random_image(rng: np.random.Generator, width: int, height: int) -> Image:
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    return Image(width=width, height=height, pixels=pixels)


def constant_image(width: int, height: int, rgb: tuple[int, int, int]) -> Image:
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:, :] = np.asarray(rgb, dtype=np.uint8)
    return Image(width=width, height=height, pixels=pixels)


def random_box(
    rng: np.random.Generator,
    width: int,
    height: int,
    min_side: int = 2,
    max_side: int | None = None,
) -> Box:
    """A box that always fits inside width x height."""
    cap = min(width, height) if max_side is None else max_side
    w = int(rng.integers(min_side, min(cap, width) + 1))
    h = int(rng.integers(min_side, min(cap, height) + 1))
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    return Box(x=x, y=y, w=w, h=h)
