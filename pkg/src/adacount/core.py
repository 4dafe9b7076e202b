"""Shared domain types: images, dot annotations, density maps, samples.

All types are immutable after construction (arrays are marked read-only),
so instances can be shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np


class DomainTag(Enum):
    """Which distribution a sample was drawn from."""

    SOURCE = "source"
    TARGET = "target"


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Image:
    """An RGB image with channel values normalized to [0, 1].

    8-bit inputs are expected to be divided by 255 at ingestion, so pixel
    values of loaded images lie exactly on the k/255 grid.
    """

    pixels: np.ndarray  # (height, width, 3) float32
    id: str

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image {self.id!r}: expected (H, W, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image {self.id!r}: height and width must be >= 1")
        if float(px.min()) < 0.0 or float(px.max()) > 1.0:
            raise ValueError(f"image {self.id!r}: channel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class DotAnnotationSet:
    """One point per object instance, in (row, col) pixel coordinates.

    Coordinates are stored as reals so rescaling loses no precision.
    May be empty (an annotated image containing zero objects).
    """

    points: np.ndarray  # (n, 2) float64 rows of (row, col)
    image_id: str

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(
                f"annotations for {self.image_id!r}: expected (n, 2) points, got shape {pts.shape}"
            )
        if not np.isfinite(pts).all():
            raise ValueError(f"annotations for {self.image_id!r}: non-finite coordinates")
        object.__setattr__(self, "points", _freeze(pts))

    def count(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class DensityMap:
    """A 2-D grid whose pixel sum encodes an object count.

    ``sigma`` is the Gaussian render parameter for ground-truth maps and
    ``None`` for model outputs (whose value range is set by the output
    activation rather than by rendering).
    """

    values: np.ndarray  # (height, width)
    sigma: Optional[float] = None

    def __post_init__(self) -> None:
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ValueError(f"density map must be 2-D, got shape {vals.shape}")
        if self.sigma is not None:
            if self.sigma <= 0:
                raise ValueError(f"sigma must be > 0, got {self.sigma}")
            if vals.size and float(vals.min()) < 0.0:
                raise ValueError("rendered density map has negative values")
        object.__setattr__(self, "values", _freeze(vals))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Sample:
    """One image, its optional dot annotations, and a domain tag.

    Source samples must carry annotations; target samples are unlabeled
    during training but may carry annotations for held-out evaluation.
    """

    image: Image
    dots: Optional[DotAnnotationSet]
    domain: DomainTag

    def __post_init__(self) -> None:
        if self.domain is DomainTag.SOURCE and self.dots is None:
            raise ValueError(f"source sample {self.image.id!r} must carry dot annotations")
        if self.dots is not None:
            if self.dots.image_id != self.image.id:
                raise ValueError(
                    f"annotation image_id {self.dots.image_id!r} does not match image {self.image.id!r}"
                )
            pts = self.dots.points
            if pts.shape[0]:
                rows, cols = pts[:, 0], pts[:, 1]
                bad = (rows < 0) | (rows >= self.image.height) | (cols < 0) | (cols >= self.image.width)
                if bad.any():
                    offender = pts[int(np.argmax(bad))]
                    raise ValueError(
                        f"sample {self.image.id!r}: dot {tuple(offender)} outside "
                        f"{self.image.height}x{self.image.width} frame"
                    )

    @property
    def labeled(self) -> bool:
        return self.dots is not None


@dataclass(frozen=True)
class Dataset:
    """An ordered, homogeneously-tagged collection of samples."""

    samples: tuple = field(default_factory=tuple)
    name: str = ""

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        tags = {s.domain for s in samples}
        if len(tags) > 1:
            raise ValueError(f"dataset {self.name!r} mixes domain tags: {sorted(t.value for t in tags)}")
        object.__setattr__(self, "samples", samples)

    @property
    def domain(self) -> Optional[DomainTag]:
        return self.samples[0].domain if self.samples else None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, idx: int) -> Sample:
        return self.samples[idx]


def split_train_val(d: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Randomly partition ``d`` into (first, second) parts.

    The first part receives round(fraction * len(d)) samples (ties rounded
    away from zero). The split is a disjoint, exhaustive partition and is
    deterministic given ``seed``.
    """
    if len(d) == 0:
        raise ValueError(f"cannot split empty dataset {d.name!r}")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(d))
    n_first = int(math.floor(fraction * len(d) + 0.5))
    first = Dataset(tuple(d.samples[i] for i in perm[:n_first]), name=f"{d.name}-train")
    second = Dataset(tuple(d.samples[i] for i in perm[n_first:]), name=f"{d.name}-val")
    return first, second


def samples_from(
    images: Sequence[Image],
    dot_sets: Optional[Sequence[Optional[DotAnnotationSet]]],
    domain: DomainTag,
) -> list[Sample]:
    """Zip images with (optional) annotations into samples of one domain."""
    if dot_sets is None:
        dot_sets = [None] * len(images)
    if len(dot_sets) != len(images):
        raise ValueError("images and annotation sets differ in length")
    return [Sample(img, dots, domain) for img, dots in zip(images, dot_sets)]
