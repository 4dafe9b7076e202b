"""Dataset ingestion, patch extraction, composite stitching, and the
synthetic domain-shift benchmark generator.

On-disk layout of a dataset directory:

    <root>/
      images/<id>.png        lossless rasters, 8-bit RGB
      annotations.csv        header ``image_id,x,y``, one row per dot
      manifest.csv           index: image_id, relative path, annotated flag

Annotation coordinates use image convention: x is the column, y is the row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from adacount.core import Dataset, DomainTag, DotAnnotationSet, Image, Sample

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
ANNOTATION_HEADER = "image_id,x,y"
MANIFEST_NAME = "manifest.csv"


# ---------------------------------------------------------------------------
# Ingestion and persistence
# ---------------------------------------------------------------------------


def _quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap [0,1] floats onto the 8-bit k/255 grid (lossless PNG round-trip)."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _parse_annotations(path: Path) -> dict[str, list[tuple[float, float]]]:
    """Parse ``image_id,x,y`` rows into per-image (row, col) point lists."""
    per_image: dict[str, list[tuple[float, float]]] = {}
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty annotation file (expected header '{ANNOTATION_HEADER}')")
    header = [c.strip() for c in lines[0].split(",")]
    if header != ANNOTATION_HEADER.split(","):
        raise ValueError(
            f"{path}:1: expected header '{ANNOTATION_HEADER}', got {lines[0]!r}"
        )
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [c.strip() for c in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 comma-separated fields, got {line!r}")
        image_id = parts[0]
        try:
            x, y = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from exc
        per_image.setdefault(image_id, []).append((y, x))
    return per_image


def load_dataset(
    image_dir: Path, annotations: Optional[Path], domain: DomainTag, name: Optional[str] = None
) -> Dataset:
    """Load one sample per image file, attaching dots when annotations are given.

    Ordering is deterministic (lexicographic by image id). Annotation rows
    referencing missing images, out-of-frame dots, and malformed rows are
    all rejected.
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    paths = sorted(
        (p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS),
        key=lambda p: p.stem,
    )
    if not paths:
        raise ValueError(f"no image files in {image_dir}")

    ids = [p.stem for p in paths]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate image ids in {image_dir}")

    per_image: dict[str, list[tuple[float, float]]] = {}
    if annotations is not None:
        annotations = Path(annotations)
        if not annotations.is_file():
            raise FileNotFoundError(f"annotation file not found: {annotations}")
        per_image = _parse_annotations(annotations)
        missing = sorted(set(per_image) - set(ids))
        if missing:
            raise ValueError(
                f"{annotations}: annotation rows reference missing image(s): {', '.join(missing)}"
            )
    elif domain is DomainTag.SOURCE:
        raise ValueError("source datasets must be loaded with an annotation file")

    samples = []
    for path, image_id in zip(paths, ids):
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        image = Image(arr, id=image_id)
        dots: Optional[DotAnnotationSet] = None
        if annotations is not None:
            pts = np.array(per_image.get(image_id, []), dtype=np.float64).reshape(-1, 2)
            inside = (
                (pts[:, 0] >= 0)
                & (pts[:, 0] < image.height)
                & (pts[:, 1] < image.width)
                & (pts[:, 1] >= 0)
            )
            if not inside.all():
                offender = pts[int(np.argmax(~inside))]
                raise ValueError(
                    f"{annotations}: dot (x={offender[1]}, y={offender[0]}) outside "
                    f"{image.width}x{image.height} image {image_id!r}"
                )
            dots = DotAnnotationSet(pts, image_id=image_id)
        samples.append(Sample(image, dots, domain))

    return Dataset(tuple(samples), name=name or image_dir.parent.name or image_dir.name)


def save_dataset(d: Dataset, out_dir: Path, force: bool = False) -> Path:
    """Write a dataset directory (images, annotations, manifest)."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"{out_dir} exists and is not empty (use force to overwrite)")
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    any_labeled = any(s.labeled for s in d)
    ann_lines = [ANNOTATION_HEADER]
    manifest_lines = ["image_id,path,annotated"]
    for s in d:
        raster = np.round(np.asarray(s.image.pixels) * 255.0).astype(np.uint8)
        PILImage.fromarray(raster, mode="RGB").save(images_dir / f"{s.image.id}.png")
        manifest_lines.append(f"{s.image.id},images/{s.image.id}.png,{str(s.labeled).lower()}")
        if s.labeled:
            for row, col in s.dots.points:
                ann_lines.append(f"{s.image.id},{col!r},{row!r}")
    if any_labeled:
        (out_dir / "annotations.csv").write_text("\n".join(ann_lines) + "\n", encoding="utf-8")
    (out_dir / MANIFEST_NAME).write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    return out_dir


def load_dataset_dir(root: Path, domain: DomainTag, name: Optional[str] = None) -> Dataset:
    """Load a directory laid out by :func:`save_dataset`."""
    root = Path(root)
    ann = root / "annotations.csv"
    return load_dataset(
        root / "images", ann if ann.is_file() else None, domain, name=name or root.name
    )


# ---------------------------------------------------------------------------
# Patch extraction and composite stitching
# ---------------------------------------------------------------------------


def _crop_sample(s: Sample, r0: int, c0: int, size: int, new_id: str) -> Sample:
    pixels = np.asarray(s.image.pixels)[r0 : r0 + size, c0 : c0 + size]
    dots = None
    if s.dots is not None:
        pts = s.dots.points
        # a dot bisected by the border belongs to the patch iff its center
        # lies inside the half-open window
        keep = (pts[:, 0] >= r0) & (pts[:, 0] < r0 + size) & (pts[:, 1] >= c0) & (pts[:, 1] < c0 + size)
        shifted = pts[keep] - np.array([r0, c0], dtype=np.float64)
        dots = DotAnnotationSet(shifted, image_id=new_id)
    return Sample(Image(pixels, id=new_id), dots, s.domain)


def extract_patches(d: Dataset, patch: int, count: int, seed: int) -> Dataset:
    """Sample ``count`` square patches uniformly over valid top-left corners,
    with replacement across images."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if len(d) == 0:
        raise ValueError("cannot extract patches from an empty dataset")
    for s in d:
        if patch > s.image.height or patch > s.image.width:
            raise ValueError(
                f"patch size {patch} exceeds image {s.image.id!r} "
                f"({s.image.height}x{s.image.width})"
            )
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        s = d[int(rng.integers(len(d)))]
        r0 = int(rng.integers(0, s.image.height - patch + 1))
        c0 = int(rng.integers(0, s.image.width - patch + 1))
        out.append(_crop_sample(s, r0, c0, patch, new_id=f"{s.image.id}-p{k:05d}"))
    return Dataset(tuple(out), name=f"{d.name}-patches")


def make_composites(d: Dataset, count: int, seed: int, grid: int = 2) -> Dataset:
    """Tile ``grid`` x ``grid`` randomly chosen samples into composite images.

    Composite ground truth is exactly the sum of constituent counts; dot
    coordinates are translated per quadrant.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if grid < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    need = grid * grid
    if len(d) < need:
        raise ValueError(f"need at least {need} samples to stitch a {grid}x{grid} composite")
    sizes = {(s.image.height, s.image.width) for s in d}
    if len(sizes) != 1:
        raise ValueError(f"all images must share one size to be stitched, got {sorted(sizes)}")
    h, w = next(iter(sizes))

    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        picks = [d[int(i)] for i in rng.choice(len(d), size=need, replace=False)]
        new_id = f"{d.name}-comp{k:05d}"
        rows = []
        pts: list[np.ndarray] = []
        labeled = all(p.labeled for p in picks)
        for gr in range(grid):
            rows.append(
                np.concatenate(
                    [np.asarray(picks[gr * grid + gc].image.pixels) for gc in range(grid)], axis=1
                )
            )
            if labeled:
                for gc in range(grid):
                    p = picks[gr * grid + gc]
                    pts.append(p.dots.points + np.array([gr * h, gc * w], dtype=np.float64))
        pixels = np.concatenate(rows, axis=0)
        dots = None
        if labeled:
            stacked = np.concatenate(pts, axis=0) if pts else np.zeros((0, 2))
            dots = DotAnnotationSet(stacked, image_id=new_id)
        out.append(Sample(Image(pixels, id=new_id), dots, d.domain))
    return Dataset(tuple(out), name=f"{d.name}-composites")


# ---------------------------------------------------------------------------
# Synthetic domain-shift benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic counting benchmark.

    Source images show elliptical blobs on a plain background with mild
    noise; target images render the same object process under an appearance
    shift (background texture, color cast, blob aspect change, blur) whose
    magnitude is ``shift_strength``.
    """

    image_size: int = 64
    min_count: int = 3
    max_count: int = 12
    blob_radius: float = 5.0
    shift_strength: float = 0.7
    noise_level: float = 0.02
    n_source: int = 200
    n_target: int = 200
    n_test: int = 50

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if not 1 <= self.min_count <= self.max_count:
            raise ValueError(
                f"need 1 <= min_count <= max_count, got {self.min_count}..{self.max_count}"
            )
        if self.blob_radius < 1:
            raise ValueError(f"blob_radius must be >= 1, got {self.blob_radius}")
        if not 0.0 <= self.shift_strength <= 1.0:
            raise ValueError(f"shift_strength must lie in [0, 1], got {self.shift_strength}")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        if min(self.n_source, self.n_target, self.n_test) < 1:
            raise ValueError("dataset sizes must be >= 1")


# Palette: plain indoor-like source vs textured soil-like target.
_BG_SOURCE = np.array([0.84, 0.82, 0.76])
_BG_SHIFTED = np.array([0.46, 0.35, 0.23])
_BLOB_SOURCE = np.array([0.15, 0.37, 0.13])
_BLOB_SHIFTED = np.array([0.52, 0.47, 0.18])
_TEXTURE_WEIGHT = np.array([1.0, 0.85, 0.65])


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 6) -> np.ndarray:
    """Low-frequency field in roughly [-1, 1]: bilinear upsampling of a coarse grid."""
    coarse = rng.normal(0.0, 1.0, (cells + 1, cells + 1))
    xs = np.linspace(0.0, cells, size)
    i0 = np.minimum(xs.astype(int), cells - 1)
    f = xs - i0
    top = coarse[np.ix_(i0, i0)]
    right = coarse[np.ix_(i0, i0 + 1)]
    bottom = coarse[np.ix_(i0 + 1, i0)]
    corner = coarse[np.ix_(i0 + 1, i0 + 1)]
    fr, fc = f[:, None], f[None, :]
    field = (
        top * (1 - fr) * (1 - fc)
        + right * (1 - fr) * fc
        + bottom * fr * (1 - fc)
        + corner * fr * fc
    )
    return np.clip(field / 1.8, -1.0, 1.0)


def _place_centers(
    rng: np.random.Generator, k: int, size: int, margin: float, min_sep: float
) -> np.ndarray:
    """Rejection-sample blob centers with a soft minimum-separation constraint."""
    centers: list[tuple[float, float]] = []
    for _ in range(k):
        for _attempt in range(150):
            r = rng.uniform(margin, size - margin)
            c = rng.uniform(margin, size - margin)
            if all((r - pr) ** 2 + (c - pc) ** 2 >= min_sep**2 for pr, pc in centers):
                break
        centers.append((r, c))
    return np.array(centers, dtype=np.float64).reshape(-1, 2)


def _render_scene(
    rng: np.random.Generator, spec: SyntheticSpec, shift: float
) -> tuple[np.ndarray, np.ndarray]:
    """Render one image plus its blob centers.

    The same code path serves both domains: the source renders with
    shift=0, the target with shift=spec.shift_strength.
    """
    size = spec.image_size
    k = int(rng.integers(spec.min_count, spec.max_count + 1))
    max_axis = spec.blob_radius * (1.0 + 0.6 * shift) * 1.15
    margin = max_axis + 2.0
    centers = _place_centers(rng, k, size, margin, min_sep=2.0 * spec.blob_radius)

    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = (1.0 - shift) * _BG_SOURCE + shift * _BG_SHIFTED
    img += (shift * 0.16) * _smooth_noise(rng, size)[..., None] * _TEXTURE_WEIGHT

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob_color_base = (1.0 - 0.6 * shift) * _BLOB_SOURCE + (0.6 * shift) * _BLOB_SHIFTED
    for row, col in centers:
        theta = rng.uniform(0.0, math.pi)
        jitter_a, jitter_b = rng.uniform(0.85, 1.15, size=2)
        a = spec.blob_radius * (1.0 + 0.6 * shift) * jitter_a
        b = spec.blob_radius * jitter_b
        color = np.clip(blob_color_base + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)

        lo_r, hi_r = int(max(0, row - max_axis - 2)), int(min(size, row + max_axis + 3))
        lo_c, hi_c = int(max(0, col - max_axis - 2)), int(min(size, col + max_axis + 3))
        dy = yy[lo_r:hi_r, lo_c:hi_c] - row
        dx = xx[lo_r:hi_r, lo_c:hi_c] - col
        u = math.cos(theta) * dy + math.sin(theta) * dx
        v = -math.sin(theta) * dy + math.cos(theta) * dx
        dist = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        alpha = np.clip((1.0 - dist) * 3.0, 0.0, 1.0)
        region = img[lo_r:hi_r, lo_c:hi_c]
        region += alpha[..., None] * (color - region)

    img += rng.normal(0.0, spec.noise_level, img.shape)
    # sigma=0 (no shift) degenerates to the identity, keeping one code path
    img = gaussian_filter(img, sigma=(1.2 * shift, 1.2 * shift, 0.0))
    np.clip(img, 0.0, 1.0, out=img)
    return _quantize(img), centers


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Generate (source, target, target_test) datasets.

    Source samples carry dot annotations; target samples are unlabeled;
    target_test carries annotations for held-out evaluation only. Each image
    uses an independent spawned RNG stream, so generation is deterministic
    given ``seed`` and order-independent across images.
    """
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    total = spec.n_source + spec.n_target + spec.n_test
    children = np.random.SeedSequence(seed).spawn(total)

    def build(offset: int, n: int, prefix: str, shift: float, labeled: bool, tag: DomainTag):
        samples = []
        for i in range(n):
            rng = np.random.default_rng(children[offset + i])
            pixels, centers = _render_scene(rng, spec, shift)
            image_id = f"{prefix}{i:04d}"
            dots = DotAnnotationSet(centers, image_id=image_id) if labeled else None
            samples.append(Sample(Image(pixels, id=image_id), dots, tag))
        return samples

    s = spec.shift_strength
    source = build(0, spec.n_source, "src", 0.0, True, DomainTag.SOURCE)
    target = build(spec.n_source, spec.n_target, "tgt", s, False, DomainTag.TARGET)
    test = build(spec.n_source + spec.n_target, spec.n_test, "tst", s, True, DomainTag.TARGET)
    return (
        Dataset(tuple(source), name="synthetic-source"),
        Dataset(tuple(target), name="synthetic-target"),
        Dataset(tuple(test), name="synthetic-target-test"),
    )
