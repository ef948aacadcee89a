"""Dataset ingestion, synthetic face glyphs, preprocessing, and the JPEG round-trip.

Image conventions used throughout the package:

- raw images are ``uint8`` RGB arrays of shape ``(H, W, 3)``;
- model-facing images are ``float32`` torch tensors of shape ``(3, H, W)``
  with every value in ``[-1, 1]`` (``v / 127.5 - 1``).

Annotation files are CSV with header ``filename,x_min,y_min,x_max,y_max``,
one row per box, pixel units.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from .seeding import derive_seed

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DataError(ValueError):
    """Raised for unusable datasets or invalid data-level arguments."""


@dataclass
class RawImage:
    """8-bit RGB image plus where it came from (if anywhere)."""

    pixels: np.ndarray
    source_path: str | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise DataError(f"expected uint8 pixels, got {self.pixels.dtype}")
        h, w = self.pixels.shape[:2]
        if h < 16 or w < 16:
            raise DataError(f"image too small: {h}x{w}, need at least 16x16")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned face box in pixel coordinates, corners (x_min, y_min, x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: str = "face"

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class ImageSet:
    """Ordered collection of (image, boxes) pairs; order is deterministic for a fixed seed."""

    items: list[tuple[RawImage, list[GroundTruthBox]]]
    split_name: str
    seed: int
    skipped: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def total_boxes(self) -> int:
        return sum(len(boxes) for _, boxes in self.items)


def boxes_to_tensor(boxes: list[GroundTruthBox]) -> torch.Tensor:
    """Stack ground-truth boxes into an (N, 4) float tensor (empty -> (0, 4))."""
    if not boxes:
        return torch.zeros((0, 4), dtype=torch.float32)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=torch.float32)


def scale_boxes(
    boxes: list[GroundTruthBox],
    from_size: tuple[int, int],
    to_size: tuple[int, int],
) -> list[GroundTruthBox]:
    """Rescale boxes when an image goes from (h0, w0) to (h, w)."""
    h0, w0 = from_size
    h, w = to_size
    sy, sx = h / h0, w / w0
    return [
        GroundTruthBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy, b.label)
        for b in boxes
    ]


def load_folder(path: str | Path, annotations: str | Path) -> ImageSet:
    """Load every decodable PNG/JPEG under ``path`` with boxes from the annotation CSV.

    Items are sorted lexicographically by filename. Images without annotation
    rows get empty box lists; undecodable images are skipped with a warning and
    listed in ``ImageSet.skipped``.
    """
    folder = Path(path)
    if not folder.is_dir():
        raise DataError(f"dataset directory not found: {folder}")

    boxes_by_name: dict[str, list[GroundTruthBox]] = {}
    ann_path = Path(annotations)
    if not ann_path.is_file():
        raise DataError(f"annotation file not found: {ann_path}")
    with open(ann_path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"filename", "x_min", "y_min", "x_max", "y_max"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise DataError(
                f"annotation header must contain {sorted(expected)}, got {reader.fieldnames}"
            )
        for row in reader:
            box = GroundTruthBox(
                float(row["x_min"]), float(row["y_min"]),
                float(row["x_max"]), float(row["y_max"]),
            )
            boxes_by_name.setdefault(row["filename"], []).append(box)

    names = sorted(p.name for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not names:
        raise DataError(f"no images found in {folder}")

    items: list[tuple[RawImage, list[GroundTruthBox]]] = []
    skipped: list[str] = []
    for name in names:
        full = folder / name
        try:
            with Image.open(full) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", full, exc)
            skipped.append(name)
            continue
        items.append((RawImage(pixels, str(full)), boxes_by_name.get(name, [])))

    if not items:
        raise DataError(f"no images found in {folder} (all {len(skipped)} files undecodable)")
    return ImageSet(items, split_name=folder.name, seed=0, skipped=tuple(skipped))


def export_imageset(dataset: ImageSet, directory: str | Path) -> Path:
    """Write a dataset to disk as PNGs plus ``annotations.csv`` (the load_folder format)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(dataset.items))))
    with open(out / "annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "x_min", "y_min", "x_max", "y_max"])
        for i, (img, boxes) in enumerate(dataset.items):
            name = f"{i:0{width}d}.png"
            Image.fromarray(img.pixels).save(out / name, format="PNG")
            for b in boxes:
                writer.writerow([name, b.x_min, b.y_min, b.x_max, b.y_max])
    return out


# ---------------------------------------------------------------------------
# Synthetic face glyphs


def _textured_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Darkish background: coarse color blotches upsampled bilinearly, plus grain."""
    ch, cw = max(2, height // 16), max(2, width // 16)
    coarse = rng.uniform(35.0, 105.0, size=(ch, cw, 3)).astype(np.uint8)
    base = np.asarray(
        Image.fromarray(coarse).resize((width, height), Image.BILINEAR), dtype=np.float64
    )
    grain = rng.normal(0.0, 6.0, size=(height, width, 3))
    return np.clip(base + grain, 0, 255).astype(np.uint8)


def _draw_face_glyph(draw: ImageDraw.ImageDraw, rng: np.random.Generator,
                     cx: float, cy: float, rx: float, ry: float) -> None:
    skin = (
        int(rng.integers(195, 236)),
        int(rng.integers(150, 196)),
        int(rng.integers(120, 166)),
    )
    dark = (int(rng.integers(15, 55)),) * 3
    draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=skin, outline=dark)
    eye_rx, eye_ry = rx * 0.16, ry * 0.13
    for side in (-1.0, 1.0):
        ex, ey = cx + side * rx * 0.38, cy - ry * 0.28
        draw.ellipse([ex - eye_rx, ey - eye_ry, ex + eye_rx, ey + eye_ry], fill=dark)
    mouth = (int(rng.integers(110, 150)), int(rng.integers(30, 60)), int(rng.integers(30, 60)))
    mw, mh = rx * 0.5, ry * 0.14
    my = cy + ry * 0.45
    draw.ellipse([cx - mw, my - mh, cx + mw, my + mh], fill=mouth)


def _boxes_disjoint(box: tuple[float, float, float, float],
                    others: list[tuple[float, float, float, float]]) -> bool:
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in others:
        if x0 < a1 and a0 < x1 and y0 < b1 and b0 < y1:
            return False
    return True


def synth_faces(n: int, canvas: tuple[int, int], seed: int) -> ImageSet:
    """Procedural dataset: 1-3 non-overlapping face glyphs per image on textured background.

    Identical (n, canvas, seed) arguments produce byte-identical datasets.
    """
    if n < 1:
        raise DataError(f"need n >= 1 images, got {n}")
    height, width = canvas
    if height < 64 or width < 64:
        raise DataError(f"canvas too small to place one glyph: {height}x{width}, need >= 64x64")

    rng = np.random.default_rng(derive_seed(seed, "synth-faces"))
    items: list[tuple[RawImage, list[GroundTruthBox]]] = []
    short = min(height, width)
    for _ in range(n):
        background = _textured_background(rng, height, width)
        im = Image.fromarray(background)
        draw = ImageDraw.Draw(im)
        wanted = int(rng.integers(1, 4))
        placed: list[tuple[float, float, float, float]] = []
        boxes: list[GroundTruthBox] = []
        attempts = 0
        while len(placed) < wanted and attempts < 80:
            attempts += 1
            rx = float(rng.uniform(max(8.0, 0.11 * short), 0.21 * short))
            ry = rx * float(rng.uniform(1.05, 1.3))
            cx = float(rng.uniform(rx + 2, width - rx - 2))
            cy = float(rng.uniform(ry + 2, height - ry - 2))
            box = (cx - rx, cy - ry, cx + rx, cy + ry)
            if not _boxes_disjoint(box, placed):
                continue
            _draw_face_glyph(draw, rng, cx, cy, rx, ry)
            placed.append(box)
            boxes.append(GroundTruthBox(*box))
        if not boxes:
            raise DataError(f"failed to place any glyph on a {height}x{width} canvas")
        items.append((RawImage(np.asarray(im, dtype=np.uint8)), boxes))
    return ImageSet(items, split_name=f"synth-{n}-{seed}", seed=seed)


def synth_backgrounds(n: int, canvas: tuple[int, int], seed: int) -> ImageSet:
    """Face-free textured canvases (negatives for probing a trained detector)."""
    if n < 1:
        raise DataError(f"need n >= 1 images, got {n}")
    height, width = canvas
    rng = np.random.default_rng(derive_seed(seed, "synth-backgrounds"))
    items = [
        (RawImage(_textured_background(rng, height, width)), [])
        for _ in range(n)
    ]
    return ImageSet(items, split_name=f"synth-bg-{n}-{seed}", seed=seed)


# ---------------------------------------------------------------------------
# Preprocessing and JPEG


def preprocess(img: RawImage, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear-resize to ``target`` (h, w) and normalize to a (3, H, W) tensor in [-1, 1]."""
    th, tw = target
    if th < 16 or tw < 16:
        raise DataError(f"target too small: {th}x{tw}")
    if (img.height, img.width) == (th, tw):
        resized = img.pixels
    else:
        resized = np.asarray(
            Image.fromarray(img.pixels).resize((tw, th), Image.BILINEAR), dtype=np.uint8
        )
    values = resized.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(values).permute(2, 0, 1).contiguous()


def validate_image_tensor(x: torch.Tensor) -> None:
    """Assert the (3, H, W), float, [-1, 1] image-tensor contract."""
    if x.ndim != 3 or x.shape[0] != 3:
        raise DataError(f"expected (3, H, W) tensor, got shape {tuple(x.shape)}")
    if not torch.is_floating_point(x):
        raise DataError(f"expected floating tensor, got {x.dtype}")
    lo, hi = float(x.min()), float(x.max())
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise DataError(f"image values outside [-1, 1]: min={lo:.4f} max={hi:.4f}")


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Denormalize a [-1, 1] (3, H, W) tensor back to a uint8 (H, W, 3) array."""
    arr = x.detach().permute(1, 2, 0).cpu().numpy()
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def jpeg_roundtrip(img: torch.Tensor, quality: int) -> torch.Tensor:
    """Encode as baseline JPEG at ``quality`` and decode back, same shape and range.

    Chroma is subsampled 4:2:0 below quality 90 and kept 4:4:4 at 90 and above,
    mirroring common encoder defaults.
    """
    if not isinstance(quality, (int, np.integer)) or isinstance(quality, bool):
        raise DataError(f"quality must be an integer, got {quality!r}")
    if not 1 <= quality <= 100:
        raise DataError(f"quality must be in [1, 100], got {quality}")
    validate_image_tensor(img)
    pixels = to_uint8(img)
    buf = io.BytesIO()
    try:
        Image.fromarray(pixels).save(
            buf, format="JPEG", quality=int(quality),
            subsampling=0 if quality >= 90 else 2,
        )
        buf.seek(0)
        decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise RuntimeError(f"JPEG round-trip failed at quality={quality}: {exc}") from exc
    values = decoded / 127.5 - 1.0
    return torch.from_numpy(values).permute(2, 0, 1).contiguous()
