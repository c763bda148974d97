"""Loading, preprocessing and sampling of cover/payload images."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}
LUMA = (0.299, 0.587, 0.114)


class DataError(ValueError):
    pass


class IDXParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ImageSample:
    pixels: np.ndarray  # uint8, H x W x C
    id: str
    label: int | None = None

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.dtype != np.uint8:
            raise DataError(f"{self.id}: pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DataError(f"{self.id}: expected H x W x 1 or H x W x 3, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int = 0


# ---------------------------------------------------------------- IDX files

def _parse_idx(buf: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise IDXParseError(f"{what}: file too short for magic number", 0)
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise IDXParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise IDXParseError(f"{what}: header truncated, need {header_end} bytes, have {len(buf)}", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header_end < count:
        raise IDXParseError(f"{what}: payload truncated, expected {count} bytes of data", len(buf))
    if len(buf) - header_end > count:
        raise IDXParseError(f"{what}: {len(buf) - header_end - count} unexpected trailing bytes", header_end + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path=None) -> list[ImageSample]:
    """Read an IDX image file (and optionally its label file) into H x W x 1 samples."""
    images = _parse_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, str(images_path))
    labels = None
    if labels_path is not None:
        labels = _parse_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, str(labels_path))
        if len(labels) != len(images):
            raise DataError(f"{len(labels)} labels for {len(images)} images")
    return [
        ImageSample(images[i][:, :, None].copy(), str(i), None if labels is None else int(labels[i]))
        for i in range(len(images))
    ]


def write_idx(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(f">{images.ndim}I", *images.shape)
    Path(path).write_bytes(header + images.tobytes())


# ---------------------------------------------------------------- raster files

def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an H x W x C uint8 array.

    A target dimension of 1 samples the centre of the source instead.
    """
    src = pixels.astype(np.float64)
    h, w = src.shape[:2]

    def coords(n_out, n_in):
        if n_out == 1:
            return np.array([(n_in - 1) / 2.0])
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    ys, xs = coords(height, h), coords(width, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def load_image(path, mode: str | None = None) -> ImageSample:
    """Decode one raster file. ``mode`` is ``"RGB"``, ``"L"`` or None to keep 1/3 channels."""
    path = Path(path)
    with Image.open(path) as im:
        if mode is None:
            mode = "L" if im.mode in ("L", "1", "I", "I;16") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.uint8)
    return ImageSample(arr.copy(), path.name)


def save_image(sample: ImageSample | np.ndarray, path) -> None:
    pixels = sample.pixels if isinstance(sample, ImageSample) else sample
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(pixels).save(path)


def load_image_dir(path, resize_to: tuple[int, int] | None = None) -> list[ImageSample]:
    """Decode every PNG/PNM file of a directory to RGB, sorted by filename."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"not a directory: {path}")
    samples, skipped = [], 0
    for f in sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            s = load_image(f, "RGB")
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            log.warning("skipping %s: %s", f, exc)
            skipped += 1
            continue
        if resize_to is not None and (s.height, s.width) != tuple(resize_to):
            s = ImageSample(resize_bilinear(s.pixels, *resize_to), s.id)
        samples.append(s)
    if skipped:
        log.warning("%d undecodable file(s) skipped in %s", skipped, path)
    if not samples:
        raise DataError(f"no decodable images found in {path}")
    return samples


# ---------------------------------------------------------------- conversions

def to_grayscale(s: ImageSample, mode: str | int = "luma") -> ImageSample:
    """Collapse an RGB sample to one channel, by Rec. 601 luma or by picking a channel."""
    if s.channels != 3:
        raise DataError(f"{s.id}: grayscale conversion needs 3 channels, got {s.channels}")
    if mode == "luma":
        y = s.pixels.astype(np.float64) @ np.array(LUMA)
        out = np.clip(np.rint(y), 0, 255).astype(np.uint8)
    else:
        idx = int(mode)
        if not 0 <= idx <= 2:
            raise DataError(f"channel index must be 0, 1 or 2, got {idx}")
        out = s.pixels[:, :, idx].copy()
    return ImageSample(out[:, :, None], s.id, s.label)


def pad_center(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Zero-pad an H x W x C array to the target size, keeping it centred."""
    h, w = pixels.shape[:2]
    if h > height or w > width:
        raise DataError(f"cannot pad {h}x{w} into {height}x{width}")
    top, left = (height - h) // 2, (width - w) // 2
    out = np.zeros((height, width, pixels.shape[2]), dtype=pixels.dtype)
    out[top:top + h, left:left + w] = pixels
    return out


def normalize_array(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (..., H, W, C) -> zero-centred (..., C, H, W) floats in [-0.5, 0.5]."""
    x = np.moveaxis(pixels, -1, -3).astype(dtype)
    return x / dtype(255) - dtype(0.5)


def denormalize_array(x: np.ndarray) -> np.ndarray:
    """Zero-centred (..., C, H, W) floats -> uint8 (..., H, W, C), clamping out-of-range values."""
    x = np.asarray(x, dtype=np.float64)
    y = np.rint(np.clip(x + 0.5, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.moveaxis(y, -3, -1)


def normalize(s: ImageSample, dtype=np.float32) -> np.ndarray:
    return normalize_array(s.pixels, dtype)[None]


def denormalize(t: np.ndarray, id: str = "") -> ImageSample:
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise DataError(f"denormalize expects a single image, got batch of {t.shape[0]}")
        t = t[0]
    return ImageSample(denormalize_array(t), id)


# ---------------------------------------------------------------- sampling

def sample_pairs(train_ids: Sequence, batch_size: int, rng: np.random.Generator) -> list[tuple]:
    """Draw ``2 * batch_size`` distinct ids; first half are covers, second half payloads."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    ids = list(train_ids)
    if len(ids) < 2 * batch_size:
        raise DataError(f"need {2 * batch_size} distinct images for batch {batch_size}, have {len(ids)}")
    picks = rng.choice(len(ids), size=2 * batch_size, replace=False)
    return [(ids[picks[i]], ids[picks[batch_size + i]]) for i in range(batch_size)]


def split_dataset(ids: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffled train/val/test partition; val and test sizes are floored, train takes the rest."""
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty dataset")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ids)
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    n_test = int(np.floor(n * fractions[2] + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], seed)


@dataclass
class StegDataset:
    """Preprocessed images ready for training.

    Every image provides an RGB cover tensor and a single-channel payload
    tensor (its grayscale version, or a separately supplied payload padded
    to the cover size). Pairs index covers and payloads by position.
    """

    covers: np.ndarray    # N x 3 x H x W, zero-centred
    payloads: np.ndarray  # N x 1 x H x W, zero-centred
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.covers) != len(self.payloads):
            raise DataError("covers and payloads must have the same length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.covers))]

    def __len__(self):
        return len(self.covers)

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample], payload_mode: str | int = "luma",
                     payloads: Sequence[ImageSample] | None = None, dtype=np.float32) -> "StegDataset":
        if not samples:
            raise DataError("no samples")
        dims = {(s.height, s.width) for s in samples}
        if len(dims) != 1:
            raise DataError(f"all covers must share one size, found {sorted(dims)}; resize first")
        (h, w), = dims
        rgb = [s if s.channels == 3 else ImageSample(np.repeat(s.pixels, 3, axis=2), s.id) for s in samples]
        covers = np.stack([s.pixels for s in rgb])
        if payloads is None:
            gray = np.stack([to_grayscale(s, payload_mode).pixels for s in rgb])
        else:
            if len(payloads) != len(samples):
                raise DataError("need one payload per cover")
            gray = np.stack([prepare_payload(p, h, w, payload_mode).pixels for p in payloads])
        return cls(normalize_array(covers, dtype), normalize_array(gray, dtype), [s.id for s in samples])

    def subset(self, indices) -> "StegDataset":
        indices = list(indices)
        return StegDataset(self.covers[indices], self.payloads[indices], [self.ids[i] for i in indices])

    def batch(self, pairs) -> tuple[np.ndarray, np.ndarray]:
        cover_idx = [c for c, _ in pairs]
        payload_idx = [p for _, p in pairs]
        return self.covers[cover_idx], self.payloads[payload_idx]


def prepare_payload(s: ImageSample, height: int, width: int, mode: str | int = "luma") -> ImageSample:
    """Single-channel payload at cover size: grayscale if needed, pad if smaller, resize if larger."""
    if s.channels == 3:
        s = to_grayscale(s, mode)
    px = s.pixels
    if px.shape[0] > height or px.shape[1] > width:
        log.warning("payload %s is %dx%d, resizing to %dx%d", s.id, px.shape[0], px.shape[1], height, width)
        px = resize_bilinear(px, height, width)
    elif px.shape[:2] != (height, width):
        px = pad_center(px, height, width)
    return ImageSample(px, s.id, s.label)


def synthetic_images(n: int, size: int = 32, seed: int = 0) -> list[ImageSample]:
    """Smooth random colour fields with a few hard-edged shapes, for tests and demos."""
    rng = np.random.default_rng(seed)
    out = []
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        coarse = rng.uniform(0, 255, size=(4, 4, 3))
        img = resize_bilinear(coarse.astype(np.uint8), size, size).astype(np.float64)
        for _ in range(rng.integers(1, 4)):
            color = rng.uniform(0, 255, size=3)
            if rng.random() < 0.5:
                cy, cx, r = rng.uniform(0, size, 2).tolist() + [rng.uniform(size / 8, size / 3)]
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            else:
                y0, x0 = rng.integers(0, size - 4, 2)
                y1, x1 = y0 + rng.integers(3, size // 2), x0 + rng.integers(3, size // 2)
                mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
            img[mask] = 0.5 * img[mask] + 0.5 * color
        img += rng.normal(0, 4, size=img.shape)
        out.append(ImageSample(np.clip(np.rint(img), 0, 255).astype(np.uint8), f"synth{i:05d}"))
    return out
