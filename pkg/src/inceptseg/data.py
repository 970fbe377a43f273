"""Image I/O, preprocessing and the synthetic blob generator.

Rasters are float arrays of shape (h, w, c) with values in [0, 1]; masks are
(h, w, 1) arrays holding exactly 0.0 or 1.0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (BitDepthError, ConfigError, DecodeError, ShapeError, TruncatedFileError,
                     UnsupportedFormatError)
from .rng import stream
from .tensor import bilinear_resize

IMAGE_SUFFIXES = (".pgm", ".ppm", ".png")
LUMA = np.array([0.299, 0.587, 0.114])

# ---------------------------------------------------------------------------
# Netpbm (binary P5 / P6)
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


@dataclass
class Netpbm:
    pixels: np.ndarray  # (h, w, c) unsigned integers
    maxval: int


def read_netpbm(data: bytes) -> Netpbm:
    """Decode P5/P6 bytes; 16-bit samples (maxval > 255) are big-endian."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"not a binary PGM/PPM (magic {magic!r})")
    pos, fields = 2, []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise TruncatedFileError("netpbm header ends early")
        try:
            fields.append(int(m.group(1)))
        except ValueError as exc:
            raise DecodeError(f"bad netpbm header field {m.group(1)!r}") from exc
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise DecodeError(f"invalid netpbm header {width}x{height} maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise TruncatedFileError("netpbm header is not followed by a whitespace byte")
    pos += 1  # exactly one whitespace byte separates header and raster
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedFileError(f"netpbm raster truncated: {len(payload)} of {need} bytes")
    pixels = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    return Netpbm(pixels.astype(np.uint16 if maxval > 255 else np.uint8), maxval)


def encode_netpbm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    """Encode integer pixels (h, w, 1|3) as P5/P6."""
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    h, w, c = pixels.shape
    if c not in (1, 3):
        raise ShapeError(f"netpbm holds 1 or 3 channels, got {c}")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.ascontiguousarray(pixels, dtype=dtype).tobytes()


# ---------------------------------------------------------------------------
# PNG (via Pillow) and the format-neutral entry points
# ---------------------------------------------------------------------------


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "RGB;16", "RGBA;16"):
                raise BitDepthError(f"{path}: {mode} PNG has more than 8 bits per sample")
            if mode not in ("L", "RGB"):
                raise UnsupportedFormatError(f"{path}: PNG mode {mode} (only 8-bit gray and RGB are read)")
            im.load()
            arr = np.asarray(im)
    except (BitDepthError, UnsupportedFormatError):
        raise
    except OSError as exc:
        if "truncated" in str(exc).lower():
            raise TruncatedFileError(f"{path}: {exc}") from exc
        raise DecodeError(f"{path}: {exc}") from exc
    except (SyntaxError, ValueError) as exc:  # Pillow signals broken streams with these too
        raise DecodeError(f"{path}: {exc}") from exc
    return arr[..., None] if arr.ndim == 2 else arr


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit PGM, PPM or PNG into floats in [0, 1], shape (h, w, c)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        img = read_netpbm(data)
        if img.maxval > 255:
            raise BitDepthError(f"{path}: maxval {img.maxval} exceeds 8 bits")
        return img.pixels.astype(np.float64) / img.maxval
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path).astype(np.float64) / 255.0
    raise UnsupportedFormatError(f"{path}: unrecognised image format")


def quantize(raster: np.ndarray, maxval: int) -> np.ndarray:
    return np.rint(np.clip(raster, 0.0, 1.0) * maxval).astype(np.uint16 if maxval > 255 else np.uint8)


def save_image(path: str | Path, raster: np.ndarray) -> Path:
    """Write a [0, 1] raster as 8-bit; the format follows the suffix."""
    path = Path(path)
    if raster.ndim == 2:
        raster = raster[..., None]
    pixels = quantize(raster, 255)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        path.write_bytes(encode_netpbm(pixels))
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(pixels[..., 0] if pixels.shape[2] == 1 else pixels).save(path)
    else:
        raise UnsupportedFormatError(f"cannot write {suffix!r} images")
    return path


def save_probability_map(path: str | Path, probs: np.ndarray) -> Path:
    """16-bit P5 holding round(p * 65535)."""
    path = Path(path)
    path.write_bytes(encode_netpbm(quantize(probs.reshape(probs.shape[0], probs.shape[1], 1), 65535), 65535))
    return path


def save_mask(path: str | Path, mask: np.ndarray) -> Path:
    """Binary P5 with values {0, 255}."""
    path = Path(path)
    m = (np.asarray(mask).reshape(mask.shape[0], mask.shape[1], 1) > 0).astype(np.uint8) * 255
    path.write_bytes(encode_netpbm(m))
    return path


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of a (..., 3) raster; returns (..., 1)."""
    if rgb.shape[-1] != 3:
        raise ShapeError(f"grayscale conversion needs 3 channels, got {rgb.shape[-1]}")
    return (rgb @ LUMA)[..., None]


def binarize_mask(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if mask.shape[-1] == 3:
        mask = to_grayscale(mask)
    return (mask >= threshold).astype(np.float64)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class SamplePair:
    image: np.ndarray  # (h, w, c)
    mask: np.ndarray  # (h, w, 1), {0, 1}
    source_id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise ShapeError(f"{self.source_id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if self.mask.ndim != 3 or self.mask.shape[2] != 1 or not np.isin(self.mask, (0.0, 1.0)).all():
            raise ShapeError(f"{self.source_id}: mask must be (h, w, 1) with values in {{0, 1}}")


@dataclass
class DatasetSpec:
    name: str = "dataset"
    input_size: tuple[int, int, int] = (64, 64, 1)
    grayscale: bool = True
    patch_size: int | None = None
    patch_count: int | None = None
    resize: tuple[int, int] | None = None
    val_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if (self.patch_size is None) != (self.patch_count is None):
            raise ConfigError("patching needs both patch_size and patch_count")


def _stems(folder: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_directory(root: str | Path, grayscale: bool = True, names: Iterable[str] | None = None) -> list[SamplePair]:
    """Read ``root/images`` and ``root/masks`` paired by file stem.

    ``names`` restricts loading to those stems (explicit split lists).
    """
    root = Path(root)
    images, masks = root / "images", root / "masks"
    if not images.is_dir() or not masks.is_dir():
        raise ConfigError(f"{root} must contain images/ and masks/ directories")
    img_files, mask_files = _stems(images), _stems(masks)
    wanted = sorted(img_files) if names is None else list(names)
    missing = [s for s in wanted if s not in img_files or s not in mask_files]
    if missing:
        raise ConfigError(f"{root}: no image/mask pair for {missing[:5]}")
    pairs = []
    for stem in wanted:
        image = load_image(img_files[stem])
        if grayscale and image.shape[2] == 3:
            image = to_grayscale(image)
        pairs.append(SamplePair(image, binarize_mask(load_image(mask_files[stem])), stem))
    return pairs


def stack(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    """Pairs -> (images (n, h, w, c), masks (n, h, w, 1))."""
    if not pairs:
        return np.zeros((0, 1, 1, 1)), np.zeros((0, 1, 1, 1))
    return np.stack([p.image for p in pairs]), np.stack([p.mask for p in pairs])


@dataclass
class PatchSet:
    images: np.ndarray  # (n, p, p, c)
    masks: np.ndarray  # (n, p, p, 1)
    corners: np.ndarray  # (n, 3): source index, row, col

    def __len__(self) -> int:
        return len(self.images)


def draw_corners(shapes: Sequence[tuple[int, int]], patch_size: int, total_count: int, seed: int) -> np.ndarray:
    """Source uniform over images, then corner uniform over valid positions."""
    rng = stream(seed, "patches")
    src = rng.integers(0, len(shapes), size=total_count)
    limits = np.array([(h - patch_size + 1, w - patch_size + 1) for h, w in shapes])
    rows = np.floor(rng.random(total_count) * limits[src, 0]).astype(np.int64)
    cols = np.floor(rng.random(total_count) * limits[src, 1]).astype(np.int64)
    return np.stack([src, rows, cols], axis=1)


def extract_random_patches(pairs: Sequence[SamplePair], patch_size: int, total_count: int, seed: int) -> PatchSet:
    if not pairs:
        raise ConfigError("no images to extract patches from")
    if patch_size < 1 or total_count < 0:
        raise ConfigError("patch_size must be positive and total_count non-negative")
    for p in pairs:
        h, w = p.image.shape[:2]
        if h < patch_size or w < patch_size:
            raise ConfigError(f"image {p.source_id!r} is {h}x{w}, smaller than patch size {patch_size}")
    corners = draw_corners([p.image.shape[:2] for p in pairs], patch_size, total_count, seed)
    c = pairs[0].image.shape[2]
    images = np.empty((total_count, patch_size, patch_size, c))
    masks = np.empty((total_count, patch_size, patch_size, 1))
    for k, (s, r, q) in enumerate(corners):
        images[k] = pairs[s].image[r:r + patch_size, q:q + patch_size]
        masks[k] = pairs[s].mask[r:r + patch_size, q:q + patch_size]
    return PatchSet(images, masks, corners)


def split_train_val(items: Sequence, val_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle, then the first round(fraction * N) items go to validation."""
    n = len(items)
    if n < 2:
        raise ConfigError(f"need at least 2 items to split, got {n}")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    order = stream(seed, "split").permutation(n)
    n_val = min(max(int(round(val_fraction * n)), 0), n)
    return [items[i] for i in order[n_val:]], [items[i] for i in order[:n_val]]


def resize_pair(pair: SamplePair, target: tuple[int, int]) -> SamplePair:
    h, w = target
    if h < 1 or w < 1:
        raise ConfigError(f"resize target must be positive, got {target}")
    image = bilinear_resize(pair.image[None], h, w)[0]
    mask = (bilinear_resize(pair.mask[None], h, w)[0] >= 0.5).astype(np.float64)
    return SamplePair(image, mask, pair.source_id)


def resize_dataset(pairs: Sequence[SamplePair], target: tuple[int, int]) -> list[SamplePair]:
    return [resize_pair(p, target) for p in pairs]


def prepare(pairs: Sequence[SamplePair], spec: DatasetSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply the resize and patching steps of ``spec`` and stack the result."""
    if spec.resize is not None:
        pairs = resize_dataset(pairs, spec.resize)
    if spec.patch_size is not None:
        patches = extract_random_patches(pairs, spec.patch_size, spec.patch_count, seed)
        return patches.images, patches.masks
    return stack(pairs)


# ---------------------------------------------------------------------------
# synthetic blobs
# ---------------------------------------------------------------------------

BACKGROUND, FOREGROUND, NOISE = 0.25, 0.75, 0.05


def _ellipse(size: int, cy: float, cx: float, ay: float, ax: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    cos, sin = np.cos(angle), np.sin(angle)
    u = (dx * cos + dy * sin) / ax
    v = (-dx * sin + dy * cos) / ay
    return u * u + v * v <= 1.0


def synthetic_pair(index: int, size: int, scale: str, seed: int) -> SamplePair:
    rng = stream(seed, "synth", scale, index)
    mask = np.zeros((size, size), dtype=bool)
    if scale == "small":
        for _ in range(max(1, size * size // 128)):
            r = rng.uniform(2.0, 4.0)
            cy, cx = rng.uniform(0, size, 2)
            ay, ax = r * rng.uniform(0.8, 1.2, 2)
            mask |= _ellipse(size, cy, cx, ay, ax, rng.uniform(0, np.pi))
    elif scale == "large":
        r = int(np.ceil(size / 4))
        ay, ax = r * rng.uniform(0.8, 1.2, 2)
        reach = max(ay, ax)
        cy, cx = rng.uniform(reach, size - reach, 2)
        mask = _ellipse(size, cy, cx, ay, ax, rng.uniform(0, np.pi))
    else:
        raise ConfigError(f"structure scale must be 'small' or 'large', got {scale!r}")
    image = np.where(mask, FOREGROUND, BACKGROUND) + rng.normal(0.0, NOISE, (size, size))
    return SamplePair(np.clip(image, 0.0, 1.0)[..., None], mask.astype(np.float64)[..., None],
                      f"synth_{scale}_{index:04d}")


def generate_synthetic(count: int, size: int, scale: str = "small", seed: int = 0) -> list[SamplePair]:
    """Noisy gray images with bright elliptical blobs; the mask is the blob support.

    ``small`` scatters size**2/128 blobs of radius 2-4; ``large`` places one
    blob of radius ceil(size/4) with per-axis jitter 0.8-1.2, fully inside.
    """
    if size < 8 or size % 8:
        raise ConfigError(f"synthetic size must be a positive multiple of 8, got {size}")
    if count < 0:
        raise ConfigError("count must be non-negative")
    return [synthetic_pair(i, size, scale, seed) for i in range(count)]


def write_pairs(root: str | Path, pairs: Sequence[SamplePair]) -> Path:
    """Lay pairs out as ``root/images/<id>.pgm|ppm`` and ``root/masks/<id>.pgm``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        suffix = ".pgm" if p.image.shape[2] == 1 else ".ppm"
        save_image(root / "images" / f"{p.source_id}{suffix}", p.image)
        save_mask(root / "masks" / f"{p.source_id}.pgm", p.mask)
    return root
