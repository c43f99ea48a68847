"""Image I/O, color handling, bicubic degradation, and patch sampling.

Images travel as (H, W, 3) buffers in one of two spaces: 8-bit sRGB or real
values in [0, 1].  The degradation operator is the antialiased Keys (a = -0.5)
bicubic used to make standard benchmark LR/HR pairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, ShapeError

SRGB_U8 = "srgb-u8"
LINEAR_REAL = "linear-real"

ROTATIONS = (0, 90, 180, 270)


@dataclass
class ImageBuffer:
    """An H x W x 3 image in a declared space: uint8 sRGB or real [0, 1]."""

    pixels: np.ndarray
    space: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"images are (H,W,3), got shape {self.pixels.shape}")
        if self.space not in (SRGB_U8, LINEAR_REAL):
            raise ConfigError(f"unknown color space {self.space!r}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def as_real(self) -> "ImageBuffer":
        """u8 -> value/255; real buffers pass through unchanged."""
        if self.space == LINEAR_REAL:
            return self
        return ImageBuffer(self.pixels.astype(np.float32) / 255.0, LINEAR_REAL)

    def as_u8(self) -> "ImageBuffer":
        """real -> round(value*255) clamped; u8 buffers pass through unchanged."""
        if self.space == SRGB_U8:
            return self
        quantized = np.clip(np.rint(self.pixels.astype(np.float64) * 255.0), 0, 255)
        return ImageBuffer(quantized.astype(np.uint8), SRGB_U8)


@dataclass
class PatchSample:
    """Aligned LR/HR crop pair in CHW layout, with its augmentation record."""

    lr_patch: np.ndarray    # (3, p, p) float32
    hr_patch: np.ndarray    # (3, r*p, r*p) float32
    rotation: int           # degrees, one of 0/90/180/270
    hflip: bool


# ---------------------------------------------------------------------------
# bicubic resampling

def _keys_cubic(x: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = 1.5 * ax3 - 2.5 * ax2 + 1.0
    far = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, near, np.where(ax <= 2.0, far, 0.0))


def _resample_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output tap indices and normalized weights along one axis.

    When downscaling, the kernel is stretched by the scale factor
    (antialiasing); source coordinates are clamped at the edges.
    """
    scale = n_out / n_in
    if scale >= 1.0:
        kernel_scale = 1.0
        support = 2.0
    else:
        kernel_scale = scale
        support = 2.0 / scale
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(np.int64) + 1
    n_taps = int(np.ceil(2.0 * support)) + 2
    idx = left[:, None] + np.arange(n_taps)[None, :]
    weights = _keys_cubic((centers[:, None] - idx) * kernel_scale) * kernel_scale
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    return idx, weights


def _resample_axis(arr: np.ndarray, idx: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Apply 1-D taps along axis 0 of a float64 array."""
    out = np.zeros((idx.shape[0],) + arr.shape[1:])
    for t in range(idx.shape[1]):
        out += weights[:, t].reshape((-1,) + (1,) * (arr.ndim - 1)) * arr[idx[:, t]]
    return out


def bicubic_resize(img: ImageBuffer, out_h: int, out_w: int) -> ImageBuffer:
    """Separable antialiased bicubic resize; returns a real-space buffer."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target size must be positive, got {out_h}x{out_w}")
    src = img.as_real().pixels.astype(np.float64)
    idx_h, w_h = _resample_weights(src.shape[0], out_h)
    idx_w, w_w = _resample_weights(src.shape[1], out_w)
    tmp = _resample_axis(src, idx_h, w_h)
    out = _resample_axis(tmp.transpose(1, 0, 2), idx_w, w_w).transpose(1, 0, 2)
    return ImageBuffer(out.astype(np.float32), LINEAR_REAL)


def rgb_to_y(img: ImageBuffer) -> np.ndarray:
    """BT.601 studio-swing luminance of a real-space image, in [0, 1]."""
    p = img.as_real().pixels.astype(np.float64)
    y = (65.481 * p[:, :, 0] + 128.553 * p[:, :, 1] + 24.966 * p[:, :, 2] + 16.0) / 255.0
    return y.astype(np.float32)


# ---------------------------------------------------------------------------
# cropping, augmentation, patch sampling

def center_crop_multiple(img: ImageBuffer, r: int) -> ImageBuffer:
    """Center-crop so both spatial dims are divisible by r."""
    h, w = img.height, img.width
    ch, cw = (h // r) * r, (w // r) * r
    if ch < r or cw < r:
        raise DataError(f"image {h}x{w} too small to crop to a multiple of {r}")
    top = (h - ch) // 2
    left = (w - cw) // 2
    return ImageBuffer(img.pixels[top:top + ch, left:left + cw].copy(), img.space)


def apply_augmentation(patch: np.ndarray, rotation: int, hflip: bool) -> np.ndarray:
    """Apply hflip then rotation to a CHW patch (the dihedral-4 generators)."""
    if rotation not in ROTATIONS:
        raise ConfigError(f"rotation must be one of {ROTATIONS}, got {rotation}")
    out = patch
    if hflip:
        out = out[:, :, ::-1]
    k = rotation // 90
    if k:
        out = np.rot90(out, k=k, axes=(1, 2))
    return np.ascontiguousarray(out)


def invert_augmentation(patch: np.ndarray, rotation: int, hflip: bool) -> np.ndarray:
    """Inverse of :func:`apply_augmentation`."""
    out = patch
    k = rotation // 90
    if k:
        out = np.rot90(out, k=-k, axes=(1, 2))
    if hflip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def sample_patch(
    hr: ImageBuffer, lr: ImageBuffer, p: int, r: int, rng: np.random.Generator
) -> PatchSample:
    """Uniform random aligned LR/HR crop with a random dihedral augmentation."""
    hr = hr.as_real()
    lr = lr.as_real()
    if hr.height != lr.height * r or hr.width != lr.width * r:
        raise ShapeError(
            f"HR {hr.height}x{hr.width} is not exactly {r}x the LR {lr.height}x{lr.width}"
        )
    if p > min(lr.height, lr.width):
        raise ShapeError(f"patch size {p} exceeds LR image {lr.height}x{lr.width}")
    top = int(rng.integers(0, lr.height - p + 1))
    left = int(rng.integers(0, lr.width - p + 1))
    lr_patch = lr.pixels[top:top + p, left:left + p].transpose(2, 0, 1)
    hr_patch = hr.pixels[top * r:(top + p) * r, left * r:(left + p) * r].transpose(2, 0, 1)
    rotation = ROTATIONS[int(rng.integers(0, 4))]
    hflip = bool(rng.integers(0, 2))
    return PatchSample(
        lr_patch=apply_augmentation(lr_patch.astype(np.float32), rotation, hflip),
        hr_patch=apply_augmentation(hr_patch.astype(np.float32), rotation, hflip),
        rotation=rotation,
        hflip=hflip,
    )


# ---------------------------------------------------------------------------
# PNG I/O

def load_png(path, strict: bool = False) -> ImageBuffer:
    """Load an 8-bit RGB PNG; other PNG flavors convert with a warning,
    or are rejected when ``strict`` is set."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                if strict:
                    raise DataError(f"{path}: mode {im.mode} is not 8-bit RGB (strict)")
                warnings.warn(f"{path}: converting {im.mode} PNG to 8-bit RGB")
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DataError(f"corrupt or non-image file: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return ImageBuffer(arr, SRGB_U8)


def save_png(img: ImageBuffer, path) -> None:
    path = Path(path)
    try:
        Image.fromarray(img.as_u8().pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets

class SrDataset:
    """In-memory list of HR images with LR counterparts derived or supplied."""

    def __init__(self, pairs: list[tuple[ImageBuffer, ImageBuffer]]):
        self._pairs = pairs

    def __len__(self) -> int:
        return len(self._pairs)

    def pair(self, i: int) -> tuple[ImageBuffer, ImageBuffer]:
        return self._pairs[i]

    @classmethod
    def from_images(cls, hr_images: list[ImageBuffer], scale: int) -> "SrDataset":
        pairs = []
        for hr in hr_images:
            hr = center_crop_multiple(hr.as_real(), scale)
            lr = bicubic_resize(hr, hr.height // scale, hr.width // scale)
            pairs.append((hr, lr))
        return cls(pairs)

    @classmethod
    def from_folder(cls, hr_dir, scale: int, lr_dir=None) -> "SrDataset":
        """HR PNG directory; a sibling LR directory with identical file names
        takes precedence over on-the-fly degradation."""
        hr_dir = Path(hr_dir)
        if not hr_dir.is_dir():
            raise DataError(f"dataset directory not found: {hr_dir}")
        paths = sorted(hr_dir.glob("*.png"))
        if not paths:
            raise DataError(f"no PNG files in {hr_dir}")
        pairs = []
        for path in paths:
            hr = center_crop_multiple(load_png(path).as_real(), scale)
            lr_path = Path(lr_dir) / path.name if lr_dir else None
            if lr_path is not None and lr_path.exists():
                lr = load_png(lr_path).as_real()
                if (lr.height, lr.width) != (hr.height // scale, hr.width // scale):
                    raise DataError(
                        f"{lr_path}: LR size {lr.height}x{lr.width} does not match "
                        f"HR/{scale} = {hr.height // scale}x{hr.width // scale}"
                    )
            else:
                lr = bicubic_resize(hr, hr.height // scale, hr.width // scale)
            pairs.append((hr, lr))
        return cls(pairs)


def degrade_folder(in_dir, out_dir, scale: int) -> int:
    """Materialize the LR counterpart of every PNG in a directory.

    Each HR image is center-cropped to a multiple of the scale first, then
    bicubic-downscaled.  Returns the number of images written.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory not found: {in_dir}")
    paths = sorted(in_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG files in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in paths:
        hr = center_crop_multiple(load_png(path).as_real(), scale)
        lr = bicubic_resize(hr, hr.height // scale, hr.width // scale)
        save_png(lr, out_dir / path.name)
    return len(paths)
