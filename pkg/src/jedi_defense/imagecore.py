"""Pixel containers, image I/O, synthetic scenes and patch pasting.

Images are plain ``numpy.uint8`` arrays, either ``(H, W)`` grayscale or
``(H, W, 3)`` RGB. Masks are ``bool`` arrays of shape ``(H, W)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from jedi_defense.errors import CorruptImageError, FormatError, PlacementError, UnsupportedFormatError

LOADABLE_FORMATS = {"PNG", "PPM"}
SAVE_EXTENSIONS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}

SHAPE_KINDS = ("rectangle", "ellipse")


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate the pixel layout and return the array unchanged."""
    if not isinstance(image, np.ndarray) or image.dtype != np.uint8:
        raise FormatError("image must be a uint8 numpy array")
    if image.ndim == 2:
        pass
    elif image.ndim == 3 and image.shape[2] in (1, 3):
        pass
    else:
        raise FormatError(f"unsupported image shape {image.shape}; expected (H, W) or (H, W, 3)")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise FormatError("image must be at least 1x1")
    return image


def channels(image: np.ndarray) -> int:
    return 1 if image.ndim == 2 else image.shape[2]


def to_gray(image: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded to nearest integer (half up), as ``(H, W)`` uint8.

    Integer arithmetic keeps the conversion bit-exact across platforms.
    """
    check_image(image)
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[:, :, 0]
    rgb = image.astype(np.int32)
    y = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return y.astype(np.uint8)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    id: str = "patch"

    def __post_init__(self):
        check_image(self.pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return channels(self.pixels)


def apply_patch(image: np.ndarray, patch: Patch, location: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Paste ``patch`` with its top-left corner at ``location = (x, y)``.

    Returns the patched copy and the ground-truth footprint mask.
    """
    check_image(image)
    if channels(image) != patch.channels:
        raise FormatError(f"channel mismatch: image has {channels(image)}, patch has {patch.channels}")
    x, y = location
    h, w = image.shape[:2]
    if x < 0 or y < 0 or x + patch.width > w or y + patch.height > h:
        raise PlacementError(
            f"{patch.width}x{patch.height} patch at ({x}, {y}) does not fit in {w}x{h} image"
        )
    out = image.copy()
    out[y : y + patch.height, x : x + patch.width] = patch.pixels
    mask = np.zeros((h, w), dtype=bool)
    mask[y : y + patch.height, x : x + patch.width] = True
    return out, mask


def random_location(image_shape, patch: Patch, rng: np.random.Generator) -> tuple[int, int]:
    h, w = image_shape[:2]
    if patch.width > w or patch.height > h:
        raise PlacementError("patch larger than image")
    return int(rng.integers(0, w - patch.width + 1)), int(rng.integers(0, h - patch.height + 1))


@dataclass
class Scene:
    image: np.ndarray
    label: str
    shapes: list[dict] = field(default_factory=list)


def _shape_mask(kind: str, x0: int, y0: int, sw: int, sh: int, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if kind == "rectangle":
        mask[y0 : y0 + sh, x0 : x0 + sw] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = y0 + (sh - 1) / 2.0, x0 + (sw - 1) / 2.0
        mask = ((xx - cx) / (sw / 2.0)) ** 2 + ((yy - cy) / (sh / 2.0)) ** 2 <= 1.0
    return mask


def gen_scene(width: int, height: int, seed: int, channels: int = 1) -> Scene:
    """Generate a piecewise-smooth synthetic scene with a dominant-shape label.

    The background is a sum of 2-4 linear gradients; 1-3 non-overlapping flat
    rectangles/ellipses are added as constant offsets, then a 3x3 box blur is
    applied. The label is the kind of the largest shape.
    """
    if width < 32 or height < 32:
        raise ValueError("scene dimensions must be >= 32")
    if channels not in (1, 3):
        raise FormatError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u = xx / max(width - 1, 1) - 0.5
    v = yy / max(height - 1, 1) - 0.5

    base = rng.uniform(70.0, 180.0)
    img = np.full((height, width), base)
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(10.0, 30.0)
        img += amp * (np.cos(theta) * u + np.sin(theta) * v)

    shapes: list[dict] = []
    boxes: list[tuple[int, int, int, int]] = []
    sign = -1.0 if base > 125.0 else 1.0
    for _ in range(int(rng.integers(1, 4))):
        kind = SHAPE_KINDS[int(rng.integers(0, 2))]
        sw = int(rng.uniform(0.2, 0.45) * width)
        sh = int(rng.uniform(0.2, 0.45) * height)
        offset = sign * rng.uniform(45.0, 75.0)
        for _attempt in range(50):
            x0 = int(rng.integers(0, width - sw + 1))
            y0 = int(rng.integers(0, height - sh + 1))
            margin = 4
            if all(
                x0 + sw + margin <= bx or bx + bw + margin <= x0 or y0 + sh + margin <= by or by + bh + margin <= y0
                for bx, by, bw, bh in boxes
            ):
                break
        else:
            continue
        boxes.append((x0, y0, sw, sh))
        mask = _shape_mask(kind, x0, y0, sw, sh, height, width)
        img[mask] += offset
        shapes.append({"kind": kind, "x": x0, "y": y0, "width": sw, "height": sh, "area": int(mask.sum())})

    img = ndimage.uniform_filter(np.clip(img, 0.0, 255.0), size=3, mode="nearest")
    gray = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if channels == 3:
        tint = np.array([1.0, 0.92, 0.84])
        out = np.clip(np.rint(gray[..., None] * tint), 0, 255).astype(np.uint8)
    else:
        out = gray
    label = max(shapes, key=lambda s: s["area"])["kind"] if shapes else "none"
    return Scene(image=out, label=label, shapes=shapes)


def gen_smooth_scene(width: int, height: int, seed: int, constant: int | None = None, channels: int = 1) -> np.ndarray:
    """Pixels of :func:`gen_scene`; ``constant`` gives a flat single-value image instead."""
    if width < 32 or height < 32:
        raise ValueError("scene dimensions must be >= 32")
    if constant is not None:
        shape = (height, width) if channels == 1 else (height, width, channels)
        return np.full(shape, constant, dtype=np.uint8)
    return gen_scene(width, height, seed, channels=channels).image


def gen_noise_patch(size, seed: int, channels: int = 1) -> Patch:
    """I.i.d. uniform 8-bit noise patch. ``size`` is a side length or ``(height, width)``."""
    h, w = (size, size) if np.isscalar(size) else size
    if h < 8 or w < 8:
        raise ValueError("patch size must be >= 8")
    rng = np.random.default_rng(seed)
    shape = (h, w) if channels == 1 else (h, w, channels)
    pixels = rng.integers(0, 256, size=shape, dtype=np.uint8)
    return Patch(pixels=pixels, id=f"noise-{h}x{w}-s{seed}")


def load_image(path) -> np.ndarray:
    """Load a PNG or binary PGM/PPM file as a uint8 array."""
    path = os.fspath(path)
    try:
        pil = PILImage.open(path)
    except FileNotFoundError:
        raise
    except PILImage.UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: unrecognised image format") from exc
    except OSError as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    with pil:
        if pil.format not in LOADABLE_FORMATS:
            raise UnsupportedFormatError(f"{path}: format {pil.format} not supported (PNG, PGM/PPM only)")
        try:
            pil.load()
        except (OSError, SyntaxError, ValueError) as exc:
            raise CorruptImageError(f"{path}: {exc}") from exc
        mode = pil.mode
        if mode in ("1", "L"):
            arr = np.asarray(pil.convert("L"))
        elif mode == "RGB":
            arr = np.asarray(pil)
        elif mode in ("P", "RGBA"):
            arr = np.asarray(pil.convert("RGB"))
        elif mode == "LA":
            arr = np.asarray(pil.convert("L"))
        else:
            raise UnsupportedFormatError(f"{path}: pixel mode {mode} not supported (8-bit only)")
    return np.array(arr, dtype=np.uint8)


def save_image(image: np.ndarray, path) -> None:
    """Save losslessly; the format follows the file extension."""
    check_image(image)
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    fmt = SAVE_EXTENSIONS.get(ext)
    if fmt is None:
        raise UnsupportedFormatError(f"cannot save {path}: use .png, .pgm or .ppm")
    arr = image[:, :, 0] if image.ndim == 3 and image.shape[2] == 1 else image
    if ext == ".pgm" and arr.ndim != 2:
        raise FormatError("PGM holds grayscale images only")
    if ext == ".ppm" and arr.ndim != 3:
        raise FormatError("PPM holds RGB images only")
    PILImage.fromarray(np.ascontiguousarray(arr)).save(path, format=fmt)


def mask_to_image(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


def image_to_mask(image: np.ndarray) -> np.ndarray:
    return to_gray(image) >= 128


def save_mask(mask: np.ndarray, path) -> None:
    save_image(mask_to_image(mask), path)


def load_mask(path) -> np.ndarray:
    return image_to_mask(load_image(path))
