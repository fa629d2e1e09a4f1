"""8-bit RGB PNG <-> [0, 1] float tensors."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"}


class ImageFormatError(ValueError):
    pass


@dataclass
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ImageFormatError(
                f"pixel buffer {self.pixels.shape}/{self.pixels.dtype} does not match {self.width}x{self.height} RGB8"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RgbImage":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)


def _to_rgb8(img: Image.Image) -> np.ndarray:
    mode = img.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        log.warning("converting %s-mode image to 8-bit", mode)
        arr = np.asarray(img, dtype=np.int64)
        if arr.max(initial=0) > 255:
            arr = arr >> 8
        arr = np.clip(arr, 0, 255).astype(np.uint8)
        return np.repeat(arr[..., None], 3, axis=-1)
    if mode == "F":
        log.warning("converting floating-point image to 8-bit")
        arr = np.clip(np.asarray(img), 0, 255).astype(np.uint8)
        return np.repeat(arr[..., None], 3, axis=-1)
    if mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def decode_image(data: bytes) -> RgbImage:
    """Decode any Pillow-readable still image; grayscale and alpha are folded into RGB."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            return RgbImage.from_array(_to_rgb8(img))
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"cannot decode image: {exc}") from exc


decode_png = decode_image


def encode_png(image: RgbImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def to_tensor(image: RgbImage) -> np.ndarray:
    """(1, 3, H, W) float32 in [0, 1]."""
    return (image.pixels.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)[None].copy()


def from_tensor(t: np.ndarray) -> RgbImage:
    """Clamp to [0, 1] and quantize with round-half-up. Accepts (1, 3, H, W) or (3, H, W)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ImageFormatError(f"from_tensor takes a single image, got batch of {t.shape[0]}")
        t = t[0]
    if t.ndim != 3 or t.shape[0] != 3:
        raise ImageFormatError(f"expected a 3-channel image tensor, got shape {t.shape}")
    t = np.nan_to_num(t, nan=0.0, posinf=1.0, neginf=0.0)
    q = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5)
    return RgbImage.from_array(q.astype(np.uint8).transpose(1, 2, 0))


def read_image(path) -> np.ndarray:
    return to_tensor(decode_image(Path(path).read_bytes()))


def write_image(path, tensor: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(from_tensor(tensor)))


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
