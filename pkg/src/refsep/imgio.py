"""Image file I/O: PNG/PGM/PPM ingest, 16-bit PNG output, content hashing.

Images live in memory as float64 grayscale in [0, 1]. Color inputs are
reduced to luminance on load (ITU-R 601 weights). Separation layers are
written as 16-bit PNG so quantization stays two orders of magnitude below
typical reconstruction error.
"""

import hashlib
import io

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InvalidInputError

_LUMA = np.array([0.299, 0.587, 0.114])


def _to_float(arr):
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        if arr.shape[2] != 3:
            raise InvalidInputError(f"unsupported channel count {arr.shape[2]}")
        arr = arr.astype(np.float64) @ _LUMA
        was16 = False
    else:
        was16 = arr.dtype.itemsize > 1
        arr = arr.astype(np.float64)
    if was16 or arr.max() > 255:
        return np.clip(arr / 65535.0, 0.0, 1.0)
    return np.clip(arr / 255.0, 0.0, 1.0)


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG/PGM/PPM bytes to a float64 grayscale image in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.mode == "P":
                im = im.convert("RGB")
            if im.format not in ("PNG", "PPM"):
                raise InvalidInputError(f"unsupported image format {im.format}")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise InvalidInputError(f"cannot decode image: {exc}") from exc
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    return _to_float(arr)


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def save_image(path, img, bits: int = 16):
    """Write a [0, 1] float image as 8- or 16-bit grayscale PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidInputError("save_image expects a 2-D image")
    if bits == 16:
        q = np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)
        pil = Image.fromarray(q)
    elif bits == 8:
        q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        pil = Image.fromarray(q, mode="L")
    else:
        raise InvalidInputError("bits must be 8 or 16")
    pil.save(path, format="PNG")


def encode_png(img, bits: int = 16) -> bytes:
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if bits == 16:
        pil = Image.fromarray(np.round(img * 65535).astype(np.uint16))
    elif bits == 8:
        pil = Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L")
    else:
        raise InvalidInputError("bits must be 8 or 16")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def write_layer_pair(prefix, y, x1):
    """Write x1 and its complement as 16-bit PNGs whose stored pixels sum
    to the stored pixels of y exactly.

    The second layer is written as quantize(y) - quantize(x1) rather than
    quantize(y - x1), so integer reconstruction is lossless. Returns the two
    paths and a flag telling whether clipping into [0, y] changed x1.
    """
    y = np.asarray(y, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    qy = np.round(np.clip(y, 0, 1) * 65535).astype(np.int64)
    qx1 = np.round(np.clip(x1, 0, 1) * 65535).astype(np.int64)
    clipped = bool(np.any(qx1 > qy) or np.any(x1 < 0) or np.any(x1 > 1))
    qx1 = np.minimum(qx1, qy)
    p1, p2 = f"{prefix}_x1.png", f"{prefix}_x2.png"
    Image.fromarray(qx1.astype(np.uint16)).save(p1, format="PNG")
    Image.fromarray((qy - qx1).astype(np.uint16)).save(p2, format="PNG")
    return p1, p2, clipped


def patch_pair_thumbnail(x1p, x2p, scale: int = 8) -> np.ndarray:
    """Side-by-side display rendering of one candidate decomposition.

    Both patches are clipped into [0, 1] for display and upscaled by
    nearest-neighbor; a one-cell white gutter separates the halves.
    """
    tiles = []
    for p in (x1p, x2p):
        p = np.clip(np.asarray(p, dtype=np.float64).reshape(8, 8), 0, 1)
        tiles.append(np.kron(p, np.ones((scale, scale))))
    gutter = np.ones((8 * scale, max(scale // 4, 1)))
    return np.concatenate([tiles[0], gutter, tiles[1]], axis=1)


def bytes_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return bytes_sha256(fh.read())
