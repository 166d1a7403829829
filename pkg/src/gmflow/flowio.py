"""Flow-field file I/O and visualization.

Flow fields interchange in the Middlebury `.flo` layout: a float32 magic
number 202021.25 ("PIEH"), int32 width and height, then row-major
interleaved float32 (u, v) pairs, everything little-endian. Colorization
uses the 55-entry Middlebury color wheel: hue encodes direction, saturation
encodes magnitude, zero flow renders white.

All writers go through a temp-file + rename so partially written outputs
never appear under the final name.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

FLO_MAGIC = 202021.25
FLO_MAGIC_BYTES = struct.pack("<f", FLO_MAGIC)


class FloFormatError(ValueError):
    """Malformed `.flo` payload (magic, dimensions, or truncation)."""


def atomic_write_bytes(path, payload):
    """Write bytes to `path` atomically (temp file in the same directory)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_flo(path, flow):
    """Serialize an (H, W, 2) flow field; bit-exact round trip guaranteed."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FloFormatError(f"flow must be (H, W, 2), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise FloFormatError("refusing to write non-finite flow values")
    h, w = flow.shape[:2]
    header = FLO_MAGIC_BYTES + struct.pack("<ii", w, h)
    payload = flow.astype("<f4", copy=False).tobytes(order="C")
    atomic_write_bytes(path, header + payload)


def read_flo(path):
    """Parse an (H, W, 2) float32 flow field, validating structure."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FloFormatError(f"truncated header: {len(blob)} bytes")
    if blob[:4] != FLO_MAGIC_BYTES:
        (magic,) = struct.unpack("<f", blob[:4])
        raise FloFormatError(f"bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack("<ii", blob[4:12])
    if w <= 0 or h <= 0:
        raise FloFormatError(f"invalid dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(blob) != expected:
        raise FloFormatError(
            f"payload length {len(blob)} does not match {w}x{h} field ({expected} bytes)"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=12)
    return data.reshape(h, w, 2).copy()


def make_color_wheel():
    """The 55-entry Middlebury color wheel, (55, 3) in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def colorize_flow(flow, max_magnitude=None):
    """Render an (H, W, 2) flow field to (H, W, 3) uint8.

    Direction maps to hue around the color wheel and magnitude to
    saturation, normalized by `max_magnitude` (the field's 99th-percentile
    magnitude when not given). Zero flow is white; magnitudes beyond the
    normalization darken.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = np.percentile(rad, 99.0)
    scale = max(float(max_magnitude), 1e-9)
    un, vn, radn = u / scale, v / scale, rad / scale

    wheel = make_color_wheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-vn, -un) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = (1.0 - frac) * wheel[k0] / 255.0 + frac * wheel[k1] / 255.0

    inside = radn[..., None] <= 1.0
    col = np.where(inside, 1.0 - radn[..., None] * (1.0 - col), col * 0.75)
    return np.round(255.0 * col).astype(np.uint8)


def write_image(path, rgb):
    """Write an (H, W, 3) uint8 image; PNG via Pillow, PPM natively."""
    rgb = np.ascontiguousarray(rgb)
    if rgb.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {rgb.dtype}")
    path = os.fspath(path)
    if path.lower().endswith(".ppm"):
        h, w = rgb.shape[:2]
        atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
        return
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_mask_image(path, mask):
    """Boolean (H, W) mask as a black/white image (True = white)."""
    rgb = np.repeat((np.asarray(mask, bool)[..., None] * np.uint8(255)), 3, axis=-1)
    write_image(path, rgb)


def read_image(path):
    """Load an image as (3, H, W) float32 normalized to [-1, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    return (rgb / 127.5 - 1.0).transpose(2, 0, 1)


def read_mask_image(path):
    """Load a mask image: any nonzero pixel counts as True."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 0
