"""8-bit image files in [0, 1] float form: binary PPM built in, PNG via Pillow."""
import os

import numpy as np

try:
    from PIL import Image
except ImportError:  # pragma: no cover - Pillow is optional
    Image = None


class ImageError(OSError):
    pass


def _read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    # header: magic, width, height, maxval separated by whitespace / comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ImageError(f"{path}: truncated PPM header")
        tokens.append(data[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], *map(int, tokens[1:])
    if magic != b"P6" or maxval != 255:
        raise ImageError(f"{path}: only 8-bit binary PPM (P6) is supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3)


def _write_ppm(path, u8):
    h, w, _ = u8.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(u8).tobytes())


def read_image(path):
    """(H, W, 3) float64 in [0, 1]."""
    path = os.fspath(path)
    try:
        if path.lower().endswith((".ppm", ".pnm")):
            u8 = _read_ppm(path)
        else:
            if Image is None:
                raise ImageError(f"{path}: reading non-PPM images needs Pillow")
            with Image.open(path) as im:
                u8 = np.asarray(im.convert("RGB"))
    except (ValueError, IndexError) as exc:
        raise ImageError(f"{path}: unreadable image ({exc})") from exc
    except OSError as exc:
        if isinstance(exc, ImageError):
            raise
        raise ImageError(f"{path}: unreadable image ({exc})") from exc
    return u8.astype(np.float64) / 255.0


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img):
    """Write 8-bit PNG (Pillow) or PPM; returns the path actually written."""
    path = os.fspath(path)
    u8 = to_uint8(img)
    if path.lower().endswith((".ppm", ".pnm")):
        _write_ppm(path, u8)
        return path
    if Image is None:
        path = os.path.splitext(path)[0] + ".ppm"
        _write_ppm(path, u8)
        return path
    Image.fromarray(u8, "RGB").save(path)
    return path
