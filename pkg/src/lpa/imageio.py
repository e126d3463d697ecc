"""Binary PPM (P6) / PGM (P5) reading and writing for [-1, 1] images and masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8 via round(127.5 * (x + 1))."""
    q = np.rint(127.5 * (np.asarray(image, dtype=np.float64) + 1.0))
    return np.clip(q, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def encode_ppm(image: np.ndarray) -> bytes:
    px = to_bytes(image)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write an (H, W) array; bool masks map to 0/255, floats in [0, 1] are scaled."""
    g = np.asarray(gray)
    if g.dtype == bool:
        px = g.astype(np.uint8) * 255
    else:
        px = np.clip(np.rint(g * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def _read_netpbm(path: str | Path, magic: bytes) -> tuple[int, int, bytes]:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return w, h, data[pos + 1:]


def read_ppm(path: str | Path) -> np.ndarray:
    w, h, body = _read_netpbm(path, b"P6")
    px = np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return from_bytes(px)


def read_pgm(path: str | Path) -> np.ndarray:
    w, h, body = _read_netpbm(path, b"P5")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()
