"""PFM / PGM readers and writers for float maps, frames, and masks.

Float images (correspondence channels, phase maps) use PFM with a
little-endian scale of -1.0 and bottom-to-top row order, the common
convention. Two-channel data (u/v, phase/quality) is packed into the
standard 3-channel 'PF' variant with a zeroed third channel. Intensity
frames are 16-bit PGM, masks 8-bit PGM (0/255).
"""

from __future__ import annotations

import re

import numpy as np


def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag = b"Pf"
        h, w = data.shape
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
        h, w = data.shape[:2]
    else:
        raise ValueError("PFM supports (H,W) or (H,W,3) arrays")
    if scale >= 0:
        raise ValueError("only little-endian PFM (negative scale) is written")
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale:.6f}\n".encode())
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        data = np.frombuffer(f.read(count * 4), dtype=endian + "f4", count=count)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).copy()


def write_pgm(path, data: np.ndarray) -> None:
    """Write uint8 (maxval 255) or uint16 (maxval 65535, big-endian) PGM."""
    data = np.asarray(data)
    if data.dtype == np.uint8:
        maxval = 255
        raw = data.tobytes()
    elif data.dtype == np.uint16:
        maxval = 65535
        raw = data.astype(">u2").tobytes()
    else:
        raise ValueError("PGM requires uint8 or uint16 data")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(raw)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    data = blob[m.end():]
    if maxval > 255:
        arr = np.frombuffer(data, dtype=">u2", count=w * h).astype(np.uint16)
    else:
        arr = np.frombuffer(data, dtype=np.uint8, count=w * h)
    return arr.reshape(h, w).copy()


def write_frame_pgm(path, intensity: np.ndarray) -> None:
    """Store an intensity image in [0, 1] as 16-bit PGM."""
    q = np.round(np.clip(intensity, 0.0, 1.0) * 65535.0).astype(np.uint16)
    write_pgm(path, q)


def read_frame_pgm(path) -> np.ndarray:
    arr = read_pgm(path)
    maxval = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / maxval


def write_mask_pgm(path, valid: np.ndarray) -> None:
    write_pgm(path, np.where(valid, 255, 0).astype(np.uint8))


def read_mask_pgm(path) -> np.ndarray:
    return read_pgm(path) > 127


def write_two_channel_pfm(path, a: np.ndarray, b: np.ndarray) -> None:
    """Pack two float channels into a 3-channel PFM (third channel zero)."""
    packed = np.stack([a, b, np.zeros_like(a)], axis=-1)
    write_pfm(path, packed)


def read_two_channel_pfm(path) -> tuple[np.ndarray, np.ndarray]:
    data = read_pfm(path)
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3-channel PFM")
    return data[..., 0].astype(np.float64), data[..., 1].astype(np.float64)
