"""Disparity / image file formats and dataset manifests.

Supported formats:
  * PFM ("Pf" grayscale, "PF" color): float32 raster, bottom-up row order,
    scale-line sign encodes endianness (negative = little-endian).
  * 16-bit PNG disparity: stored value / `scale` (default 256), stored 0
    means "no ground truth".
  * Point list: text file, one "x y score" triple per line.
  * Manifest: line-delimited text, one sample per line with
    whitespace-separated relative paths
    ``left right disparity valid_mask occ_mask points_left points_right``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import FormatError


def write_pfm(data: np.ndarray, path, little_endian: bool = True) -> None:
    """Write a H×W (grayscale) or H×W×3 (color) float map as PFM."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError(f"PFM expects H×W or H×W×3 data, got shape {data.shape}")
    height, width = data.shape[:2]
    scale = -1.0 if little_endian else 1.0
    raster = data[::-1]  # bottom-up rows
    if little_endian:
        raster = raster.astype("<f4")
    else:
        raster = raster.astype(">f4")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{width} {height}\n".encode("ascii"))
        f.write(f"{scale}\n".encode("ascii"))
        f.write(raster.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array (H×W or H×W×3)."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise FormatError(f"{path}: bad PFM header {header!r} (expected 'Pf' or 'PF')")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: bad PFM dimensions line {dims!r}")
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise FormatError(f"{path}: unparsable PFM header field: {exc}") from exc
        if width <= 0 or height <= 0:
            raise FormatError(f"{path}: non-positive PFM dimensions {width}x{height}")
        if scale == 0.0:
            raise FormatError(f"{path}: PFM scale must be non-zero")
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        payload = f.read(count * 4)
        if len(payload) != count * 4:
            raise FormatError(f"{path}: truncated PFM payload")
        raster = np.frombuffer(payload, dtype=dtype, count=count)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return raster.reshape(shape)[::-1].astype(np.float32)


def write_disp_png16(disp: np.ndarray, path, valid_mask=None, scale: float = 256.0) -> None:
    """Store disparity as 16-bit PNG (value = round(disp*scale), 0 = invalid).

    Valid pixels always store >= 1 so they survive the round trip; the
    resulting error stays within 1/scale.
    """
    disp = np.asarray(disp, dtype=np.float64)
    if valid_mask is None:
        valid_mask = np.ones(disp.shape, dtype=bool)
    stored = np.round(disp * scale)
    stored = np.clip(stored, 1, 65535)
    stored = np.where(valid_mask, stored, 0).astype(np.uint16)
    Image.fromarray(stored, mode="I;16").save(path)


def read_disp_png16(path, scale: float = 256.0):
    """Read a 16-bit disparity PNG; returns (disparity, valid_mask)."""
    img = Image.open(path)
    stored = np.asarray(img, dtype=np.uint16)
    if stored.ndim != 2:
        raise FormatError(f"{path}: expected single-channel 16-bit PNG, got shape {stored.shape}")
    valid = stored > 0
    disp = stored.astype(np.float32) / scale
    disp[~valid] = 0.0
    return disp, valid


def write_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected single-channel mask PNG")
    return arr > 127


def write_points(coords: np.ndarray, scores: np.ndarray, path) -> None:
    with open(path, "w") as f:
        for (x, y), s in zip(np.asarray(coords).reshape(-1, 2), np.asarray(scores).reshape(-1)):
            f.write(f"{x!r} {y!r} {s!r}\n")


def read_points(path):
    """Read a point list file; returns (coords (k,2), scores (k,)) float64."""
    coords, scores = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'x y score', got {line!r}")
            coords.append((float(parts[0]), float(parts[1])))
            scores.append(float(parts[2]))
    return (np.asarray(coords, dtype=np.float64).reshape(-1, 2),
            np.asarray(scores, dtype=np.float64))


@dataclass(frozen=True)
class SampleFiles:
    """Per-sample file paths as listed in a dataset manifest."""

    left: str
    right: str
    disparity: str
    valid_mask: str
    occ_mask: str
    points_left: str
    points_right: str

    def resolve(self, root):
        return SampleFiles(*(os.path.join(root, p) for p in self.as_tuple()))

    def as_tuple(self):
        return (self.left, self.right, self.disparity, self.valid_mask,
                self.occ_mask, self.points_left, self.points_right)


MANIFEST_NAME = "manifest.txt"


def write_manifest(entries: list[SampleFiles], path) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(" ".join(e.as_tuple()) + "\n")


def read_manifest(path) -> list[SampleFiles]:
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise FormatError(f"{path}:{lineno}: manifest line needs 7 paths, got {len(parts)}")
            entries.append(SampleFiles(*parts))
    return entries
