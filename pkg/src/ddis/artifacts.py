"""Artifact writers: portable graymaps, raw tensor dumps, CSV tables."""

from __future__ import annotations

import hashlib

import numpy as np


def to_gray_u8(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] image values to 8-bit gray, clipping out-of-range values."""
    scaled = (np.clip(images, -1.0, 1.0) + 1.0) * 127.5
    return np.round(scaled).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Single-channel P5 graymap from one [H,W] or [1,H,W] image."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    data = to_gray_u8(img)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h = (int(x) for x in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return data.astype(np.float64) / 127.5 - 1.0


def write_image_grid(path, images: np.ndarray, columns: int = 8, pad: int = 1) -> None:
    """Tile a [N,1,H,W] batch into one graymap."""
    imgs = np.asarray(images)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    n, h, w = imgs.shape
    cols = min(columns, n)
    rows = (n + cols - 1) // cols
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 1.0)
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y : y + h, x : x + w] = img
    write_pgm(path, canvas)


def write_raw_tensor(path, arr: np.ndarray) -> None:
    """Headerless little-endian float64 dump; shape travels in the manifest."""
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)


def read_raw_tensor(path, shape) -> np.ndarray:
    return np.fromfile(path, dtype="<f8").reshape(shape)


def array_sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


def write_csv(path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if cell is None:
                cells.append("")
            elif isinstance(cell, float):
                cells.append(f"{cell:.12g}")
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> tuple:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows
