"""Frame-sequence I/O. Frame indices address the sorted file list of a
sample's frames directory, 0-based."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

_FRAME_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class FramesError(Exception):
    pass


def list_frame_files(frames_dir: Path | str) -> list[Path]:
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FramesError(f"frames directory missing: {frames_dir}")
    files = sorted(
        p for p in frames_dir.iterdir() if p.suffix.lower() in _FRAME_SUFFIXES
    )
    if not files:
        raise FramesError(f"no frame images in {frames_dir}")
    return files


def load_frame(path: Path | str) -> np.ndarray:
    """uint8 array, (H, W) for grayscale sources or (H, W, 3) for color."""
    with Image.open(path) as img:
        if img.mode in ("L", "I;16", "I"):
            return np.asarray(img.convert("L"), dtype=np.uint8)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame
    coeffs = np.array([0.299, 0.587, 0.114])
    return (frame[..., :3].astype(np.float64) @ coeffs).astype(np.float32)


def save_frame(path: Path | str, frame: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(frame)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_sequence(frames_dir: Path | str) -> list[np.ndarray]:
    return [load_frame(p) for p in list_frame_files(frames_dir)]
