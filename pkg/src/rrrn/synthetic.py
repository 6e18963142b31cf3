"""Synthetic corpora for tests and demos.

Builds tiny on-disk datasets in the exact formats the pipeline consumes:
textured face-like frame sequences whose motion direction depends on the
class label, manifests, 68-point landmark files, and procedural occlusion
assets. None of this stands in for real micro-expression data; it exists so
the full pipeline can be exercised end to end without licensed corpora.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataset import (
    AnnotationRecord,
    Database,
    DatasetManifest,
    ObjectiveClass,
    make_record,
)
from .frames import save_frame
from .occlusion import write_landmarks

#: One representative AU combination per objective class, for generated labels.
CLASS_AU_CODES = {
    ObjectiveClass.I: "AU6+AU12",
    ObjectiveClass.II: "AU25",
    ObjectiveClass.III: "AU4",
    ObjectiveClass.IV: "AU9",
    ObjectiveClass.V: "AU15",
}


def textured_image(rng: np.random.Generator, size: int, smooth: float = 2.0) -> np.ndarray:
    """Smoothed random texture in [30, 225], uint8; enough gradient structure
    for dense flow to lock onto."""
    noise = rng.standard_normal((size, size))
    tex = ndimage.gaussian_filter(noise, smooth)
    tex = (tex - tex.min()) / (tex.max() - tex.min() + 1e-12)
    return (30 + tex * 195).astype(np.uint8)


def shift_image(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Subpixel shift with replicated borders; ground-truth displacement is
    (dx, dy) by construction."""
    out = ndimage.shift(img.astype(np.float64), (dy, dx), order=1, mode="nearest")
    return out.astype(img.dtype) if np.issubdtype(img.dtype, np.integer) else out


def motion_sequence(
    rng: np.random.Generator,
    size: int,
    onset: int,
    apex: int,
    offset: int,
    direction: tuple[float, float],
) -> list[np.ndarray]:
    """Frame sequence: texture displaced along ``direction``, ramping from
    zero at onset to full at apex and back to zero at offset."""
    base = textured_image(rng, size)
    frames = []
    for t in range(offset + 1):
        if t <= onset:
            scale = 0.0
        elif t <= apex:
            scale = (t - onset) / max(apex - onset, 1)
        else:
            scale = max(0.0, 1.0 - (t - apex) / max(offset - apex, 1))
        frames.append(shift_image(base, direction[0] * scale, direction[1] * scale))
    return frames


#: class label -> (dx, dy) apex displacement in pixels
DEFAULT_DIRECTIONS = {
    ObjectiveClass.I: (2.5, 0.0),
    ObjectiveClass.II: (0.0, 2.5),
    ObjectiveClass.III: (-2.5, 0.0),
    ObjectiveClass.IV: (0.0, -2.5),
    ObjectiveClass.V: (1.8, 1.8),
}


@dataclass(frozen=True)
class MotionCorpus:
    manifest: DatasetManifest
    root: Path


def build_motion_corpus(
    root: Path | str,
    classes: Sequence[ObjectiveClass],
    samples_per_class: int,
    subjects: int,
    frame_size: int = 48,
    onset: int = 0,
    apex: int = 6,
    offset: int = 12,
    seed: int = 0,
    database: Database = Database.SYNTHETIC,
    directions: dict | None = None,
) -> MotionCorpus:
    """Write a class-separable motion corpus to disk and return its manifest.

    Samples cycle through ``subjects`` round-robin so subject-based folds see
    every class on both sides.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    directions = directions or DEFAULT_DIRECTIONS
    records = []
    idx = 0
    for cls in classes:
        for _ in range(samples_per_class):
            sid = f"syn{idx:04d}"
            subject = f"subj{idx % subjects:02d}"
            frames_dir = root / "frames" / sid
            jitter = rng.uniform(0.85, 1.15)
            dx, dy = directions[cls]
            frames = motion_sequence(
                rng, frame_size, onset, apex, offset, (dx * jitter, dy * jitter)
            )
            for t, frame in enumerate(frames):
                save_frame(frames_dir / f"frame_{t:03d}.png", frame)
            records.append(
                make_record(
                    sample_id=sid,
                    database_id=database,
                    subject_id=subject,
                    frames_dir=frames_dir,
                    onset_idx=onset,
                    apex_idx=apex,
                    offset_idx=offset,
                    au_code=CLASS_AU_CODES[cls],
                )
            )
            idx += 1
    return MotionCorpus(
        manifest=DatasetManifest(tuple(records), source_note=f"synthetic motion corpus {root}"),
        root=root,
    )


def reference_manifest(
    database: Database,
    class_counts: dict[ObjectiveClass, int],
    subjects: int,
    prefix: str,
    frames_dir: Path | str = "frames",
) -> DatasetManifest:
    """Metadata-only manifest with exact per-class counts and subject count;
    used as a distribution/fold fixture (no frames on disk)."""
    records = []
    idx = 0
    for cls, count in class_counts.items():
        for _ in range(count):
            records.append(
                make_record(
                    sample_id=f"{prefix}{idx:04d}",
                    database_id=database,
                    subject_id=f"{prefix}s{idx % subjects:02d}",
                    frames_dir=Path(frames_dir) / f"{prefix}{idx:04d}",
                    onset_idx=0,
                    apex_idx=10,
                    offset_idx=20,
                    au_code=CLASS_AU_CODES[cls],
                )
            )
            idx += 1
    return DatasetManifest(tuple(records), source_note=f"reference counts {database.value}")


#: Published corpus statistics used as reference fixtures.
CASME2_CLASS_COUNTS = {
    ObjectiveClass.I: 25,
    ObjectiveClass.II: 15,
    ObjectiveClass.III: 99,
    ObjectiveClass.IV: 26,
    ObjectiveClass.V: 20,
}
SAMM_CLASS_COUNTS = {
    ObjectiveClass.I: 24,
    ObjectiveClass.II: 13,
    ObjectiveClass.III: 20,
    ObjectiveClass.IV: 8,
    ObjectiveClass.V: 3,
}
CASME2_SUBJECTS = 26
SAMM_SUBJECTS = 21


def casme2_reference_manifest() -> DatasetManifest:
    return reference_manifest(Database.CASME2, CASME2_CLASS_COUNTS, CASME2_SUBJECTS, "c")


def samm_reference_manifest() -> DatasetManifest:
    return reference_manifest(Database.SAMM, SAMM_CLASS_COUNTS, SAMM_SUBJECTS, "s")


def canonical_landmarks(size: int) -> np.ndarray:
    """A plausible 68-point layout scaled to a size x size face crop."""
    pts = np.zeros((68, 2), dtype=np.float64)
    cx = size / 2.0
    # jaw outline 0-16: half ellipse ending at the chin midpoint
    for i in range(17):
        ang = np.pi * i / 16.0
        pts[i] = (cx - 0.38 * size * np.cos(ang), 0.42 * size + 0.5 * size * np.sin(ang))
    # brows 17-26
    for i in range(5):
        pts[17 + i] = (cx - 0.30 * size + 0.06 * size * i, 0.30 * size)
        pts[22 + i] = (cx + 0.06 * size + 0.06 * size * i, 0.30 * size)
    # nose 27-35: bridge down, nostril row
    for i in range(4):
        pts[27 + i] = (cx, 0.38 * size + 0.05 * size * i)
    for i in range(5):
        pts[31 + i] = (cx - 0.08 * size + 0.04 * size * i, 0.58 * size)
    # eyes 36-41 / 42-47: hexagons around the eye centers
    for j, ecx in enumerate((cx - 0.18 * size, cx + 0.18 * size)):
        base = 36 + 6 * j
        for i in range(6):
            ang = 2 * np.pi * i / 6.0
            pts[base + i] = (
                ecx + 0.06 * size * np.cos(ang),
                0.40 * size + 0.025 * size * np.sin(ang),
            )
        # force distinct outer corners
    pts[36] = (cx - 0.25 * size, 0.40 * size)
    pts[45] = (cx + 0.25 * size, 0.40 * size)
    # mouth 48-67
    for i in range(20):
        ang = 2 * np.pi * i / 20.0
        pts[48 + i] = (
            cx + 0.12 * size * np.cos(ang),
            0.72 * size + 0.05 * size * np.sin(ang),
        )
    return np.clip(pts, 1.0, size - 2.0)


def write_corpus_landmarks(corpus: MotionCorpus, directory: Path | str) -> Path:
    """One landmark file per sample, one line per frame (static layout)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for record in corpus.manifest:
        n_frames = record.offset_idx + 1
        first = next(iter(sorted(record.frames_dir.glob("*.png"))))
        from .frames import load_frame

        size = load_frame(first).shape[0]
        pts = canonical_landmarks(size)
        write_landmarks(directory / f"{record.sample_id}.txt", np.repeat(pts[None], n_frames, axis=0))
    return directory
