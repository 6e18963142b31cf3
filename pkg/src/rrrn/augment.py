"""Training-set augmentation: enriched apex frames crossed with small rotations.

Each sample contributes up to 10 apex positions (the annotated apex plus
frames at fixed fractions of the onset->apex and apex->offset spans) and 7
rotation angles, i.e. a 70x expansion for well-separated annotations. Both
frames of a pair are rotated rigidly so the motion field keeps its meaning;
the rotation-induced global flow rotation is deliberately not compensated.
Evaluation sets are never augmented — the training harness enforces that.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .dataset import AnnotationRecord

ONSET_SIDE_COEFFS = (0.6, 0.7, 0.8, 0.9)
OFFSET_SIDE_COEFFS = (0.1, 0.2, 0.3, 0.4, 0.5)
ROTATION_ANGLES_DEG = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)


class AugmentError(Exception):
    pass


class InvalidOrderingError(AugmentError):
    pass


class FrameIndexOutOfRangeError(AugmentError):
    pass


def rotation_angles() -> list[float]:
    """Angles in degrees: -15 to 15 inclusive in steps of 5."""
    return list(ROTATION_ANGLES_DEG)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def enrich_apex_positions(onset: int, apex: int, offset: int) -> list[int]:
    """Enriched apex frame indices: the apex itself plus fixed fractions of
    both surrounding spans, rounded half-up, deduplicated, sorted."""
    if not (onset <= apex <= offset):
        raise InvalidOrderingError(
            f"need onset <= apex <= offset, got ({onset}, {apex}, {offset})"
        )
    positions = {apex}
    for c in ONSET_SIDE_COEFFS:
        positions.add(_round_half_up(onset + (apex - onset) * c))
    for c in OFFSET_SIDE_COEFFS:
        positions.add(_round_half_up(apex + (offset - apex) * c))
    return sorted(positions)


@dataclass(frozen=True)
class AugmentationPlan:
    apex_positions: tuple[int, ...]
    rotation_angles_deg: tuple[float, ...]

    @property
    def pair_count(self) -> int:
        return len(self.apex_positions) * len(self.rotation_angles_deg)


def build_plan(onset: int, apex: int, offset: int) -> AugmentationPlan:
    return AugmentationPlan(
        apex_positions=tuple(enrich_apex_positions(onset, apex, offset)),
        rotation_angles_deg=ROTATION_ANGLES_DEG,
    )


def rotate_frame(frame: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image center, bilinear, border replicated.

    angle 0 returns the frame unchanged (same values, no resampling).
    """
    if angle_deg == 0.0:
        return frame.copy()
    return ndimage.rotate(
        frame, angle_deg, reshape=False, order=1, mode="nearest", prefilter=False
    )


class AugmentedPair(NamedTuple):
    onset_frame: np.ndarray
    apex_frame: np.ndarray
    angle_deg: float
    apex_position: int


def augment_sample(
    record: AnnotationRecord, frames: Sequence[np.ndarray]
) -> list[AugmentedPair]:
    """All (rotated onset, rotated enriched apex) training pairs for a sample.

    The cartesian product of enriched apex positions and rotation angles;
    both frames of a pair share the angle.
    """
    plan = build_plan(record.onset_idx, record.apex_idx, record.offset_idx)
    needed = (record.onset_idx, *plan.apex_positions)
    for idx in needed:
        if not (0 <= idx < len(frames)):
            raise FrameIndexOutOfRangeError(
                f"{record.sample_id}: frame {idx} outside sequence of {len(frames)}"
            )
    pairs = []
    for pos in plan.apex_positions:
        for angle in plan.rotation_angles_deg:
            pairs.append(
                AugmentedPair(
                    onset_frame=rotate_frame(frames[record.onset_idx], angle),
                    apex_frame=rotate_frame(frames[pos], angle),
                    angle_deg=angle,
                    apex_position=pos,
                )
            )
    return pairs
