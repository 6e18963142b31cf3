"""Synthetic occlusion: landmark-anchored masks/sunglasses and random blocks.

Accessories are alpha-composited after a similarity transform (scale,
rotation, translation) that maps the asset's two anchor points onto the
frame's landmark anchors — sunglasses onto the outer eye corners, masks onto
the nose bridge and chin tip — so accessories ride with the face exactly like
a worn object would. Random blocks are solid gray rectangles covering a
requested fraction of the face box; the rectangle is drawn once per sample
and reused on every frame so it injects no spurious motion into the
onset-apex flow.

Landmark files: one line per frame, 68 "x,y" pairs separated by spaces.
Asset directories: ``mask_00.png``/``glasses_00.png`` ... RGBA images, each
with a JSON sidecar of the same stem holding {"kind", "anchors": [[x,y],[x,y]]}.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .dataset import AnnotationRecord, DatasetManifest
from .frames import list_frame_files, load_frame, save_frame

# Indices into the 68-point landmark scheme.
LM_OUTER_EYE_LEFT = 36
LM_OUTER_EYE_RIGHT = 45
LM_NOSE_BRIDGE = 27
LM_CHIN = 8
LANDMARK_COUNT = 68

BLOCK_FILL = 128


class OcclusionError(Exception):
    pass


class DegenerateLandmarksError(OcclusionError):
    pass


class RatioOutOfRangeError(OcclusionError):
    pass


class MissingLandmarksError(OcclusionError):
    def __init__(self, sample_id: str):
        super().__init__(f"no landmarks available for sample {sample_id!r}")
        self.sample_id = sample_id


class AssetError(OcclusionError):
    pass


class OcclusionKind(enum.Enum):
    MASK = "mask"
    GLASS = "glass"
    RANDOM = "random"


class AssetKind(enum.Enum):
    MASK = "mask"
    GLASSES = "glasses"


@dataclass(frozen=True)
class OcclusionAsset:
    image: np.ndarray  # (H, W, 4) uint8
    kind: AssetKind
    anchors: np.ndarray  # (2, 2) float, [[x0, y0], [x1, y1]] in asset coords

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 4 or img.dtype != np.uint8:
            raise AssetError("asset image must be (H, W, 4) uint8 with alpha")
        anchors = np.asarray(self.anchors, dtype=np.float64)
        if anchors.shape != (2, 2):
            raise AssetError("asset needs exactly two anchor points")
        h, w = img.shape[:2]
        if np.any(anchors < -0.5) or np.any(anchors[:, 0] > w - 0.5) or np.any(anchors[:, 1] > h - 0.5):
            raise AssetError("anchor points fall outside the asset image")
        if np.hypot(*(anchors[1] - anchors[0])) < 1e-9:
            raise AssetError("asset anchor points coincide")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "anchors", anchors)


@dataclass(frozen=True)
class OcclusionSpec:
    kind: OcclusionKind
    seed: int = 0
    ratio: Optional[float] = None  # RANDOM only, 0 < ratio <= 0.5
    asset_index: int = 0  # MASK / GLASS only

    def __post_init__(self):
        if self.kind is OcclusionKind.RANDOM:
            if self.ratio is None:
                raise RatioOutOfRangeError("RANDOM occlusion requires a ratio")
            if not (0.0 < self.ratio <= 0.5):
                raise RatioOutOfRangeError(f"ratio {self.ratio} outside (0, 0.5]")
        elif self.ratio is not None:
            raise ValueError("ratio is only meaningful for RANDOM occlusion")

    @property
    def occlusion_tag(self) -> str:
        if self.kind is OcclusionKind.MASK:
            return "MASK"
        if self.kind is OcclusionKind.GLASS:
            return "GLASS"
        return f"RANDOM_{int(round(self.ratio * 100)):02d}"


def per_sample_rng(global_seed: int, sample_id: str) -> np.random.Generator:
    """Stable per-sample generator: reproducible under any execution order."""
    digest = hashlib.blake2b(
        f"{global_seed}:{sample_id}".encode(), digest_size=8
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


# ---------------------------------------------------------------------------
# landmarks


def load_landmarks(path: Path | str) -> np.ndarray:
    """(frames, 68, 2) float array from the one-line-per-frame text format."""
    path = Path(path)
    rows = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        pairs = line.split()
        if len(pairs) != LANDMARK_COUNT:
            raise OcclusionError(
                f"{path}:{line_no}: expected {LANDMARK_COUNT} landmarks, got {len(pairs)}"
            )
        try:
            pts = [tuple(float(v) for v in p.split(",")) for p in pairs]
        except ValueError:
            raise OcclusionError(f"{path}:{line_no}: bad 'x,y' pair") from None
        if any(len(p) != 2 for p in pts):
            raise OcclusionError(f"{path}:{line_no}: bad 'x,y' pair")
        rows.append(pts)
    if not rows:
        raise OcclusionError(f"{path}: empty landmark file")
    return np.asarray(rows, dtype=np.float64)


def write_landmarks(path: Path | str, landmarks: np.ndarray) -> None:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.ndim == 2:
        landmarks = landmarks[None]
    lines = []
    for frame_pts in landmarks:
        lines.append(" ".join(f"{x:.3f},{y:.3f}" for x, y in frame_pts))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


class DirectoryLandmarkSource:
    """Resolves ``<dir>/<sample_id>.txt`` landmark files; None when absent."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)

    def __call__(self, sample_id: str) -> Optional[np.ndarray]:
        path = self.directory / f"{sample_id}.txt"
        if not path.is_file():
            return None
        return load_landmarks(path)


# ---------------------------------------------------------------------------
# accessory compositing


def _similarity_from_pairs(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 matrix A and translation t with dst = A @ src + t, where A is a
    rotation+uniform-scale determined by the two point pairs."""
    s0 = complex(*src[0])
    s1 = complex(*src[1])
    d0 = complex(*dst[0])
    d1 = complex(*dst[1])
    if abs(d1 - d0) < 1e-9:
        raise DegenerateLandmarksError("landmark anchors coincide")
    m = (d1 - d0) / (s1 - s0)
    a = np.array([[m.real, -m.imag], [m.imag, m.real]], dtype=np.float64)
    t = np.array([d0.real, d0.imag]) - a @ np.array([s0.real, s0.imag])
    return a, t


def _bilinear_sample_rgba(asset: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an RGBA image at float coords, zero (transparent) outside."""
    h, w = asset.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape + (4,), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            if not np.any(valid):
                continue
            vals = np.zeros(xs.shape + (4,))
            vals[valid] = asset[yi[valid], xi[valid], :]
            out += vals * weight[..., None]
    return out


def landmark_anchors(landmarks: np.ndarray, kind: AssetKind) -> np.ndarray:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (LANDMARK_COUNT, 2):
        raise OcclusionError(f"expected ({LANDMARK_COUNT}, 2) landmarks, got {landmarks.shape}")
    if kind is AssetKind.GLASSES:
        return landmarks[[LM_OUTER_EYE_LEFT, LM_OUTER_EYE_RIGHT]]
    return landmarks[[LM_NOSE_BRIDGE, LM_CHIN]]


def overlay_accessory(
    frame: np.ndarray, landmarks: np.ndarray, asset: OcclusionAsset
) -> np.ndarray:
    """Alpha-composite the asset onto one frame, anchored to its landmarks.

    Pure function of (frame, landmarks, asset): repeated calls are
    bit-identical, and integer landmark shifts translate the composited
    accessory exactly.
    """
    targets = landmark_anchors(landmarks, asset.kind)
    a, t = _similarity_from_pairs(asset.anchors, targets)
    a_inv = np.linalg.inv(a)

    h, w = frame.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    rel_x = xs - t[0]
    rel_y = ys - t[1]
    src_x = a_inv[0, 0] * rel_x + a_inv[0, 1] * rel_y
    src_y = a_inv[1, 0] * rel_x + a_inv[1, 1] * rel_y

    rgba = _bilinear_sample_rgba(asset.image, src_x, src_y)
    alpha = rgba[..., 3] / 255.0

    base = frame.astype(np.float64)
    if base.ndim == 2:
        coeffs = np.array([0.299, 0.587, 0.114])
        color = rgba[..., :3] @ coeffs
        out = base * (1.0 - alpha) + color * alpha
    else:
        out = base * (1.0 - alpha[..., None]) + rgba[..., :3] * alpha[..., None]
    if np.issubdtype(frame.dtype, np.integer):
        return np.clip(np.round(out), 0, 255).astype(frame.dtype)
    return out.astype(frame.dtype)


# ---------------------------------------------------------------------------
# random blocks


@dataclass(frozen=True)
class Block:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h


def sample_block(
    face_box: tuple[int, int, int, int], ratio: float, rng: np.random.Generator
) -> Block:
    """One solid rectangle covering ratio * face-box area (within ±1% for
    realistically sized boxes), placed uniformly at random inside the box."""
    if not (0.0 < ratio <= 0.5):
        raise RatioOutOfRangeError(f"ratio {ratio} outside (0, 0.5]")
    bx, by, bw, bh = face_box
    if bw < 1 or bh < 1:
        raise OcclusionError("empty face box")
    target = ratio * bw * bh

    aspect = rng.uniform(2.0 / 3.0, 1.5)
    w_guess = int(round(np.sqrt(target * aspect)))
    best: tuple[float, int, int] | None = None
    for w in range(max(1, w_guess - 5), min(bw, w_guess + 5) + 1):
        for h in (int(np.floor(target / w)), int(np.ceil(target / w))):
            if not (1 <= h <= bh):
                continue
            err = abs(w * h - target)
            if best is None or err < best[0]:
                best = (err, w, h)
    if best is None:  # box too small for the sampled aspect; take the whole box
        w, h = bw, bh
    else:
        _, w, h = best
    x = bx + int(rng.integers(0, bw - w + 1))
    y = by + int(rng.integers(0, bh - h + 1))
    return Block(x=x, y=y, w=w, h=h)


def apply_block(frame: np.ndarray, block: Block) -> np.ndarray:
    out = frame.copy()
    out[block.y : block.y + block.h, block.x : block.x + block.w, ...] = BLOCK_FILL
    return out


def overlay_random_block(
    frame: np.ndarray,
    face_box: tuple[int, int, int, int],
    ratio: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw a block for this rng state and paint it onto the frame. For a
    whole sequence, sample once with :func:`sample_block` and reuse."""
    bx, by, bw, bh = face_box
    h, w = frame.shape[:2]
    if bx < 0 or by < 0 or bx + bw > w or by + bh > h:
        raise OcclusionError(f"face box {face_box} outside frame {w}x{h}")
    return apply_block(frame, sample_block(face_box, ratio, rng))


# ---------------------------------------------------------------------------
# assets on disk


def load_asset(image_path: Path | str) -> OcclusionAsset:
    image_path = Path(image_path)
    sidecar = image_path.with_suffix(".json")
    if not sidecar.is_file():
        raise AssetError(f"missing anchor sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    with Image.open(image_path) as img:
        rgba = np.asarray(img.convert("RGBA"), dtype=np.uint8)
    return OcclusionAsset(
        image=rgba,
        kind=AssetKind(meta["kind"]),
        anchors=np.asarray(meta["anchors"], dtype=np.float64),
    )


def load_assets(directory: Path | str, kind: AssetKind) -> list[OcclusionAsset]:
    directory = Path(directory)
    paths = sorted(directory.glob(f"{kind.value}_*.png"))
    assets = [load_asset(p) for p in paths]
    if not assets:
        raise AssetError(f"no {kind.value} assets under {directory}")
    return assets


def _draw_ellipse(canvas: np.ndarray, cx, cy, rx, ry, color) -> None:
    h, w = canvas.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    canvas[inside] = color


def generate_builtin_assets(directory: Path | str, count: int = 10, seed: int = 7) -> None:
    """Procedural stand-ins for wearable occluders: ``count`` masks and
    ``count`` sunglasses with anchor sidecars, varied in color and proportion.
    Real photographic assets drop into the same file layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    for i in range(count):
        w, h = 160, 150
        canvas = np.zeros((h, w, 4), dtype=np.uint8)
        tone = rng.integers(120, 230)
        tint = np.array([tone, tone, min(255, tone + rng.integers(0, 25)), 255], dtype=np.uint8)
        rx = 70 + rng.integers(0, 8)
        _draw_ellipse(canvas, w / 2, 70, rx, 66, tint)
        canvas[:12, :, 3] = 0  # keep the top edge clear of the anchor row
        # anchors: nose-bridge contact near the top center, chin contact at the bottom
        anchors = [[w / 2, 16.0], [w / 2, 136.0]]
        stem = directory / f"mask_{i:02d}"
        Image.fromarray(canvas).save(stem.with_suffix(".png"))
        stem.with_suffix(".json").write_text(
            json.dumps({"kind": "mask", "anchors": anchors}, indent=1)
        )

    for i in range(count):
        w, h = 220, 80
        canvas = np.zeros((h, w, 4), dtype=np.uint8)
        shade = int(rng.integers(10, 70))
        color = np.array([shade, shade, shade, 255], dtype=np.uint8)
        lens_r = 26 + int(rng.integers(0, 5))
        _draw_ellipse(canvas, 58, 40, lens_r, lens_r - 4, color)
        _draw_ellipse(canvas, 162, 40, lens_r, lens_r - 4, color)
        canvas[36:44, 58:162] = color  # bridge bar
        anchors = [[24.0, 40.0], [196.0, 40.0]]  # outer lens edges -> eye corners
        stem = directory / f"glasses_{i:02d}"
        Image.fromarray(canvas).save(stem.with_suffix(".png"))
        stem.with_suffix(".json").write_text(
            json.dumps({"kind": "glasses", "anchors": anchors}, indent=1)
        )


# ---------------------------------------------------------------------------
# whole-database synthesis


def synthesize_database(
    manifest: DatasetManifest,
    spec: OcclusionSpec,
    out_dir: Path | str,
    landmark_source: Optional[Callable[[str], Optional[np.ndarray]]] = None,
    assets: Optional[list[OcclusionAsset]] = None,
) -> DatasetManifest:
    """Write an occluded copy of every sample's frames and return the retagged
    manifest. Deterministic: reruns with the same spec produce identical
    manifests and identical frame bytes."""
    out_dir = Path(out_dir)
    if spec.kind in (OcclusionKind.MASK, OcclusionKind.GLASS):
        if landmark_source is None:
            raise OcclusionError("mask/glass synthesis needs a landmark source")
        if not assets:
            raise AssetError("mask/glass synthesis needs at least one asset")
        asset = assets[spec.asset_index % len(assets)]
        expected_kind = AssetKind.MASK if spec.kind is OcclusionKind.MASK else AssetKind.GLASSES
        if asset.kind is not expected_kind:
            raise AssetError(f"asset kind {asset.kind} does not match {spec.kind}")

    new_records: list[AnnotationRecord] = []
    for record in manifest:
        frame_files = list_frame_files(record.frames_dir)
        sample_out = out_dir / "frames" / record.sample_id
        landmarks = None
        block = None
        if spec.kind is OcclusionKind.RANDOM:
            first = load_frame(frame_files[0])
            h, w = first.shape[:2]
            rng = per_sample_rng(spec.seed, record.sample_id)
            block = sample_block((0, 0, w, h), spec.ratio, rng)
        else:
            landmarks = landmark_source(record.sample_id)
            if landmarks is None:
                raise MissingLandmarksError(record.sample_id)
            if len(landmarks) < len(frame_files):
                raise MissingLandmarksError(record.sample_id)

        for idx, src in enumerate(frame_files):
            frame = load_frame(src)
            if spec.kind is OcclusionKind.RANDOM:
                occluded = apply_block(frame, block)
            else:
                occluded = overlay_accessory(frame, landmarks[idx], asset)
            save_frame(sample_out / f"{src.stem}.png", occluded)

        new_records.append(
            replace(record, frames_dir=sample_out, occlusion_tag=spec.occlusion_tag)
        )

    return DatasetManifest(
        tuple(new_records),
        source_note=f"{spec.occlusion_tag} synthesis of {manifest.source_note or 'manifest'}",
    )
