"""Dense optical flow between onset and apex frames and fixed-position region crops.

The flow estimator is a pluggable contract: any callable taking two same-sized
grayscale images and returning (u, v) displacement grids. The built-in
:class:`CoarseToFineFlow` is a pyramidal TV-L1 solver (duality-based, with
image warping between pyramid levels) that is accurate enough for the
synthetic-shift tests and small training corpora; swap in a faster estimator
for full-scale runs by passing any conforming callable.

Cropping happens on the flow field itself: the flow is computed once on the
full face, then each region window (see :data:`DEFAULT_CROPS`) is cut out of
both components and resized bilinearly to the common side length S.

Cache format: one binary record per sample, 16-byte header
``magic "RRN1" | uint32 S | uint32 region count | 4 reserved bytes`` followed
by all vertical grids then all horizontal grids as little-endian float32,
row-major, in region order.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage


class FlowError(Exception):
    pass


class SizeMismatchError(FlowError):
    pass


class EstimatorFailureError(FlowError):
    pass


class FlowTooSmallError(FlowError):
    pass


class CacheFormatError(FlowError):
    pass


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field: u horizontal, v vertical, in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise SizeMismatchError(
                f"u and v must be matching 2-D grids, got {u.shape} vs {v.shape}"
            )
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


class FlowEstimator(Protocol):
    def __call__(self, onset: np.ndarray, apex: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ...


def _forward_grad(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1] = a[:, 1:] - a[:, :-1]
    gy[:-1, :] = a[1:, :] - a[:-1, :]
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    div = np.zeros_like(px)
    div[:, 0] += px[:, 0]
    div[:, 1:] += px[:, 1:] - px[:, :-1]
    div[0, :] += py[0, :]
    div[1:, :] += py[1:, :] - py[:-1, :]
    return div


def _centered_grad(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.gradient(a, axis=1)
    gy = np.gradient(a, axis=0)
    return gx, gy


def _warp(a: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = a.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([yy + v, xx + u])
    return ndimage.map_coordinates(a, coords, order=1, mode="nearest")


def _downscale(a: np.ndarray, factor: float) -> np.ndarray:
    smoothed = ndimage.gaussian_filter(a, sigma=0.8)
    h = max(1, int(round(a.shape[0] * factor)))
    w = max(1, int(round(a.shape[1] * factor)))
    return resize_bilinear(smoothed, h, w)


class CoarseToFineFlow:
    """Pyramidal TV-L1 optical flow.

    Duality-based scheme: per pyramid level, the second image is warped by the
    current flow, the data term is handled by pointwise thresholding, and the
    total-variation term by a fixed number of dual (Chambolle-style) updates.
    Deterministic for fixed inputs and parameters.
    """

    def __init__(
        self,
        data_weight: float = 0.15,
        tightness: float = 0.3,
        dual_step: float = 0.25,
        warps: int = 5,
        inner_iterations: int = 30,
        pyramid_scale: float = 0.5,
        min_level_size: int = 16,
    ):
        self.data_weight = data_weight
        self.tightness = tightness
        self.dual_step = dual_step
        self.warps = warps
        self.inner_iterations = inner_iterations
        self.pyramid_scale = pyramid_scale
        self.min_level_size = min_level_size

    def __call__(self, onset: np.ndarray, apex: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        i0 = np.asarray(onset, dtype=np.float64)
        i1 = np.asarray(apex, dtype=np.float64)
        lo = min(i0.min(), i1.min())
        hi = max(i0.max(), i1.max())
        if hi > lo:
            scale = 255.0 / (hi - lo)
            i0 = (i0 - lo) * scale
            i1 = (i1 - lo) * scale

        pyramid = [(i0, i1)]
        while min(pyramid[-1][0].shape) * self.pyramid_scale >= self.min_level_size:
            a, b = pyramid[-1]
            pyramid.append((_downscale(a, self.pyramid_scale), _downscale(b, self.pyramid_scale)))

        u = np.zeros_like(pyramid[-1][0])
        v = np.zeros_like(u)
        for level, (a, b) in enumerate(reversed(pyramid)):
            if level > 0:
                inv = 1.0 / self.pyramid_scale
                u = resize_bilinear(u, a.shape[0], a.shape[1]) * inv
                v = resize_bilinear(v, a.shape[0], a.shape[1]) * inv
            u, v = self._solve_level(a, b, u, v)
        return u.astype(np.float32), v.astype(np.float32)

    def _solve_level(self, i0, i1, u, v):
        lt = self.data_weight * self.tightness
        sigma = self.dual_step / self.tightness
        i1x, i1y = _centered_grad(i1)
        p11 = np.zeros_like(u)
        p12 = np.zeros_like(u)
        p21 = np.zeros_like(u)
        p22 = np.zeros_like(u)
        for _ in range(self.warps):
            i1w = _warp(i1, u, v)
            i1wx = _warp(i1x, u, v)
            i1wy = _warp(i1y, u, v)
            grad_sq = i1wx**2 + i1wy**2
            rho_const = i1w - i1wx * u - i1wy * v - i0
            for _ in range(self.inner_iterations):
                rho = rho_const + i1wx * u + i1wy * v
                d1 = np.where(
                    rho < -lt * grad_sq,
                    lt * i1wx,
                    np.where(
                        rho > lt * grad_sq,
                        -lt * i1wx,
                        -rho * i1wx / np.maximum(grad_sq, 1e-12),
                    ),
                )
                d2 = np.where(
                    rho < -lt * grad_sq,
                    lt * i1wy,
                    np.where(
                        rho > lt * grad_sq,
                        -lt * i1wy,
                        -rho * i1wy / np.maximum(grad_sq, 1e-12),
                    ),
                )
                aux_u = u + d1
                aux_v = v + d2
                u = aux_u + self.tightness * _divergence(p11, p12)
                v = aux_v + self.tightness * _divergence(p21, p22)
                ux, uy = _forward_grad(u)
                vx, vy = _forward_grad(v)
                nu = 1.0 + sigma * np.sqrt(ux**2 + uy**2)
                nv = 1.0 + sigma * np.sqrt(vx**2 + vy**2)
                p11 = (p11 + sigma * ux) / nu
                p12 = (p12 + sigma * uy) / nu
                p21 = (p21 + sigma * vx) / nv
                p22 = (p22 + sigma * vy) / nv
        return u, v


def compute_flow(
    onset: np.ndarray,
    apex: np.ndarray,
    estimator: FlowEstimator | None = None,
) -> FlowField:
    """Run a dense-flow estimator on an onset/apex pair.

    Inputs must be same-sized 2-D grayscale arrays. Estimator exceptions are
    wrapped in EstimatorFailureError; output grids must match the input size.
    """
    onset = np.asarray(onset)
    apex = np.asarray(apex)
    if onset.ndim != 2 or apex.ndim != 2:
        raise SizeMismatchError("expected 2-D grayscale images")
    if onset.shape != apex.shape:
        raise SizeMismatchError(f"frame sizes differ: {onset.shape} vs {apex.shape}")
    if estimator is None:
        estimator = CoarseToFineFlow()
    try:
        u, v = estimator(onset, apex)
    except Exception as exc:
        raise EstimatorFailureError(f"flow estimator failed: {exc}") from exc
    u = np.asarray(u)
    if u.shape != onset.shape:
        raise EstimatorFailureError(
            f"estimator returned {u.shape} flow for {onset.shape} input"
        )
    return FlowField(u=u, v=np.asarray(v))


class Anchor(enum.Enum):
    FULL = "full"
    TOP_LEFT = "top_left"
    TOP_RIGHT = "top_right"
    CENTER_DOWN = "center_down"
    CENTER = "center"


#: (anchor, scale ratio) for the duplicated original region plus five crops.
DEFAULT_CROPS: tuple[tuple[Anchor, float], ...] = (
    (Anchor.FULL, 1.0),
    (Anchor.TOP_LEFT, 0.75),
    (Anchor.TOP_RIGHT, 0.75),
    (Anchor.CENTER_DOWN, 0.75),
    (Anchor.CENTER, 0.9),
    (Anchor.CENTER, 0.85),
)


@dataclass(frozen=True)
class RegionCropSpec:
    entries: tuple[tuple[Anchor, float], ...] = DEFAULT_CROPS
    output_size: int = 224

    def __post_init__(self):
        if len(self.entries) != len(DEFAULT_CROPS):
            raise ValueError(f"expected {len(DEFAULT_CROPS)} region entries")
        first_anchor, first_ratio = self.entries[0]
        if first_anchor is not Anchor.FULL or first_ratio != 1.0:
            raise ValueError("entry 0 must be the full region at ratio 1.0")
        for _, ratio in self.entries:
            if not (0.0 < ratio <= 1.0):
                raise ValueError(f"ratio {ratio} outside (0, 1]")
        if self.output_size < 2:
            raise ValueError("output_size must be >= 2")

    @property
    def num_regions(self) -> int:
        return len(self.entries)


def crop_window(anchor: Anchor, ratio: float, height: int, width: int) -> tuple[int, int, int, int]:
    """(row0, col0, win_h, win_w) for an anchored window; floor rounding throughout."""
    win_h = int(ratio * height)
    win_w = int(ratio * width)
    if anchor is Anchor.FULL:
        return 0, 0, height, width
    if anchor is Anchor.TOP_LEFT:
        return 0, 0, win_h, win_w
    if anchor is Anchor.TOP_RIGHT:
        return 0, width - win_w, win_h, win_w
    if anchor is Anchor.CENTER_DOWN:
        return height - win_h, (width - win_w) // 2, win_h, win_w
    if anchor is Anchor.CENTER:
        return (height - win_h) // 2, (width - win_w) // 2, win_h, win_w
    raise ValueError(anchor)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Corner alignment makes same-size resizing an exact identity and keeps the
    map linear in pixel values.
    """
    img = np.asarray(img)
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    rows = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    out = top * (1 - fr) + bot * fr
    return out.astype(img.dtype) if np.issubdtype(img.dtype, np.floating) else out


@dataclass(frozen=True)
class RegionStack:
    """Per-sample network input: region-cropped flow components.

    ``vertical`` holds the v-component crops and ``horizontal`` the
    u-component crops, each shaped (regions, S, S) float32 with the full
    region at index 0.
    """

    vertical: np.ndarray
    horizontal: np.ndarray

    def __post_init__(self):
        vert = np.ascontiguousarray(self.vertical, dtype=np.float32)
        horz = np.ascontiguousarray(self.horizontal, dtype=np.float32)
        if vert.ndim != 3 or vert.shape != horz.shape or vert.shape[1] != vert.shape[2]:
            raise ValueError(f"bad region stack shapes {vert.shape} / {horz.shape}")
        object.__setattr__(self, "vertical", vert)
        object.__setattr__(self, "horizontal", horz)

    @property
    def num_regions(self) -> int:
        return self.vertical.shape[0]

    @property
    def size(self) -> int:
        return self.vertical.shape[1]


def crop_regions(flow: FlowField, spec: RegionCropSpec | None = None) -> RegionStack:
    """Cut the anchored region windows out of both flow components and resize
    each to S x S. Deterministic; linear in the flow values."""
    if spec is None:
        spec = RegionCropSpec()
    if flow.height < 8 or flow.width < 8:
        raise FlowTooSmallError(f"flow {flow.height}x{flow.width} below 8x8 minimum")
    s = spec.output_size
    vertical = np.empty((spec.num_regions, s, s), dtype=np.float32)
    horizontal = np.empty((spec.num_regions, s, s), dtype=np.float32)
    for k, (anchor, ratio) in enumerate(spec.entries):
        r0, c0, win_h, win_w = crop_window(anchor, ratio, flow.height, flow.width)
        v_win = flow.v[r0 : r0 + win_h, c0 : c0 + win_w]
        u_win = flow.u[r0 : r0 + win_h, c0 : c0 + win_w]
        vertical[k] = resize_bilinear(v_win.astype(np.float64), s, s)
        horizontal[k] = resize_bilinear(u_win.astype(np.float64), s, s)
    return RegionStack(vertical=vertical, horizontal=horizontal)


_CACHE_MAGIC = b"RRN1"
_HEADER = struct.Struct("<4sII4x")  # magic, S, region count, reserved


def write_stack(path: Path | str, stack: RegionStack) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = stack.vertical.astype("<f4").tobytes() + stack.horizontal.astype("<f4").tobytes()
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(_CACHE_MAGIC, stack.size, stack.num_regions))
        fh.write(payload)


def read_stack(path: Path | str) -> RegionStack:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, size, regions = _HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 2 * regions * size * size * 4
    if len(raw) != expected:
        raise CacheFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    grids = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    grids = grids.reshape(2, regions, size, size)
    return RegionStack(vertical=grids[0].copy(), horizontal=grids[1].copy())


def stack_from_frames(
    onset: np.ndarray,
    apex: np.ndarray,
    spec: RegionCropSpec | None = None,
    estimator: FlowEstimator | None = None,
) -> RegionStack:
    """Convenience: flow + region crops in one call."""
    return crop_regions(compute_flow(onset, apex, estimator), spec)
