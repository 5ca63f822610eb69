"""Numerical kernels: 2-D DWT, dyadic scale pyramid, Lucas-Kanade flow and
motion-compensated warping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import ndimage

from .errors import DimensionError

# Analysis filters of the CDF 9/7 biorthogonal pair, normalized so the lowpass
# taps sum to sqrt(2) (same DC gain as orthonormal Haar).
CDF97_LO = np.array([
    0.03782845550726404, -0.023849465019556843, -0.11062440441843718,
    0.37740285561283066, 0.8526986790088938, 0.37740285561283066,
    -0.11062440441843718, -0.023849465019556843, 0.03782845550726404,
])
CDF97_HI = np.array([
    -0.0645388826289384, 0.04068941760955867, 0.41809227322161724,
    -0.7884856164056651, 0.41809227322161724, 0.04068941760955867,
    -0.0645388826289384,
])

LK_WINDOW = 7
LK_MIN_EIGENVALUE = 1e-6
LK_ITERATIONS = 3


@dataclass(frozen=True)
class DwtLevel:
    """Subbands of one decomposition level.

    ``detail_h`` is high-pass along the horizontal axis, ``detail_v`` along
    the vertical axis, ``detail_d`` along both.
    """

    approx: np.ndarray
    detail_h: np.ndarray
    detail_v: np.ndarray
    detail_d: np.ndarray
    scale: int

    @property
    def details(self):
        return self.detail_h, self.detail_v, self.detail_d


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (pixels) such that ``curr(x) ~ prev(x - (u, v))``."""

    u: np.ndarray
    v: np.ndarray

    @property
    def shape(self):
        return self.u.shape


def _pad_even(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    if h % 2 or w % 2:
        plane = np.pad(plane, ((0, h % 2), (0, w % 2)), mode="symmetric")
    return plane


def _haar_step(x: np.ndarray):
    x = _pad_even(x)
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    h = (a - b + c - d) / 2.0
    v = (a + b - c - d) / 2.0
    dd = (a - b - c + d) / 2.0
    return ll, h, v, dd


def _cdf97_axis(x: np.ndarray, axis: int):
    lo = ndimage.correlate1d(x, CDF97_LO, axis=axis, mode="mirror")
    hi = ndimage.correlate1d(x, CDF97_HI, axis=axis, mode="mirror")
    sl_even = [slice(None)] * 2
    sl_odd = [slice(None)] * 2
    sl_even[axis] = slice(0, None, 2)
    sl_odd[axis] = slice(1, None, 2)
    return lo[tuple(sl_even)], hi[tuple(sl_odd)]


def _cdf97_step(x: np.ndarray):
    x = _pad_even(x)
    lo_x, hi_x = _cdf97_axis(x, axis=1)
    ll, v = _cdf97_axis(lo_x, axis=0)
    h, dd = _cdf97_axis(hi_x, axis=0)
    return ll, h, v, dd


_STEPS = {"haar": _haar_step, "cdf97": _cdf97_step}


def dwt2d(plane: np.ndarray, levels: int, family: str = "haar") -> List[DwtLevel]:
    """Multi-level separable 2-D DWT.

    Level ``k`` (1-based) decomposes the approximation band of level ``k-1``.
    Odd dimensions are extended symmetrically by one sample, so each subband
    has ``ceil(n / 2)`` samples per axis.

    Raises:
        DimensionError: ``levels`` outside [1, 4] or plane smaller than ``2**levels``.
    """
    if family not in _STEPS:
        raise ValueError(f"unknown wavelet family {family!r}")
    if not 1 <= levels <= 4:
        raise DimensionError(f"levels must be in [1, 4], got {levels}")
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or min(plane.shape) < 2 ** levels:
        raise DimensionError(
            f"plane of shape {plane.shape} too small for {levels} DWT levels")
    step = _STEPS[family]
    out = []
    approx = plane
    for k in range(1, levels + 1):
        ll, h, v, d = step(approx)
        out.append(DwtLevel(ll, h, v, d, k))
        approx = ll
    return out


def build_scale_pyramid(plane: np.ndarray, scales: int = 4) -> List[np.ndarray]:
    """Dyadic pyramid from Haar approximation bands, halved to keep the intensity range."""
    plane = np.asarray(plane, dtype=np.float64)
    if min(plane.shape) < 16:
        raise DimensionError(f"plane of shape {plane.shape} smaller than 16x16")
    out = [plane]
    for _ in range(scales - 1):
        ll = dwt2d(out[-1], 1, "haar")[0].approx
        out.append(ll / 2.0)
    return out


def _central_diff(x: np.ndarray, axis: int) -> np.ndarray:
    return ndimage.correlate1d(x, [-0.5, 0.0, 0.5], axis=axis, mode="nearest")


def lucas_kanade_flow(prev: np.ndarray, curr: np.ndarray,
                      window: int = LK_WINDOW,
                      min_eigenvalue: float = LK_MIN_EIGENVALUE,
                      iterations: int = LK_ITERATIONS) -> FlowField:
    """Dense single-level Lucas-Kanade flow over a square box window.

    Spatial gradients are averaged over both frames. The structure tensor is
    the window sum of gradient products (the normal matrix of the windowed
    least-squares problem); pixels whose smallest eigenvalue is below
    ``min_eigenvalue`` get zero flow. Each iteration warps ``prev`` by the
    current estimate and solves for the remaining displacement.
    """
    prev = np.asarray(prev, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if prev.shape != curr.shape:
        raise DimensionError(f"frame shapes differ: {prev.shape} vs {curr.shape}")
    u = np.zeros_like(prev)
    v = np.zeros_like(prev)
    for k in range(iterations):
        warped = prev if k == 0 else displaced_frame(prev, FlowField(u, v))
        du, dv, ok = _lk_step(warped, curr, window, min_eigenvalue)
        if k == 0:
            valid = ok
        step = valid & ok
        u[step] += du[step]
        v[step] += dv[step]
    return FlowField(u, v)


def _lk_step(prev, curr, window, min_eigenvalue):
    mean = 0.5 * (prev + curr)
    ix = _central_diff(mean, axis=1)
    iy = _central_diff(mean, axis=0)
    it = curr - prev

    def box(a):
        return ndimage.uniform_filter(a, size=window, mode="reflect") * (window * window)

    sxx = box(ix * ix)
    syy = box(iy * iy)
    sxy = box(ix * iy)
    sxt = box(ix * it)
    syt = box(iy * it)

    tr = sxx + syy
    det = sxx * syy - sxy * sxy
    disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    lam_min = 0.5 * tr - disc
    ok = (lam_min >= min_eigenvalue) & (det > 0)
    safe = np.where(ok, det, 1.0)
    # Solve [sxx sxy; sxy syy] d = -[sxt; syt].
    du = (-syy * sxt + sxy * syt) / safe
    dv = (sxy * sxt - sxx * syt) / safe
    return du, dv, ok


def displaced_frame(prev: np.ndarray, flow: FlowField) -> np.ndarray:
    """Warp ``prev`` by ``flow`` with bilinear sampling and border clamping."""
    prev = np.asarray(prev, dtype=np.float64)
    if flow.shape != prev.shape:
        raise DimensionError(f"flow shape {flow.shape} differs from frame {prev.shape}")
    h, w = prev.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(xx - flow.u, 0.0, w - 1)
    sy = np.clip(yy - flow.v, 0.0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0
    top = prev[y0, x0] * (1.0 - wx) + prev[y0, x1] * wx
    bot = prev[y1, x0] * (1.0 - wx) + prev[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy
