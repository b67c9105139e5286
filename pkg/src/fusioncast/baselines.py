"""Optical-flow extrapolation and persistence forecasts.

The extrapolator also stands in as the generator of the future-prior radar
frames consumed by the model's prior branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import DataError, FrameSequence


@dataclass
class FlowParams:
    smooth_sigma: float = 1.5
    window_sigma: float = 2.0
    levels: int = 2
    iterations: int = 3
    damping: float = 1e-3
    v_max: float = 10.0


@dataclass
class FlowField:
    """Displacement in pixels per frame; u points east (+column), v south (+row)."""

    u: np.ndarray
    v: np.ndarray


def _warp(frame: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``frame`` at (x - u, y - v) bilinearly; outside the domain reads 0."""
    n_r, n_c = frame.shape
    rows, cols = np.mgrid[0:n_r, 0:n_c].astype(np.float64)
    return ndimage.map_coordinates(frame, [rows - v, cols - u], order=1, mode="grid-constant", cval=0.0)


def _lk_increment(f0: np.ndarray, f1: np.ndarray, p: FlowParams) -> tuple[np.ndarray, np.ndarray]:
    gy0, gx0 = np.gradient(f0)
    gy1, gx1 = np.gradient(f1)
    gx, gy = 0.5 * (gx0 + gx1), 0.5 * (gy0 + gy1)
    gt = f1 - f0
    w = lambda a: ndimage.gaussian_filter(a, p.window_sigma, mode="constant")
    sxx, syy, sxy = w(gx * gx), w(gy * gy), w(gx * gy)
    sxt, syt = w(gx * gt), w(gy * gt)
    a, d = sxx + p.damping, syy + p.damping
    det = a * d - sxy * sxy
    u = (-d * sxt + sxy * syt) / det
    v = (sxy * sxt - a * syt) / det
    return u, v


def estimate_flow(f_prev: np.ndarray, f_curr: np.ndarray, params: FlowParams | None = None) -> FlowField:
    """Dense damped Lucas-Kanade over a Gaussian pyramid."""
    p = params or FlowParams()
    f_prev = np.asarray(f_prev, dtype=np.float64)
    f_curr = np.asarray(f_curr, dtype=np.float64)
    if f_prev.shape != f_curr.shape or f_prev.ndim != 2:
        raise DataError(f"frame extents differ: {f_prev.shape} vs {f_curr.shape}")
    s0 = ndimage.gaussian_filter(f_prev, p.smooth_sigma)
    s1 = ndimage.gaussian_filter(f_curr, p.smooth_sigma)
    pyr = [(s0, s1)]
    for _ in range(p.levels - 1):
        a, b = pyr[-1]
        if min(a.shape) < 8:
            break
        pyr.append((ndimage.zoom(ndimage.gaussian_filter(a, 1.0), 0.5, order=1),
                    ndimage.zoom(ndimage.gaussian_filter(b, 1.0), 0.5, order=1)))
    u = np.zeros(pyr[-1][0].shape)
    v = np.zeros_like(u)
    for level, (a, b) in enumerate(reversed(pyr)):
        if level:
            zoom = (a.shape[0] / u.shape[0], a.shape[1] / u.shape[1])
            u = ndimage.zoom(u, zoom, order=1) * zoom[1]
            v = ndimage.zoom(v, zoom, order=1) * zoom[0]
        for _ in range(p.iterations):
            du, dv = _lk_increment(_warp(a, u, v), b, p)
            u, v = u + du, v + dv
    np.clip(u, -p.v_max, p.v_max, out=u)
    np.clip(v, -p.v_max, p.v_max, out=v)
    return FlowField(u, v)


def advect(frame: np.ndarray, flow: FlowField, steps: int) -> np.ndarray:
    """Backward semi-Lagrangian extrapolation, ``steps`` frames of shape (steps, n, n)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out = np.empty((steps,) + np.shape(frame))
    cur = np.asarray(frame, dtype=np.float64)
    for k in range(steps):
        cur = _warp(cur, flow.u, flow.v)
        np.maximum(cur, 0.0, out=cur)
        out[k] = cur
    return out


def generate_prior(hist: FrameSequence, t_out: int, params: FlowParams | None = None,
                   perturb_sigma: float = 0.0, seed: int = 0) -> FrameSequence:
    """Extrapolate the last history frame along the flow of the last two frames.

    ``perturb_sigma`` adds a seeded constant offset (px/frame) to both flow
    components to emulate an imperfect prior.
    """
    if len(hist) < 2:
        raise DataError("prior generation needs at least two history frames")
    flow = estimate_flow(hist.frames[-2], hist.frames[-1], params)
    if perturb_sigma > 0:
        du, dv = np.random.default_rng(seed).normal(0.0, perturb_sigma, size=2)
        flow = FlowField(flow.u + du, flow.v + dv)
    frames = advect(hist.frames[-1], flow, t_out)
    epochs = hist.epochs[-1] + hist.cadence * np.arange(1, t_out + 1, dtype=np.int64)
    return FrameSequence(frames, epochs, hist.cadence, hist.units)


def persistence(last_frame: np.ndarray, t_out: int) -> np.ndarray:
    return np.repeat(np.asarray(last_frame)[None], t_out, axis=0)
