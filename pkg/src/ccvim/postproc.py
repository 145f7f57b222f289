"""Instance separation from a foreground probability map and horizontal /
vertical distance maps: Sobel gradient fusion, marker extraction, energy
landscape and a deterministic marker-controlled watershed."""
from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class DistanceMaps:
    h: np.ndarray  # signed x-offset from the instance centroid, in [-1, 1]
    v: np.ndarray  # signed y-offset

    def stack(self) -> np.ndarray:
        return np.stack([self.h, self.v])


@dataclass(frozen=True)
class WatershedParams:
    r: float = 0.5       # marker probability threshold
    k_grad: float = 0.4  # gradient threshold
    h_prob: float = 0.5  # foreground threshold

    def __post_init__(self):
        for name in ("r", "k_grad", "h_prob"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"watershed parameter {name}={v} must lie in (0, 1)")


def threshold(x, level: float) -> np.ndarray:
    """1 where ``x`` exceeds ``level``, else 0."""
    return (np.asarray(x) > level).astype(np.uint8)


def distance_targets(inst) -> DistanceMaps:
    """Per-instance centroid offsets along x and y, each scaled so its extreme is +-1."""
    inst = np.asarray(inst)
    if inst.ndim != 2:
        raise DimensionError(f"instance map must be 2D, got {inst.shape}")
    h = np.zeros(inst.shape)
    v = np.zeros(inst.shape)
    objs = ndimage.find_objects(inst.astype(np.int64))
    for i, sl in enumerate(objs, 1):
        if sl is None:
            continue
        ys, xs = np.nonzero(inst[sl] == i)
        dy = ys - ys.mean()
        dx = xs - xs.mean()
        for off, out in ((dx, h), (dy, v)):
            m = np.abs(off).max()
            vals = off / m if m > 0 else np.zeros_like(off)
            out[sl][ys, xs] = vals
    return DistanceMaps(h, v)


def _unit_range(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def sobel_magnitude(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gx = ndimage.sobel(x, axis=1, mode="nearest")
    gy = ndimage.sobel(x, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def fused_gradient(d: DistanceMaps) -> np.ndarray:
    """Pixelwise max of the min-max normalized Sobel magnitudes of both maps."""
    return np.maximum(_unit_range(sobel_magnitude(d.v)), _unit_range(sobel_magnitude(d.h)))


def extract_markers(P, M_s, params: WatershedParams = WatershedParams()) -> np.ndarray:
    """Label 4-connected components of ``max(tau(P, r) - tau(M_s, k), 0)``."""
    P = np.asarray(P)
    if P.shape != np.shape(M_s):
        raise DimensionError(f"probability {P.shape} vs gradient {np.shape(M_s)}")
    raw = threshold(P, params.r).astype(np.int8) - threshold(M_s, params.k_grad).astype(np.int8)
    labels, _ = ndimage.label(np.maximum(raw, 0), structure=FOUR_CONNECTED)
    return labels


def energy_landscape(P, M_s, params: WatershedParams = WatershedParams()) -> np.ndarray:
    """``(1 - tau(M_s, k)) * tau(P, h)`` as a float map of zeros and ones."""
    return ((1 - threshold(M_s, params.k_grad)) * threshold(P, params.h_prob)).astype(np.float64)


def marker_watershed(markers, energy, mask) -> np.ndarray:
    """Flood ``mask`` from the marker seeds.

    Pixels are claimed in order of (higher energy first, flood distance,
    label, row-major index); every mask pixel reachable from a marker ends up
    with that marker's label. Marker pixels outside ``mask`` are clipped and
    markers left with no pixels are dropped with a warning.
    """
    markers = np.asarray(markers)
    energy = np.asarray(energy, dtype=np.float64)
    mask = np.asarray(mask) != 0
    if markers.shape != mask.shape or energy.shape != mask.shape:
        raise DimensionError(f"markers {markers.shape}, energy {energy.shape}, mask {mask.shape} differ")
    H, W = mask.shape
    out = np.where(mask, markers, 0).astype(np.int64)
    dropped = sorted(set(np.unique(markers)) - set(np.unique(out)) - {0})
    if dropped:
        warnings.warn(f"markers {[int(m) for m in dropped]} lie entirely outside the mask and were dropped", stacklevel=2)

    flat_out = out.reshape(-1)
    flat_mask = mask.reshape(-1)
    neg_e = (-energy).reshape(-1)
    heap: list[tuple[float, int, int, int]] = []

    def push_neighbours(idx: int, dist: int, lab: int) -> None:
        y, x = divmod(idx, W)
        for ny, nx in ((y - 1, x), (y, x - 1), (y, x + 1), (y + 1, x)):
            if 0 <= ny < H and 0 <= nx < W:
                n = ny * W + nx
                if flat_mask[n] and flat_out[n] == 0:
                    heapq.heappush(heap, (neg_e[n], dist, lab, n))

    for idx in np.flatnonzero(flat_out):
        push_neighbours(int(idx), 1, int(flat_out[idx]))
    while heap:
        _, dist, lab, idx = heapq.heappop(heap)
        if flat_out[idx]:
            continue
        flat_out[idx] = lab
        push_neighbours(idx, dist + 1, lab)
    return out


def postprocess(P, d: DistanceMaps, params: WatershedParams = WatershedParams()) -> np.ndarray:
    """Probability map + distance maps -> instance map."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape != d.h.shape or P.shape != d.v.shape:
        raise DimensionError(f"probability {P.shape} vs distance maps {d.h.shape}/{d.v.shape}")
    M_s = fused_gradient(d)
    markers = extract_markers(P, M_s, params)
    E = energy_landscape(P, M_s, params)
    return marker_watershed(markers, E, threshold(P, params.h_prob))
