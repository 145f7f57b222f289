"""Local context clustering over non-overlapping windows.

Points inside each ``window_size x window_size`` window are grouped around
``t`` proposed centers by cosine similarity. Each cluster aggregates its
value-space points into a feature ``g`` (weighted by sigmoid-rescaled
similarities and anchored by a value center ``v_c``), and ``g`` is dispatched
back to the cluster's points through a fully connected projection.

Single-cluster building blocks (:func:`aggregate`, :func:`dispatch`, ...) are
kept as plain functions; :func:`cc_layer` is the batched form used by the
network and expresses the same computation with assignment masks.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Linear, Module
from .tensor import Tensor

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class CCLayerConfig:
    centers: int = 4          # t, a perfect square
    window_size: int = 8
    knn_k: int = 4
    sim_dim: int = 8          # d'; the value space uses the same width

    def __post_init__(self):
        side = math.isqrt(self.centers)
        if self.centers < 1 or side * side != self.centers:
            raise ConfigError(f"cluster centers must be a perfect square, got {self.centers}")
        if self.window_size ** 2 < self.centers:
            raise ConfigError(f"window {self.window_size}^2 cannot host {self.centers} centers")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.sim_dim < 1:
            raise ConfigError("sim_dim must be >= 1")

    @property
    def value_dim(self) -> int:
        return self.sim_dim


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowLayout:
    """How a ``H x W`` map was tiled into ``rows x cols`` padded windows."""
    H: int
    W: int
    window_size: int

    @property
    def rows(self) -> int:
        return -(-self.H // self.window_size)

    @property
    def cols(self) -> int:
        return -(-self.W // self.window_size)

    @property
    def num_windows(self) -> int:
        return self.rows * self.cols

    @property
    def pad_h(self) -> int:
        return self.rows * self.window_size - self.H

    @property
    def pad_w(self) -> int:
        return self.cols * self.window_size - self.W

    def valid_mask(self) -> np.ndarray:
        """``[num_windows, ws*ws]`` booleans, False on padding."""
        return _valid_mask(self.H, self.W, self.window_size)


@functools.lru_cache(maxsize=None)
def _valid_mask(H: int, W: int, ws: int) -> np.ndarray:
    lay = WindowLayout(H, W, ws)
    grid = np.zeros((lay.rows * ws, lay.cols * ws), dtype=bool)
    grid[:H, :W] = True
    out = grid.reshape(lay.rows, ws, lay.cols, ws).transpose(0, 2, 1, 3).reshape(lay.num_windows, ws * ws)
    out.setflags(write=False)
    return out


def partition_windows(f: Tensor, window_size: int) -> tuple[Tensor, WindowLayout]:
    """``[..., H, W, d]`` -> ``[..., num_windows, ws*ws, d]`` with zero padding at right/bottom."""
    f = T.as_tensor(f)
    if f.ndim < 3:
        raise DimensionError(f"feature map must be [..., H, W, d], got {f.shape}")
    H, W, d = f.shape[-3:]
    lead = f.shape[:-3]
    lay = WindowLayout(H, W, window_size)
    ws = window_size
    if lay.pad_h or lay.pad_w:
        f = T.pad(f, [(0, 0)] * len(lead) + [(0, lay.pad_h), (0, lay.pad_w), (0, 0)])
    k = len(lead)
    x = f.reshape(lead + (lay.rows, ws, lay.cols, ws, d))
    x = x.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return x.reshape(lead + (lay.num_windows, ws * ws, d)), lay


def reassemble_windows(windows: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`partition_windows`; padding is cropped away."""
    ws = layout.window_size
    lead = windows.shape[:-3]
    d = windows.shape[-1]
    if windows.shape[-3:-1] != (layout.num_windows, ws * ws):
        raise DimensionError(f"windows {windows.shape} do not match layout {layout}")
    k = len(lead)
    x = windows.reshape(lead + (layout.rows, layout.cols, ws, ws, d))
    x = x.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    x = x.reshape(lead + (layout.rows * ws, layout.cols * ws, d))
    if layout.pad_h or layout.pad_w:
        x = x[(Ellipsis, slice(0, layout.H), slice(0, layout.W), slice(None))]
    return x


# ---------------------------------------------------------------------------
# center proposal


def anchor_positions(centers: int, window_size: int) -> np.ndarray:
    """Pixel coordinates (row, col) of the evenly spaced anchor lattice, row-major."""
    side = math.isqrt(centers)
    frac = (np.arange(side) + 0.5) / side
    pix = frac * window_size - 0.5
    rr, cc = np.meshgrid(pix, pix, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def knn_weights(positions: np.ndarray, centers: int, window_size: int, k: int) -> np.ndarray:
    """``[t, n]`` averaging matrix: row c puts 1/k on the k points nearest anchor c.

    Distances are spatial; ties go to the lower point index. With fewer than
    ``k`` points every point is used.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(positions)
    anchors = anchor_positions(centers, window_size)
    d2 = ((anchors[:, None, :] - positions[None, :, :]) ** 2).sum(-1)
    kk = min(k, n)
    out = np.zeros((centers, n))
    for c in range(centers):
        nearest = np.argsort(d2[c], kind="stable")[:kk]
        out[c, nearest] = 1.0 / kk
    return out


def propose_centers(points: Tensor, positions: np.ndarray, cfg: CCLayerConfig) -> Tensor:
    """Center features ``[t, d']``: mean of the ``knn_k`` points nearest each anchor."""
    points = T.as_tensor(points)
    if points.shape[0] < 1:
        raise DimensionError("propose_centers needs at least one point")
    K = knn_weights(positions, cfg.centers, cfg.window_size, cfg.knn_k)
    return Tensor(K) @ points


@functools.lru_cache(maxsize=None)
def _layout_knn(H: int, W: int, ws: int, centers: int, k: int) -> np.ndarray:
    """Per-window averaging matrices ``[num_windows, t, ws*ws]``; zero on padding columns."""
    valid = _valid_mask(H, W, ws)
    local = np.stack(np.divmod(np.arange(ws * ws), ws), axis=1)
    out = np.zeros((len(valid), centers, ws * ws))
    for w, mask in enumerate(valid):
        idx = np.flatnonzero(mask)
        out[w][:, idx] = knn_weights(local[idx], centers, ws, k)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# similarity and assignment


def _norm_floor(x: Tensor) -> Tensor:
    """``max(||x||, NORM_FLOOR)`` over the last axis (keepdims), safe at zero."""
    v = x.data
    nrm = np.sqrt((v * v).sum(-1, keepdims=True))
    live = nrm > NORM_FLOOR
    safe = np.where(live, nrm, 1.0)

    def bw(g):
        return (g * live * v / safe,)

    return T.custom_op(np.where(live, nrm, NORM_FLOOR), (x,), bw, "norm_floor")


def similarity_matrix(centers: Tensor, points: Tensor) -> Tensor:
    """Cosine similarity ``[..., t, n]`` between ``[..., t, d']`` centers and ``[..., n, d']`` points."""
    centers, points = T.as_tensor(centers), T.as_tensor(points)
    if centers.shape[-1] != points.shape[-1]:
        raise DimensionError(f"centers {centers.shape} and points {points.shape} differ in feature width")
    cn = centers / _norm_floor(centers)
    pn = points / _norm_floor(points)
    nd = pn.ndim
    return cn @ pn.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))


def assign_clusters(S) -> np.ndarray:
    """Index of the most similar center per point (lowest index on ties)."""
    s = np.asarray(getattr(S, "data", S))
    return np.argmax(s, axis=-2)


def aggregation_weights(sims, alpha: float, beta: float) -> tuple[float, np.ndarray]:
    """Weights of ``v_c`` and of each point in the aggregated feature; they sum to 1."""
    sig = T._sigmoid(alpha * np.asarray(sims, dtype=np.float64) + beta)
    total = 1.0 + sig.sum()
    return 1.0 / total, sig / total


def aggregate(cluster_points: Tensor, sims: Tensor, v_c: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """``g = (v_c + sum_i sigmoid(alpha*s_i + beta) p_i) / (1 + sum_i sigmoid(alpha*s_i + beta))``."""
    P = T.as_tensor(cluster_points)
    s = T.as_tensor(sims)
    m = s.shape[0]
    w = T.sigmoid(alpha * s + beta).reshape((1, m))
    total = 1.0 + w.sum()
    return (T.as_tensor(v_c) + (w @ P).reshape(P.shape[-1:])) / total


def dispatch(points: Tensor, sims: Tensor, g: Tensor, fc: Linear, alpha: Tensor, beta: Tensor) -> Tensor:
    """``p'_i = p_i + FC(sigmoid(alpha*s_i + beta) * g)`` for each point of one cluster."""
    s = T.as_tensor(sims)
    m = s.shape[0]
    w = T.sigmoid(alpha * s + beta).reshape((m, 1))
    return T.as_tensor(points) + fc(w * T.as_tensor(g).reshape((1, -1)))


# ---------------------------------------------------------------------------
# the layer


class CCBranch(Module):
    """Weights of one clustering branch: similarity/value projections, FC, alpha, beta."""

    def __init__(self, dim: int, cfg: CCLayerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.sim_proj = Linear(dim, cfg.sim_dim, rng)
        self.value_proj = Linear(dim, cfg.value_dim, rng)
        self.fc = Linear(cfg.value_dim, dim, rng)
        self.alpha = Tensor(np.ones(1), requires_grad=True)
        self.beta = Tensor(np.zeros(1), requires_grad=True)

    def __call__(self, f: Tensor) -> Tensor:
        return cc_layer(f, self.cfg, self)


def cc_layer(f: Tensor, cfg: CCLayerConfig, weights: CCBranch) -> Tensor:
    """Cluster, aggregate and dispatch within windows of a ``[..., H, W, d]`` map."""
    f = T.as_tensor(f)
    H, W = f.shape[-3:-1]
    ps, layout = partition_windows(weights.sim_proj(f), cfg.window_size)
    pv, _ = partition_windows(weights.value_proj(f), cfg.window_size)
    K = Tensor(_layout_knn(H, W, cfg.window_size, cfg.centers, cfg.knn_k))
    centers = K @ ps                                  # [..., nw, t, d']
    v_c = K @ pv
    S = similarity_matrix(centers, ps)                # [..., nw, t, n]

    valid = layout.valid_mask()                       # [nw, n]
    assign = assign_clusters(S)                       # [..., nw, n]
    onehot = (np.arange(cfg.centers)[:, None] == assign[..., None, :]) & valid[:, None, :]
    weight = T.sigmoid(weights.alpha * S + weights.beta) * onehot.astype(np.float64)
    total = 1.0 + weight.sum(axis=-1, keepdims=True)  # [..., nw, t, 1]
    g = (v_c + weight @ pv) / total                   # [..., nw, t, d']

    nd = weight.ndim
    per_point = weight.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2)) @ g   # sigma_i * g_a(i)
    update = reassemble_windows(weights.fc(per_point), layout)
    return f + update
