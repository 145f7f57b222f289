"""Named finite-difference checks for every differentiable operation.

Each check builds random inputs from a seed, reduces the operation's output
to a scalar through fixed random weights (so no coordinate of the output
gradient is trivially uniform) and returns the worst relative error reported
by :func:`ccvim.tensor.finite_diff_check`.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .cluster import CCBranch, CCLayerConfig
from .errors import ConfigError
from .losses import ce_loss, combined_loss, dice_loss
from .net import CCViMBlock, CCViMNet, NetworkConfig, PatchExpand, PatchMerge
from .plan import parse_layer
from .scan_paths import ScanDirection, cross_merge, flatten_direction, unflatten_direction
from .ssm import init_ssm_params, selective_scan
from .tensor import Tensor

EPS = 1e-5
TOLERANCE = 1e-4
NET_COORDS = 48
# Denominator floors for the relative error. Central differences of an O(1)
# scalar at eps = 1e-5 carry ~1e-11 absolute round-off (~1e-10 through a whole
# block), so smaller gradients can only be compared in absolute terms.
OP_FLOOR = 1e-6
NET_FLOOR = 1e-5


def _param(rng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _away_from(rng, shape, point: float = 0.0, gap: float = 0.1) -> np.ndarray:
    """Random values at least ``gap`` from ``point`` (keeps kinks out of the stencil)."""
    u = rng.standard_normal(shape)
    return point + np.sign(u) * (gap + np.abs(u))


def _check(fn: Callable[..., Tensor], params: list[Tensor], rng, max_coords=None, floor=OP_FLOOR) -> float:
    """Contract ``fn(*params)`` against a fixed random tensor and gradient-check it."""
    with T.no_grad():
        out_shape = fn(*params).shape
    R = rng.standard_normal(out_shape)

    def f():
        return (fn(*params) * R).sum()

    return T.finite_diff_check(f, params, eps=EPS, max_coords=max_coords, rng=rng, floor=floor)


def _binary(op):
    def check(rng):
        a, b = _param(rng, 3, 4), _param(rng, 4)
        return _check(op, [a, b], rng)
    return check


def _unary(op, positive: bool = False):
    def check(rng):
        x = rng.uniform(0.2, 2.0, (3, 5)) if positive else 2.0 * rng.standard_normal((3, 5))
        return _check(op, [Tensor(x, requires_grad=True)], rng)
    return check


def _div(rng):
    a = _param(rng, 3, 4)
    b = Tensor(_away_from(rng, (3, 4), gap=0.5), requires_grad=True)
    return _check(T.div, [a, b], rng)


def _matmul(rng):
    return _check(T.matmul, [_param(rng, 2, 3, 4), _param(rng, 4, 2)], rng)


def _softplus_large(rng):
    # exercises the overflow-safe branch on both sides of x = 20
    x = Tensor(rng.uniform(15.0, 25.0, (6,)), requires_grad=True)
    return _check(T.softplus, [x], rng)


def _clamp(rng):
    x = Tensor(_away_from(rng, (4, 4), point=0.3), requires_grad=True)
    return _check(lambda a: T.clamp_min(a, 0.3), [x], rng)


def _reductions(rng):
    x = _param(rng, 3, 4, 5)
    return max(
        _check(lambda a: T.tsum(a, axis=1), [x], rng),
        _check(lambda a: T.mean(a, axis=(0, 2)), [x], rng),
        _check(lambda a: T.tmax(a, axis=-1), [x], rng),
        _check(lambda a: T.tmax(a), [x], rng),
    )


def _shape_ops(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 2, 3, 4)
    return max(
        _check(lambda x: T.reshape(x, (6, 4)), [a], rng),
        _check(lambda x: T.transpose(x, (2, 0, 1)), [a], rng),
        _check(lambda x: x[:, 1:, ::-1], [a], rng),
        _check(lambda x: x[np.array([0, 1, 1]), :, np.array([3, 0, 3])], [a], rng),
        _check(lambda x, y: T.concat([x, y], axis=1), [a, b], rng),
        _check(lambda x, y: T.stack([x, y], axis=-1), [a, b], rng),
        _check(lambda x: T.pad(x, ((0, 0), (1, 2), (0, 3))), [a], rng),
    )


def _layer_norm(rng):
    return _check(T.layer_norm, [_param(rng, 2, 8), _param(rng, 8), _param(rng, 8)], rng)


def _dwconv(rng):
    def conv_cl(x, k):
        return T.depthwise_conv2d(x, k, channels_last=True)
    return max(
        _check(T.depthwise_conv2d, [_param(rng, 2, 5, 5), _param(rng, 2, 3, 3)], rng),
        _check(conv_cl, [_param(rng, 2, 4, 6, 3), _param(rng, 3, 3, 3)], rng),
    )


def _softmax(rng):
    x = _param(rng, 3, 5)
    return max(_check(lambda a: T.log_softmax(a, axis=-1), [x], rng),
               _check(lambda a: T.softmax(a, axis=0), [x], rng))


def _scan(rng):
    L, D, N = int(rng.integers(2, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    p = init_ssm_params(D, N, rng)
    for t in p.tensors().values():
        t.data += 0.1 * rng.standard_normal(t.shape)
    x = _param(rng, 2, L, D)
    params = [x] + list(p.tensors().values())
    return _check(lambda *_: selective_scan(x, p), params, rng)


def _scan_paths(rng):
    H, W, D = int(rng.integers(1, 5)), int(rng.integers(1, 5)), 2
    f = _param(rng, H, W, D)

    def round_trip(x):
        parts = [unflatten_direction(flatten_direction(x, d) * float(i + 1), d, H, W)
                 for i, d in enumerate(ScanDirection)]
        return cross_merge(parts)

    return _check(round_trip, [f], rng)


def _cc(centers: int):
    def check(rng):
        H, W, d = int(rng.integers(5, 12)), int(rng.integers(5, 12)), 3
        cfg = CCLayerConfig(centers=centers, window_size=8, knn_k=4, sim_dim=4)
        branch = CCBranch(d, cfg, rng)
        branch.alpha.data[:] = rng.uniform(0.5, 1.5)
        branch.beta.data[:] = rng.uniform(-0.5, 0.5)
        f = _param(rng, H, W, d)
        params = [f] + branch.parameters()
        return _check(lambda *_: branch(f), params, rng)
    return check


def _losses(rng):
    C, H, W = 3, 4, 5
    logits = _param(rng, 2, C, H, W)
    labels = rng.integers(0, C, (2, H, W))
    prob = Tensor(rng.uniform(0.05, 0.95, (H, W)), requires_grad=True)
    gt = rng.integers(0, 2, (H, W))
    hv_pred = _param(rng, 2, 2, H, W)
    hv_gt = rng.uniform(-1, 1, (2, 2, H, W))

    def scalar(fn, params):
        return T.finite_diff_check(lambda: fn(*params), params, eps=EPS, floor=OP_FLOOR)

    return max(
        scalar(lambda z: ce_loss(z, labels), [logits]),
        scalar(lambda p: dice_loss(p, gt), [prob]),
        scalar(lambda z, h: combined_loss(z, labels, h, hv_gt), [logits, hv_pred]),
    )


def _block_parts(rng):
    cfg = NetworkConfig(base_channels=4, state_size=4)
    specs = parse_layer("h, vflip, cc4, cc25")
    blk = CCViMBlock(4, specs, cfg, rng)
    merge, expand = PatchMerge(4, rng), PatchExpand(8, rng)
    f, g = _param(rng, 1, 6, 6, 4), _param(rng, 1, 3, 3, 8)
    return max(
        _check(lambda *_: blk(f), [f] + blk.parameters(), rng, floor=NET_FLOOR),
        _check(lambda *_: merge(f), [f] + merge.parameters(), rng, floor=NET_FLOOR),
        _check(lambda *_: expand(g), [g] + expand.parameters(), rng, floor=NET_FLOOR),
    )


def _network(rng):
    cfg = NetworkConfig(base_channels=4, state_size=4, instance_head=True, seed=int(rng.integers(2 ** 31)))
    net = CCViMNet(cfg)
    image = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)), requires_grad=True)
    labels = rng.integers(0, 2, (1, 32, 32))
    hv_gt = rng.uniform(-1, 1, (1, 2, 32, 32))
    params = [image] + net.parameters()

    def f():
        logits, hv = net(image)
        return combined_loss(logits, labels, hv, hv_gt)

    return T.finite_diff_check(f, params, eps=EPS, max_coords=NET_COORDS, rng=rng, floor=NET_FLOOR)


CHECKS: dict[str, dict[str, Callable[[np.random.Generator], float]]] = {
    "tensor": {
        "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul), "div": _div,
        "neg": _unary(T.neg), "exp": _unary(T.exp), "log": _unary(T.log, positive=True),
        "sqrt": _unary(T.sqrt, positive=True), "reciprocal": _unary(T.reciprocal, positive=True),
        "sigmoid": _unary(T.sigmoid), "softplus": _unary(T.softplus), "softplus_large": _softplus_large,
        "silu": _unary(T.silu), "clamp_min": _clamp, "matmul": _matmul, "reductions": _reductions,
        "shape_ops": _shape_ops, "layer_norm": _layer_norm, "depthwise_conv2d": _dwconv,
        "softmax": _softmax,
    },
    "ssm": {"selective_scan": _scan},
    "scan_paths": {"flatten_merge": _scan_paths},
    "cluster": {"cc_layer_t4": _cc(4), "cc_layer_t25": _cc(25)},
    "losses": {"losses": _losses},
    "net": {"block_parts": _block_parts, "network": _network},
}


def run_checks(module: str | None = None, seed: int = 0, seeds: int = 1) -> dict[str, float]:
    """Worst relative error per ``module.check`` over ``seeds`` consecutive seeds."""
    if module is not None and module not in CHECKS:
        raise ConfigError(f"unknown gradcheck module '{module}'; choose from {sorted(CHECKS)}")
    groups = {module: CHECKS[module]} if module else CHECKS
    out: dict[str, float] = {}
    for group, checks in groups.items():
        for name, check in checks.items():
            out[f"{group}.{name}"] = max(check(np.random.default_rng([seed + s, len(name)])) for s in range(seeds))
    return out
