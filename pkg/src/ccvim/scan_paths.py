"""Cross-scan orderings: flatten a 2D feature map into a token sequence along
one of four directions, undo it, and merge branch outputs.

Feature maps are channels-last, ``[..., H, W, D]``; sequences are ``[..., H*W, D]``.
"""
from __future__ import annotations

import enum
from typing import Sequence

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


class ScanDirection(enum.Enum):
    H = "h"          # row-major, x fastest
    HFLIP = "hflip"  # reverse of H
    V = "v"          # column-major, y fastest
    VFLIP = "vflip"  # reverse of V

    @property
    def vertical(self) -> bool:
        return self in (ScanDirection.V, ScanDirection.VFLIP)

    @property
    def flipped(self) -> bool:
        return self in (ScanDirection.HFLIP, ScanDirection.VFLIP)


def _swap_hw(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(t, axes)


def _reverse_tokens(t: Tensor) -> Tensor:
    return t[(Ellipsis, slice(None, None, -1), slice(None))]


def flatten_direction(f: Tensor, direction: ScanDirection) -> Tensor:
    f = T.as_tensor(f)
    if f.ndim < 3:
        raise DimensionError(f"feature map must be [..., H, W, D], got {f.shape}")
    H, W, D = f.shape[-3:]
    lead = f.shape[:-3]
    if direction.vertical:
        f = _swap_hw(f)
    seq = f.reshape(lead + (H * W, D))
    return _reverse_tokens(seq) if direction.flipped else seq


def unflatten_direction(s: Tensor, direction: ScanDirection, H: int, W: int) -> Tensor:
    s = T.as_tensor(s)
    if s.ndim < 2 or s.shape[-2] != H * W:
        raise DimensionError(f"sequence {s.shape} cannot unflatten to {H}x{W}")
    lead, D = s.shape[:-2], s.shape[-1]
    if direction.flipped:
        s = _reverse_tokens(s)
    if direction.vertical:
        return _swap_hw(s.reshape(lead + (W, H, D)))
    return s.reshape(lead + (H, W, D))


def cross_merge(branches: Sequence[Tensor]) -> Tensor:
    """Sum branch feature maps left to right."""
    if not branches:
        raise DimensionError("cross_merge needs at least one branch")
    shapes = {tuple(b.shape) for b in branches}
    if len(shapes) != 1:
        raise DimensionError(f"cross_merge branches disagree in shape: {sorted(shapes)}")
    out = T.as_tensor(branches[0])
    for b in branches[1:]:
        out = out + b
    return out
