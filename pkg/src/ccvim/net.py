"""U-shaped segmentation network built from CCViM blocks.

All internal feature maps are channels-last ``[B, H, W, C]``. Images enter as
``[B, 3, H, W]`` (or ``[3, H, W]``) and logits leave as ``[B, classes, H, W]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cluster import CCBranch, CCLayerConfig
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module
from .plan import BRANCHES_PER_LAYER, BranchPlan, BranchSpec, default_plan
from .scan_paths import ScanDirection, cross_merge, flatten_direction, unflatten_direction
from .ssm import SSMParams, init_ssm_params, selective_scan
from .tensor import Tensor

NUM_STAGES = 4


@dataclass
class NetworkConfig:
    base_channels: int = 8
    encoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    decoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    state_size: int = 8
    num_classes: int = 2
    in_channels: int = 3
    instance_head: bool = False
    expand: int = 2           # inner width of a block relative to its stage width
    window_size: int = 8
    knn_k: int = 4
    dw_kernel: int = 3
    seed: int = 0             # weight initialization
    branch_plan: BranchPlan = field(default_factory=default_plan)

    def __post_init__(self):
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)
        self.decoder_depths = tuple(int(d) for d in self.decoder_depths)
        if len(self.encoder_depths) != NUM_STAGES or len(self.decoder_depths) != NUM_STAGES:
            raise ConfigError(f"depths need {NUM_STAGES} stages each")
        if min(self.encoder_depths + self.decoder_depths) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.base_channels < 1 or self.state_size < 1 or self.num_classes < 1 or self.expand < 1:
            raise ConfigError("base_channels, state_size, num_classes and expand must be positive")
        if self.dw_kernel % 2 == 0:
            raise ConfigError("dw_kernel must be odd")

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** s for s in range(NUM_STAGES)]

    @property
    def decoder_channels(self) -> list[int]:
        return self.encoder_channels[::-1]


class ScanBranch(Module):
    def __init__(self, dim: int, state_size: int, direction: ScanDirection, rng: np.random.Generator):
        self.direction = direction
        p = init_ssm_params(dim, state_size, rng)
        self.A_log, self.D_skip, self.W_B = p.A_log, p.D_skip, p.W_B
        self.W_C, self.W_dt, self.dt_bias = p.W_C, p.W_dt, p.dt_bias

    @property
    def ssm(self) -> SSMParams:
        return SSMParams(self.A_log, self.D_skip, self.W_B, self.W_C, self.W_dt, self.dt_bias)

    def __call__(self, f: Tensor) -> Tensor:
        H, W = f.shape[-3:-1]
        seq = flatten_direction(f, self.direction)
        return unflatten_direction(selective_scan(seq, self.ssm), self.direction, H, W)


class CCS6Layer(Module):
    """Four branches (scans and/or clustering) whose outputs are summed."""

    def __init__(self, dim: int, specs, cfg: NetworkConfig, rng: np.random.Generator):
        specs = tuple(specs)
        if len(specs) != BRANCHES_PER_LAYER:
            raise ConfigError(f"CCS6 layer needs exactly {BRANCHES_PER_LAYER} branches, got {len(specs)}")
        self.specs = specs
        self.branches = [self._build(dim, s, cfg, rng) for s in specs]

    @staticmethod
    def _build(dim: int, spec: BranchSpec, cfg: NetworkConfig, rng):
        if spec.kind == "scan":
            return ScanBranch(dim, cfg.state_size, spec.direction, rng)
        cc = CCLayerConfig(centers=spec.centers, window_size=cfg.window_size, knn_k=cfg.knn_k, sim_dim=dim)
        return CCBranch(dim, cc, rng)

    def __call__(self, f: Tensor) -> Tensor:
        return cross_merge([b(f) for b in self.branches])


class CCViMBlock(Module):
    """norm -> (gate: linear+silu) x (linear, dwconv, silu, CCS6, norm) -> linear, plus residual."""

    def __init__(self, dim: int, specs, cfg: NetworkConfig, rng: np.random.Generator):
        inner = cfg.expand * dim
        k = cfg.dw_kernel
        self.norm = LayerNorm(dim)
        self.gate_proj = Linear(dim, inner, rng)
        self.in_proj = Linear(dim, inner, rng)
        self.dw_kernel = Tensor(rng.uniform(-1.0 / k, 1.0 / k, (inner, k, k)), requires_grad=True)
        self.dw_bias = Tensor(np.zeros(inner), requires_grad=True)
        self.ccs6 = CCS6Layer(inner, specs, cfg, rng)
        self.out_norm = LayerNorm(inner)
        self.out_proj = Linear(inner, dim, rng)

    def __call__(self, f: Tensor) -> Tensor:
        u = self.norm(f)
        gate = T.silu(self.gate_proj(u))
        z = T.depthwise_conv2d(self.in_proj(u), self.dw_kernel, channels_last=True) + self.dw_bias
        y = self.ccs6(T.silu(z))
        return self.out_proj(self.out_norm(y) * gate) + f


def _pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``[B, H, W, r*r*c]`` -> ``[B, r*H, r*W, c]``."""
    B, H, W, D = x.shape
    c = D // (r * r)
    x = x.reshape((B, H, W, r, r, c)).transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((B, H * r, W * r, c))


class PatchEmbed(Module):
    def __init__(self, in_ch: int, dim: int, rng: np.random.Generator, patch: int = 4):
        self.patch = patch
        self.proj = Linear(in_ch * patch * patch, dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, img: Tensor) -> Tensor:
        B, C, H, W = img.shape
        p = self.patch
        if H % p or W % p:
            raise ConfigError(f"image {H}x{W} is not divisible by the {p}x{p} patch size")
        x = img.reshape((B, C, H // p, p, W // p, p)).transpose((0, 2, 4, 3, 5, 1))
        return self.norm(self.proj(x.reshape((B, H // p, W // p, p * p * C))))


class PatchMerge(Module):
    """2x2 neighborhood concat (4D), layer norm, linear 4D -> 2D."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, f: Tensor) -> Tensor:
        B, H, W, D = f.shape
        if H % 2 or W % 2:
            raise ConfigError(f"patch merging needs even spatial dims, got {H}x{W}")
        x = f.reshape((B, H // 2, 2, W // 2, 2, D)).transpose((0, 1, 3, 2, 4, 5))
        return self.reduce(self.norm(x.reshape((B, H // 2, W // 2, 4 * D))))


class PatchExpand(Module):
    """Linear D -> 2D, pixel shuffle to D/2 x 2H x 2W, layer norm."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ConfigError(f"patch expanding needs an even channel count, got {dim}")
        self.expand = Linear(dim, 2 * dim, rng, bias=False)
        self.norm = LayerNorm(dim // 2)

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[-1] % 2:
            raise ConfigError(f"patch expanding needs an even channel count, got {f.shape[-1]}")
        return self.norm(_pixel_shuffle(self.expand(f), 2))


class FinalExpand(Module):
    """Single-step 4x upsampling: linear C -> 16C, pixel shuffle, layer norm."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.expand = Linear(dim, 16 * dim, rng, bias=False)
        self.norm = LayerNorm(dim)

    def __call__(self, f: Tensor) -> Tensor:
        return self.norm(_pixel_shuffle(self.expand(f), 4))


class CCViMNet(Module):
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc, dec = cfg.encoder_channels, cfg.decoder_channels
        plan = cfg.branch_plan
        self.embed = PatchEmbed(cfg.in_channels, enc[0], rng)
        self.encoder = [
            [CCViMBlock(enc[s], plan.get("stage", s + 1, i + 1), cfg, rng) for i in range(cfg.encoder_depths[s])]
            for s in range(NUM_STAGES)
        ]
        self.merges = [PatchMerge(enc[s], rng) for s in range(NUM_STAGES - 1)]
        self.expands = [PatchExpand(dec[s - 1], rng) for s in range(1, NUM_STAGES)]
        self.decoder = [
            [CCViMBlock(dec[s], plan.get("dec", s + 1, i + 1), cfg, rng) for i in range(cfg.decoder_depths[s])]
            for s in range(NUM_STAGES)
        ]
        self.final = FinalExpand(dec[-1], rng)
        self.seg_head = Linear(dec[-1], cfg.num_classes, rng)
        self.hv_head = Linear(dec[-1], 2, rng) if cfg.instance_head else None

    def named_parameters(self, prefix: str = ""):
        # nested stage lists are flattened as encoder.<stage>.<block>
        yield from self.embed.named_parameters(prefix + "embed.")
        for s, blocks in enumerate(self.encoder):
            for i, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}encoder.{s}.{i}.")
        for s, m in enumerate(self.merges):
            yield from m.named_parameters(f"{prefix}merges.{s}.")
        for s, m in enumerate(self.expands):
            yield from m.named_parameters(f"{prefix}expands.{s}.")
        for s, blocks in enumerate(self.decoder):
            for i, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}decoder.{s}.{i}.")
        yield from self.final.named_parameters(prefix + "final.")
        yield from self.seg_head.named_parameters(prefix + "seg_head.")
        if self.hv_head is not None:
            yield from self.hv_head.named_parameters(prefix + "hv_head.")

    def stage_shapes(self, x: Tensor) -> list[tuple[int, ...]]:
        """Feature shapes after every encoder and decoder stage (for shape audits)."""
        return self._run(x, record=True)[2]

    def __call__(self, image) -> tuple[Tensor, Tensor | None]:
        logits, hv, _ = self._run(image)
        return logits, hv

    def _run(self, image, record: bool = False):
        img = T.as_tensor(image)
        single = img.ndim == 3
        if single:
            img = img.reshape((1,) + img.shape)
        if img.ndim != 4 or img.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected image [B, {self.cfg.in_channels}, H, W], got {img.shape}")
        H, W = img.shape[-2:]
        if H % 32 or W % 32:
            raise ConfigError(f"image size {H}x{W} must be divisible by 32")
        shapes = []
        x = self.embed(img)
        skips = []
        for s in range(NUM_STAGES):
            for blk in self.encoder[s]:
                x = blk(x)
            skips.append(x)
            shapes.append(x.shape)
            if s < NUM_STAGES - 1:
                x = self.merges[s](x)
        for s in range(NUM_STAGES):
            if s > 0:
                x = self.expands[s - 1](x) + skips[NUM_STAGES - 1 - s]
            for blk in self.decoder[s]:
                x = blk(x)
            shapes.append(x.shape)
        x = self.final(x)
        logits = self.seg_head(x).transpose((0, 3, 1, 2))
        hv = self.hv_head(x).transpose((0, 3, 1, 2)) if self.hv_head is not None else None
        if single:
            logits = logits.reshape(logits.shape[1:])
            hv = hv.reshape(hv.shape[1:]) if hv is not None else None
        return logits, hv, shapes


def forward(image, cfg: NetworkConfig, weights: CCViMNet | None = None):
    """Functional entry point: build (or reuse) the network and run it."""
    net = weights if weights is not None else CCViMNet(cfg)
    return net(image)
