"""Synthetic scenes, flip/rotation augmentation and on-disk datasets.

Two generators stand in for real data: ``nuclei`` scenes hold 5-15 small,
possibly touching ellipses, ``lesion`` scenes a single large irregular blob.
Scene ``i`` of a dataset is drawn from its own generator seeded with
``(seed, i)``, so datasets are reproducible and prefixes are stable.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .postproc import DistanceMaps, distance_targets

MODES = ("nuclei", "lesion")
TRANSFORMS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


@dataclass
class SynthScene:
    image: np.ndarray      # [3, H, W] in [0, 1]
    semantic: np.ndarray   # [H, W] uint8, 1 = foreground
    instances: np.ndarray  # [H, W] int64 instance ids
    hv: DistanceMaps


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Low-frequency texture: bilinear upsampling of a coarse random grid."""
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _compose(rng, size, fg_mask, bg_rgb, fg_rgb, grain: float) -> np.ndarray:
    img = np.empty((3, size, size))
    tex = _smooth_noise(rng, size, 4) - 0.5
    for c in range(3):
        base = np.where(fg_mask, fg_rgb[c], bg_rgb[c])
        img[c] = base + 0.12 * tex + grain * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0)


def _nuclei_scene(rng: np.random.Generator, size: int) -> SynthScene:
    inst = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    target = int(rng.integers(5, 16))
    centers: list[tuple[float, float, float]] = []
    label = 0
    attempts = 0
    while label < target and attempts < 500:
        attempts += 1
        ry, rx = rng.uniform(3, 8, size=2)
        if centers and rng.random() < 0.35:
            # place against an existing nucleus so some pairs touch
            cy0, cx0, r0 = centers[int(rng.integers(len(centers)))]
            ang = rng.uniform(0, 2 * np.pi)
            dist = 0.9 * (r0 + min(ry, rx))
            cy, cx = cy0 + dist * np.sin(ang), cx0 + dist * np.cos(ang)
        else:
            cy, cx = rng.uniform(4, size - 4, size=2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        region = ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0) & (inst == 0)
        if region.sum() < 9:
            continue
        label += 1
        inst[region] = label
        centers.append((cy, cx, max(ry, rx)))
    semantic = (inst > 0).astype(np.uint8)
    image = _compose(rng, size, semantic > 0, bg_rgb=(0.92, 0.78, 0.86), fg_rgb=(0.38, 0.22, 0.55), grain=0.05)
    return SynthScene(image, semantic, inst, distance_targets(inst))


def _lesion_scene(rng: np.random.Generator, size: int) -> SynthScene:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.uniform(-size / 8, size / 8, size=2)
    radius = size / 4 * rng.uniform(0.8, 1.2)
    ang = np.arctan2(yy - cy, xx - cx)
    wobble = np.zeros_like(ang)
    for k in range(2, 6):
        wobble += rng.uniform(0.0, 0.08) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
    semantic = (np.hypot(yy - cy, xx - cx) <= radius * (1.0 + wobble)).astype(np.uint8)
    tone = rng.uniform(-0.08, 0.08)
    image = _compose(rng, size, semantic > 0, bg_rgb=(0.86 + tone, 0.68 + tone, 0.58 + tone),
                     fg_rgb=(0.48 + tone, 0.30 + tone, 0.22 + tone), grain=0.06)
    inst = semantic.astype(np.int64)
    return SynthScene(image, semantic, inst, distance_targets(inst))


def touching_pair_scene(size: int = 32, radius: float = 6.0, seed: int = 0) -> SynthScene:
    """Two equal discs side by side whose boundaries touch (instances 1 and 2)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = size / 2, size / 2
    inst = np.zeros((size, size), dtype=np.int64)
    for label, ox in ((1, -radius), (2, radius - 1)):
        inst[((yy - cy) ** 2 + (xx - cx - ox) ** 2 <= radius ** 2) & (inst == 0)] = label
    semantic = (inst > 0).astype(np.uint8)
    image = _compose(rng, size, semantic > 0, bg_rgb=(0.92, 0.78, 0.86), fg_rgb=(0.38, 0.22, 0.55), grain=0.05)
    return SynthScene(image, semantic, inst, distance_targets(inst))


def synth_scene(seed: int, index: int, size: int, mode: str) -> SynthScene:
    rng = np.random.default_rng([seed, index])
    return _nuclei_scene(rng, size) if mode == "nuclei" else _lesion_scene(rng, size)


def synth_dataset(n: int, size: int, seed: int, mode: str, start: int = 0) -> list[SynthScene]:
    if size % 32 or size <= 0:
        raise ConfigError(f"scene size {size} must be a positive multiple of 32")
    if n < 1:
        raise ConfigError("need at least one scene")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{mode}'")
    return [synth_scene(seed, start + i, size, mode) for i in range(n)]


# ---------------------------------------------------------------------------
# augmentation


def _spatial(a: np.ndarray, name: str) -> np.ndarray:
    """Apply a named transform to the last two axes."""
    if name == "identity":
        return a.copy()
    if name == "hflip":
        return a[..., ::-1].copy()
    if name == "vflip":
        return a[..., ::-1, :].copy()
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[name]
    return np.rot90(a, k, axes=(-2, -1)).copy()


def transform_hv(hv: DistanceMaps, name: str) -> DistanceMaps:
    """Move and re-sign distance maps so they match the transformed instance map."""
    h, v = _spatial(hv.h, name), _spatial(hv.v, name)
    if name == "hflip":
        return DistanceMaps(-h, v)
    if name == "vflip":
        return DistanceMaps(h, -v)
    if name == "rot90":      # counter-clockwise: x' = y, y' = -x
        return DistanceMaps(v, -h)
    if name == "rot180":
        return DistanceMaps(-h, -v)
    if name == "rot270":     # clockwise: x' = -y, y' = x
        return DistanceMaps(-v, h)
    return DistanceMaps(h, v)


def apply_transform(scene: SynthScene, name: str) -> SynthScene:
    if name not in TRANSFORMS:
        raise ConfigError(f"unknown transform '{name}'")
    return SynthScene(_spatial(scene.image, name), _spatial(scene.semantic, name),
                      _spatial(scene.instances, name), transform_hv(scene.hv, name))


def augment(scene: SynthScene, seed) -> SynthScene:
    """Apply one of identity / flips / right-angle rotations chosen by ``seed``."""
    rng = np.random.default_rng(seed)
    return apply_transform(scene, TRANSFORMS[int(rng.integers(len(TRANSFORMS)))])


# ---------------------------------------------------------------------------
# on-disk layout: NNNN.ppm, NNNN_mask.pgm (class ids), NNNN_inst.pgm (16-bit ids)


def save_dataset(scenes: list[SynthScene], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        write_ppm(out / f"{i:04d}.ppm", sc.image)
        write_pgm(out / f"{i:04d}_mask.pgm", sc.semantic.astype(np.uint8), maxval=255)
        write_pgm(out / f"{i:04d}_inst.pgm", sc.instances.astype(np.uint16), maxval=65535)


def load_dataset(data_dir) -> list[SynthScene]:
    d = Path(data_dir)
    images = sorted(d.glob("*.ppm"))
    if not images:
        raise LoadError(f"no .ppm images in {d}")
    scenes = []
    for img_path in images:
        stem = img_path.stem
        mask_path = d / f"{stem}_mask.pgm"
        if not mask_path.is_file():
            raise LoadError(f"missing mask {mask_path}")
        image = read_ppm(img_path)
        semantic = read_pgm(mask_path).astype(np.uint8)
        inst_path = d / f"{stem}_inst.pgm"
        inst = read_pgm(inst_path).astype(np.int64) if inst_path.is_file() else semantic.astype(np.int64)
        if semantic.shape != image.shape[1:] or inst.shape != semantic.shape:
            raise LoadError(f"{stem}: image {image.shape} and masks {semantic.shape}/{inst.shape} disagree")
        scenes.append(SynthScene(image, semantic, inst, distance_targets(inst)))
    return scenes
