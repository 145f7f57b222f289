"""Training, checkpointing, evaluation and inference loops."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config, parse_config
from .data import SynthScene, augment
from .errors import LoadError, NumericError
from .losses import combined_loss
from .metrics import MetricsReport, aji, binary_stats, ensemble_dice, hd95, pq_dq_sq
from .net import CCViMNet
from .optim import AdamW, cosine_lr
from .postproc import DistanceMaps, postprocess

log = logging.getLogger(__name__)

LESION_COLUMNS = ["miou", "dsc", "acc", "sen", "spe", "hd95"]
NUCLEI_COLUMNS = ["dice", "aji", "pq", "dq", "sq"]


# ---------------------------------------------------------------------------
# checkpoints: <dir>/config.txt, <dir>/manifest.json, <dir>/tensors/<name>.ccvt


def save_checkpoint(net: CCViMNet, cfg: Config, out_dir) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, p in net.named_parameters():
        T.save_tensor(out / "tensors" / f"{name}.ccvt", p)
        manifest[name] = list(p.shape)
    (out / "manifest.json").write_text(json.dumps({"tensors": manifest}, indent=1) + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    return out


def load_checkpoint(ckpt_dir) -> tuple[CCViMNet, Config]:
    d = Path(ckpt_dir)
    if not (d / "manifest.json").is_file() or not (d / "config.txt").is_file():
        raise LoadError(f"{d} is not a checkpoint (manifest.json/config.txt missing)")
    cfg = parse_config((d / "config.txt").read_text())
    net = CCViMNet(cfg.network)
    manifest = json.loads((d / "manifest.json").read_text())["tensors"]
    own = dict(net.named_parameters())
    for name, p in own.items():
        if name not in manifest:
            raise LoadError(f"checkpoint manifest lacks tensor '{name}'")
        t = T.load_tensor(d / "tensors" / f"{name}.ccvt")
        if list(t.shape) != list(manifest[name]) or t.shape != p.shape:
            raise LoadError(f"tensor '{name}' has shape {t.shape}, expected {p.shape}")
        p.data[...] = t.data
    extra = sorted(set(manifest) - set(own))
    if extra:
        raise LoadError(f"checkpoint has unknown tensors {extra[:5]}")
    return net, cfg


# ---------------------------------------------------------------------------
# training


def _batch(scenes: list[SynthScene], instance: bool):
    images = np.stack([s.image for s in scenes])
    labels = np.stack([s.semantic.astype(np.int64) for s in scenes])
    hv = np.stack([s.hv.stack() for s in scenes]) if instance else None
    return images, labels, hv


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float]


def train(cfg: Config, scenes: list[SynthScene], out_dir) -> TrainResult:
    """Seeded AdamW + cosine schedule over ``scenes``; writes ``loss_log.csv`` and a checkpoint.

    The checkpoint is rewritten after every finished epoch, so a non-finite
    loss aborts the run with the last good weights still on disk.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    net = CCViMNet(cfg.network)
    instance = cfg.network.instance_head
    params = list(net.named_parameters())
    opt = AdamW(tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    steps_per_epoch = math.ceil(len(scenes) / tc.batch_size)
    t_max = tc.t_max or tc.epochs * steps_per_epoch
    rng = np.random.default_rng(tc.seed)
    ckpt = out / "checkpoint"
    step = 0
    losses: list[float] = []
    log_path = out / "loss_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr"])
        for epoch in range(1, tc.epochs + 1):
            order = rng.permutation(len(scenes))
            total = 0.0
            lr = tc.lr
            for b in range(steps_per_epoch):
                idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
                batch = [scenes[i] for i in idx]
                if tc.augment:
                    batch = [augment(s, int(rng.integers(2 ** 63))) for s in batch]
                images, labels, hv = _batch(batch, instance)
                net.zero_grad()
                logits, hv_pred = net(T.Tensor(images))
                loss = combined_loss(logits, labels, hv_pred, hv) if instance else combined_loss(logits, labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {step}; "
                                       f"last good checkpoint kept at {ckpt}")
                loss.backward()
                lr = cosine_lr(step, tc.lr, t_max)
                opt.step(params, lr)
                step += 1
                total += value * len(idx)
            mean_loss = total / len(scenes)
            losses.append(mean_loss)
            writer.writerow([epoch, repr(mean_loss), repr(lr)])
            fh.flush()
            save_checkpoint(net, cfg, ckpt)
            log.info("epoch %d loss %.5f lr %.2e", epoch, mean_loss, lr)
    return TrainResult(ckpt, losses)


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(net: CCViMNet, images: np.ndarray, batch_size: int = 8):
    """Foreground probabilities / class maps (and HV maps) for ``[B, 3, H, W]`` images."""
    probs, hvs = [], []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits, hv = net(T.Tensor(images[i:i + batch_size]))
            probs.append(T.softmax(logits, axis=1).data)
            if hv is not None:
                hvs.append(hv.data)
    return np.concatenate(probs), (np.concatenate(hvs) if hvs else None)


def score_lesion(pred: np.ndarray, gt: np.ndarray) -> tuple[dict[str, float], str]:
    row = binary_stats(pred, gt)
    row["hd95"], empty = hd95(pred, gt, return_flag=True)
    return row, ("hd95_empty;" if empty else "") + "miou_foreground_only"


def score_nuclei(pred_inst: np.ndarray, gt_inst: np.ndarray) -> tuple[dict[str, float], str]:
    pq, dq, sq = pq_dq_sq(pred_inst, gt_inst)
    return {"dice": ensemble_dice(pred_inst, gt_inst), "aji": aji(pred_inst, gt_inst),
            "pq": pq, "dq": dq, "sq": sq}, ""


def evaluate(net: CCViMNet, cfg: Config, scenes: list[SynthScene]) -> MetricsReport:
    """Per-image metrics; instance-head networks are post-processed into instance maps first."""
    images = np.stack([s.image for s in scenes])
    probs, hv = predict(net, images, cfg.train.batch_size)
    instance = cfg.network.instance_head
    report = MetricsReport(NUCLEI_COLUMNS if instance else LESION_COLUMNS)
    for i, sc in enumerate(scenes):
        if instance:
            inst = postprocess(1.0 - probs[i, 0], DistanceMaps(hv[i, 0], hv[i, 1]), cfg.watershed)
            row, flags = score_nuclei(inst, sc.instances)
        else:
            row, flags = score_lesion(probs[i].argmax(axis=0) > 0, sc.semantic)
        report.add(row, flags)
    return report


def _tile_starts(n: int, tile: int, step: int) -> list[int]:
    starts = list(range(0, max(n - tile, 0) + 1, step))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def infer_image(net: CCViMNet, cfg: Config, image: np.ndarray, tile: int | None = None,
                overlap: int = 0) -> np.ndarray:
    """Class map (or instance map for instance-head networks) for one ``[3, H, W]`` image.

    With ``tile`` the image is processed in ``tile x tile`` windows overlapping
    by ``overlap`` pixels; overlapping outputs are averaged.
    """
    _, H, W = image.shape
    if tile is None:
        probs, hv = predict(net, image[None])
        probs, hv = probs[0], (hv[0] if hv is not None else None)
    else:
        step = max(tile - overlap, 1)
        acc = np.zeros((cfg.network.num_classes, H, W))
        acc_hv = np.zeros((2, H, W))
        count = np.zeros((H, W))
        for y in _tile_starts(H, tile, step):
            for x in _tile_starts(W, tile, step):
                p, h = predict(net, image[None, :, y:y + tile, x:x + tile])
                acc[:, y:y + tile, x:x + tile] += p[0]
                if h is not None:
                    acc_hv[:, y:y + tile, x:x + tile] += h[0]
                count[y:y + tile, x:x + tile] += 1
        probs = acc / count
        hv = acc_hv / count if cfg.network.instance_head else None
    if cfg.network.instance_head:
        return postprocess(1.0 - probs[0], DistanceMaps(hv[0], hv[1]), cfg.watershed)
    return probs.argmax(axis=0)
