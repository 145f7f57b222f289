"""Reusable experiment runs shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import json
import time
from pathlib import Path

from .config import Config, TrainConfig
from .data import synth_dataset
from .net import CCViMNet, NetworkConfig
from .train import evaluate, load_checkpoint, train


def lesion_learning_run(out_dir, epochs: int = 30, n_train: int = 200, n_test: int = 50,
                        size: int = 64, seed: int = 42) -> dict:
    """Train the default tiny network on lesion scenes and score a held-out split.

    Returns (and writes to ``summary.json``) the untrained and trained mean
    mIoU, the training time in minutes and the per-epoch losses.
    """
    out = Path(out_dir)
    train_set = synth_dataset(n_train, size, seed, "lesion")
    test_set = synth_dataset(n_test, size, seed, "lesion", start=n_train)
    cfg = Config(network=NetworkConfig(), train=TrainConfig(epochs=epochs, seed=seed))

    baseline = evaluate(CCViMNet(cfg.network), cfg, test_set).mean()["miou"]
    t0 = time.perf_counter()
    result = train(cfg, train_set, out)
    minutes = (time.perf_counter() - t0) / 60
    net, cfg = load_checkpoint(result.checkpoint)
    report = evaluate(net, cfg, test_set)
    report.to_csv(out / "test_report.csv")
    summary = {"baseline_miou": baseline, "trained_miou": report.mean()["miou"],
               "train_minutes": minutes, "losses": result.losses}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary
