import json

import numpy as np
import pytest

from ccvim.cli import main
from ccvim.config import Config, TrainConfig
from ccvim.data import save_dataset, synth_dataset
from ccvim.errors import LoadError
from ccvim.imageio import read_pgm, write_ppm
from ccvim.metrics import MetricsReport
from ccvim.net import CCViMNet, NetworkConfig
from ccvim.train import (LESION_COLUMNS, evaluate, infer_image, load_checkpoint, save_checkpoint, score_lesion,
                         score_nuclei, train)


def small_cfg(instance=False, epochs=1, **train_kw):
    net = NetworkConfig(base_channels=4, state_size=4, encoder_depths=(1, 1, 1, 1),
                        decoder_depths=(1, 1, 1, 1), instance_head=instance)
    return Config(network=net, train=TrainConfig(epochs=epochs, batch_size=2, **train_kw))


@pytest.fixture(scope="module")
def lesion4():
    return synth_dataset(4, 32, 0, "lesion")


def test_one_epoch_checkpoint(tmp_path, lesion4):
    cfg = small_cfg()
    result = train(cfg, lesion4, tmp_path)
    assert len(result.losses) == 1 and np.isfinite(result.losses[0])
    net, cfg2 = load_checkpoint(result.checkpoint)
    assert cfg2.to_text() == cfg.to_text()
    log_lines = (tmp_path / "loss_log.csv").read_text().splitlines()
    assert log_lines[0] == "epoch,loss,lr" and len(log_lines) == 2


def test_training_is_deterministic(tmp_path, lesion4):
    a = train(small_cfg(), lesion4, tmp_path / "a")
    b = train(small_cfg(), lesion4, tmp_path / "b")
    assert (tmp_path / "a/loss_log.csv").read_bytes() == (tmp_path / "b/loss_log.csv").read_bytes()
    for f in sorted((a.checkpoint / "tensors").iterdir()):
        assert f.read_bytes() == (b.checkpoint / "tensors" / f.name).read_bytes()


def test_instance_training_and_eval(tmp_path):
    scenes = synth_dataset(2, 32, 1, "nuclei")
    cfg = small_cfg(instance=True)
    res = train(cfg, scenes, tmp_path)
    net, cfg = load_checkpoint(res.checkpoint)
    report = evaluate(net, cfg, scenes)
    assert report.columns == ["dice", "aji", "pq", "dq", "sq"] and len(report.rows) == 2
    inst = infer_image(net, cfg, scenes[0].image)
    assert inst.shape == (32, 32) and inst.min() >= 0


def test_perfect_prediction_scores():
    s = synth_dataset(1, 32, 2, "lesion")[0]
    row, flags = score_lesion(s.semantic > 0, s.semantic)
    assert row["hd95"] == 0.0 and "hd95_empty" not in flags
    assert all(row[k] == 1.0 for k in ("miou", "dsc", "acc", "sen", "spe"))
    n = synth_dataset(1, 32, 2, "nuclei")[0]
    row, _ = score_nuclei(n.instances, n.instances)
    assert all(v == 1.0 for v in row.values())


def test_report_csv(tmp_path):
    rep = MetricsReport(LESION_COLUMNS)
    rep.add(dict.fromkeys(LESION_COLUMNS, 1.0))
    rep.add(dict.fromkeys(LESION_COLUMNS, 0.0), "hd95_empty;")
    rep.to_csv(tmp_path / "r.csv")
    header, rows = MetricsReport.read_csv(tmp_path / "r.csv")
    assert header == ["image"] + LESION_COLUMNS + ["flags"]
    assert [r[0] for r in rows] == ["0", "1", "mean"]
    assert float(rows[-1][1]) == 0.5 and rows[1][-1] == "hd95_empty;"
    with pytest.raises(ValueError):
        rep.add(dict.fromkeys(LESION_COLUMNS, float("nan")))


def test_checkpoint_mismatch(tmp_path):
    cfg = small_cfg()
    ckpt = save_checkpoint(CCViMNet(cfg.network), cfg, tmp_path / "c")
    manifest = json.loads((ckpt / "manifest.json").read_text())
    name = sorted(manifest["tensors"])[0]
    manifest["tensors"][name] = [1, 2, 3]
    (ckpt / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(LoadError, match=name.replace(".", r"\.")):
        load_checkpoint(ckpt)
    del manifest["tensors"][name]
    (ckpt / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(LoadError, match="lacks"):
        load_checkpoint(ckpt)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "nothing")


def test_cli_round_trip(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--n", "2", "--size", "32", "--mode", "lesion", "--out", str(data)]) == 0
    (tmp_path / "run.cfg").write_text(small_cfg().to_text())
    assert main(["train", "--config", str(tmp_path / "run.cfg"), "--data", str(data),
                 "--out", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path / "r.csv")]) == 0
    _, rows = MetricsReport.read_csv(tmp_path / "r.csv")
    assert len(rows) == 3
    img = np.random.default_rng(0).uniform(0, 1, (3, 64, 96))
    write_ppm(tmp_path / "x.ppm", img)
    assert main(["infer", "--checkpoint", ckpt, "--image", str(tmp_path / "x.ppm"),
                 "--out", str(tmp_path / "x.pgm"), "--tile", "32", "--overlap", "8"]) == 0
    assert read_pgm(tmp_path / "x.pgm").shape == (64, 96)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["synth", "--n", "1", "--size", "40", "--out", str(tmp_path / "d")]) == 1
    (tmp_path / "bad.cfg").write_text("[train]\nnope = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path), "--data", str(tmp_path), "--out", "x.csv"]) == 1
    assert main(["gradcheck", "--module", "bogus"]) == 1
    assert main(["gradcheck", "--module", "losses"]) == 0
    assert "PASS losses.losses" in capsys.readouterr().out


def test_cli_numeric_failure(tmp_path, monkeypatch, capsys):
    import ccvim.cli as cli
    monkeypatch.setattr(cli, "run_checks", lambda *a, **k: {"fake.op": 1.0})
    assert main(["gradcheck"]) == 2
    data = tmp_path / "data"
    save_dataset(synth_dataset(2, 32, 0, "lesion"), data)
    (tmp_path / "run.cfg").write_text(small_cfg().to_text())
    import ccvim.train as tr
    monkeypatch.setattr(tr, "combined_loss", lambda logits, *a: logits.sum() * float("nan"))
    assert main(["train", "--config", str(tmp_path / "run.cfg"), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2
    assert "non-finite loss at epoch 1" in capsys.readouterr().err
