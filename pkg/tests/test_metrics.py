import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ccvim.errors import DimensionError
from ccvim.metrics import MetricsReport, aji, binary_stats, ensemble_dice, hd95, pq_dq_sq

from oracles import aji_oracle, binary_stats_oracle, ensemble_dice_oracle, hd95_oracle, pq_oracle

inst_maps = hnp.arrays(np.int64, (8, 8), elements=st.integers(0, 4))
bin_maps = hnp.arrays(np.uint8, (8, 8), elements=st.integers(0, 1))


def test_binary_stats_cases():
    gt = np.zeros((4, 4), int)
    gt[:, :2] = 1
    assert all(v == 1.0 for v in binary_stats(gt, gt).values())
    s = binary_stats(1 - gt, gt)
    assert s["miou"] == 0 and s["acc"] == 0
    with pytest.raises(DimensionError):
        binary_stats(gt, gt[:3])


@given(bin_maps, bin_maps)
def test_binary_stats_oracle(p, g):
    assert binary_stats(p, g) == binary_stats_oracle(p, g)


def test_pq_cases():
    gt = np.zeros((6, 6), int)
    gt[0:2, 0:3] = 1
    gt[3:5, 3:6] = 2
    gt[5, 0] = 3
    assert pq_dq_sq(gt, gt) == (1.0, 1.0, 1.0)
    assert pq_dq_sq(np.zeros_like(gt), gt[:, :] * (gt < 3))[:2] == (0.0, 0.0)
    # one matched pair with IoU 2/3, one unmatched gt instance
    g = np.zeros((6, 6), int)
    g[0:2, 0:3] = 1
    g[4:6, 4:6] = 2
    p = np.zeros((6, 6), int)
    p[0:2, 0:2] = 5
    pq, dq, sq = pq_dq_sq(p, g)
    assert dq == pytest.approx(2 / 3, abs=1e-15)
    assert sq == pytest.approx(2 / 3, abs=1e-15)
    assert pq == pytest.approx(4 / 9, abs=1e-15)
    assert (pq, dq, sq) == pytest.approx(pq_oracle(p, g), abs=1e-15)


@given(inst_maps, inst_maps)
def test_pq_oracle_and_identity(p, g):
    pq, dq, sq = pq_dq_sq(p, g)
    assert (pq, dq, sq) == pytest.approx(pq_oracle(p, g), abs=1e-12)
    assert abs(pq - dq * sq) <= 1e-12
    assert 0 <= pq <= 1 and 0 <= dq <= 1 and 0 <= sq <= 1


def test_aji_cases():
    g = np.zeros((6, 6), int)
    g[1:3, 1:4] = 1
    g[4:6, 0:2] = 2
    assert aji(g, g) == 1.0
    assert aji(np.zeros_like(g), g) == 0.0
    assert aji(np.zeros_like(g), np.zeros_like(g)) == 1.0
    p = np.zeros_like(g)
    p[1:4, 1:3] = 7
    p[4:6, 0:3] = 3
    p[0, 5] = 9
    assert aji(p, g) == pytest.approx(aji_oracle(p, g), abs=1e-12)


@given(inst_maps, inst_maps)
def test_aji_oracle(p, g):
    assert aji(p, g) == pytest.approx(aji_oracle(p, g), abs=1e-12)


@given(inst_maps, inst_maps)
def test_ensemble_dice_oracle_and_symmetry(p, g):
    assert ensemble_dice(p, g) == pytest.approx(ensemble_dice_oracle(p, g), abs=1e-15)
    assert ensemble_dice(p, g) == ensemble_dice(g, p)


def test_ensemble_dice_cases():
    a = np.zeros((4, 4), int)
    a[:2] = 1
    assert ensemble_dice(a, a * 3) == 1.0
    assert ensemble_dice(a, a[::-1]) == 0.0


def test_hd95_cases():
    m = np.zeros((8, 8), bool)
    m[2:5, 3:6] = True
    assert hd95(m, m) == 0.0
    a, b = np.zeros((5, 5), bool), np.zeros((5, 5), bool)
    a[2, 2], b[2, 3] = True, True
    assert hd95(a, b) == 1.0
    val, flag = hd95(np.zeros((3, 4)), m[:3, :4], return_flag=True)
    assert flag and val == 5.0
    assert hd95(a, b, spacing=0.5) == 0.5


@given(bin_maps, bin_maps)
def test_hd95_oracle(p, g):
    if not p.any() or not g.any():
        assert hd95(p, g) == pytest.approx(math.hypot(8, 8))
        return
    assert abs(hd95(p, g) - hd95_oracle(p, g)) < 1e-9


def test_report_csv(tmp_path):
    rep = MetricsReport(["dice", "hd95"])
    rep.add({"dice": 0.5, "hd95": 2.0}, "x")
    rep.add({"dice": 1.0, "hd95": 0.0})
    rep.to_csv(tmp_path / "r.csv")
    header, rows = MetricsReport.read_csv(tmp_path / "r.csv")
    assert header == ["image", "dice", "hd95", "flags"]
    assert [r[0] for r in rows] == ["0", "1", "mean"]
    assert float(rows[-1][1]) == 0.75
    with pytest.raises(ValueError):
        rep.add({"dice": float("nan"), "hd95": 0.0})
