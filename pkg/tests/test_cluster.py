import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccvim import tensor as T
from ccvim.cluster import (CCBranch, CCLayerConfig, aggregate, aggregation_weights, anchor_positions,
                           assign_clusters, cc_layer, dispatch, knn_weights, partition_windows,
                           propose_centers, reassemble_windows, similarity_matrix)
from ccvim.errors import ConfigError
from ccvim.nn import Linear
from ccvim.tensor import Tensor

from oracles import cosine_loop, knn_bruteforce


def test_config_validation():
    for bad in (dict(centers=5), dict(centers=81, window_size=8), dict(knn_k=0)):
        with pytest.raises(ConfigError):
            CCLayerConfig(**bad)
    assert CCLayerConfig(centers=25).value_dim == 8


def test_partition_examples(rng):
    w, lay = partition_windows(Tensor(rng.standard_normal((16, 16, 3))), 8)
    assert w.shape == (4, 64, 3) and lay.pad_h == lay.pad_w == 0
    f = rng.standard_normal((9, 9, 2))
    w, lay = partition_windows(Tensor(f), 8)
    assert w.shape == (4, 64, 2) and (lay.pad_h, lay.pad_w) == (7, 7)
    assert lay.valid_mask().sum() == 81
    assert reassemble_windows(w, lay).data.tobytes() == f.tobytes()


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2 ** 31))
def test_partition_round_trip(H, W, seed):
    f = np.random.default_rng(seed).standard_normal((2, H, W, 3))
    w, lay = partition_windows(Tensor(f), 8)
    assert reassemble_windows(w, lay).data.tobytes() == f.tobytes()
    # every real point sits in exactly one window slot
    assert lay.valid_mask().sum() == H * W


def test_anchor_lattice():
    frac = (anchor_positions(4, 8) + 0.5) / 8
    np.testing.assert_allclose(frac, [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])


def test_knn_matches_bruteforce(rng):
    pos = [(y, x) for y in range(8) for x in range(8)]
    for t in (4, 25):
        K = knn_weights(np.array(pos), t, 8, 4)
        for c, anchor in enumerate(anchor_positions(t, 8)):
            assert np.flatnonzero(K[c]).tolist() == knn_bruteforce(pos, anchor, 4)
    # irregular (padded) window
    pos = [(y, x) for y in range(3) for x in range(5)]
    K = knn_weights(np.array(pos), 4, 8, 4)
    for c, anchor in enumerate(anchor_positions(4, 8)):
        assert np.flatnonzero(K[c]).tolist() == knn_bruteforce(pos, anchor, 4)


def test_propose_centers_cases(rng):
    cfg = CCLayerConfig()
    pos = np.array([(y, x) for y in range(8) for x in range(8)])
    same = np.tile(rng.standard_normal(3), (64, 1))
    np.testing.assert_allclose(propose_centers(Tensor(same), pos, cfg).data, np.tile(same[0], (4, 1)))
    one = rng.standard_normal((1, 3))
    np.testing.assert_allclose(propose_centers(Tensor(one), pos[:1], cfg).data, np.tile(one, (4, 1)))


def test_similarity_cases(rng):
    v = rng.standard_normal(4)
    assert similarity_matrix(Tensor(v[None]), Tensor(v[None])).item() == pytest.approx(1.0, abs=1e-15)
    assert similarity_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item() == 0.0
    c, p = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    assert np.max(np.abs(similarity_matrix(Tensor(c), Tensor(p)).data - cosine_loop(c, p))) < 1e-12
    zero = similarity_matrix(Tensor(np.zeros((1, 3))), Tensor(p[:, :3])).data
    assert np.all(zero == 0)


def test_similarity_gradient_finite_at_zero_points(rng):
    c = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    p = Tensor(np.vstack([np.zeros(3), rng.standard_normal(3)]), requires_grad=True)
    similarity_matrix(c, p).sum().backward()
    assert np.all(np.isfinite(c.grad)) and np.all(np.isfinite(p.grad))


def test_assignment(rng):
    assert assign_clusters(np.array([[0.1], [0.9]])).tolist() == [1]
    assert assign_clusters(np.array([[0.5], [0.5]])).tolist() == [0]
    S = rng.uniform(-1, 1, (4, 30))
    expected = [max(range(4), key=lambda c: (S[c, i], -c)) for i in range(30)]
    assert assign_clusters(S).tolist() == expected


def test_aggregate_cases():
    one, zero = Tensor([1.0]), Tensor([0.0])
    vc = Tensor([2.0, -1.0])
    np.testing.assert_array_equal(aggregate(Tensor(np.zeros((0, 2))), Tensor(np.zeros(0)), vc, one, zero).data,
                                  vc.data)
    g = aggregate(Tensor([[3.0]]), Tensor([0.0]), Tensor([1.0]), one, zero)
    assert g.item() == pytest.approx(5 / 3, abs=1e-15)


@given(st.integers(0, 2 ** 31), st.integers(0, 12))
def test_aggregate_is_convex(seed, m):
    r = np.random.default_rng(seed)
    P, s, vc = r.standard_normal((m, 3)), r.uniform(-1, 1, m), r.standard_normal(3)
    alpha, beta = r.uniform(-3, 3), r.uniform(-3, 3)
    w0, w = aggregation_weights(s, alpha, beta)
    assert abs(w0 + w.sum() - 1) < 1e-12 and w0 > 0 and np.all(w > 0)
    g = aggregate(Tensor(P), Tensor(s), Tensor(vc), Tensor([alpha]), Tensor([beta])).data
    pool = np.vstack([vc[None], P])
    assert np.all(g >= pool.min(0) - 1e-12) and np.all(g <= pool.max(0) + 1e-12)


def test_dispatch_cases(rng):
    P, s, g = rng.standard_normal((5, 4)), rng.uniform(-1, 1, 5), rng.standard_normal(3)
    fc = Linear(3, 4, rng)
    one, zero = Tensor([1.0]), Tensor([0.0])
    fc.zero_()
    assert dispatch(Tensor(P), Tensor(s), Tensor(g), fc, one, zero).data.tobytes() == P.tobytes()
    fc.bias.data[:] = [1.0, 2.0, 3.0, 4.0]
    np.testing.assert_allclose(dispatch(Tensor(P), Tensor(s), Tensor(np.zeros(3)), fc, one, zero).data,
                               P + fc.bias.data)
    fc = Linear(3, 4, rng)
    out = dispatch(Tensor(P), Tensor(s), Tensor(g), fc, one, zero).data
    for i in range(5):
        sig = 1 / (1 + np.exp(-s[i]))
        ref = [P[i, o] + fc.bias.data[o] + sum(fc.weight.data[j, o] * sig * g[j] for j in range(3))
               for o in range(4)]
        assert np.max(np.abs(out[i] - ref)) < 1e-12


def per_cluster_reference(f, cfg, br):
    """cc_layer rebuilt window by window from the single-cluster building blocks."""
    H, W, d = f.shape
    ws = cfg.window_size
    out = f.copy()
    ps_all = br.sim_proj(Tensor(f)).data
    pv_all = br.value_proj(Tensor(f)).data
    for y0 in range(0, H, ws):
        for x0 in range(0, W, ws):
            coords = [(y, x) for y in range(y0, min(y0 + ws, H)) for x in range(x0, min(x0 + ws, W))]
            local = np.array([(y - y0, x - x0) for y, x in coords])
            ps = np.array([ps_all[c] for c in coords])
            pv = np.array([pv_all[c] for c in coords])
            centers = propose_centers(Tensor(ps), local, cfg)
            v_centers = propose_centers(Tensor(pv), local, cfg).data
            S = similarity_matrix(centers, Tensor(ps)).data
            assign = assign_clusters(S)
            for c in range(cfg.centers):
                members = np.flatnonzero(assign == c)
                if len(members) == 0:
                    continue
                g = aggregate(Tensor(pv[members]), Tensor(S[c, members]), Tensor(v_centers[c]), br.alpha, br.beta)
                pts = np.array([f[coords[i]] for i in members])
                upd = dispatch(Tensor(pts), Tensor(S[c, members]), g, br.fc, br.alpha, br.beta).data
                for row, i in enumerate(members):
                    out[coords[i]] = upd[row]
    return out


@pytest.mark.parametrize("t,shape", [(4, (9, 11)), (25, (8, 8)), (4, (13, 5))])
def test_cc_layer_matches_per_cluster_reference(rng, t, shape):
    cfg = CCLayerConfig(centers=t, sim_dim=4)
    br = CCBranch(3, cfg, rng)
    br.alpha.data[:] = 1.3
    br.beta.data[:] = -0.2
    f = rng.standard_normal(shape + (3,))
    got = cc_layer(Tensor(f), cfg, br).data
    assert got.shape == f.shape
    assert np.max(np.abs(got - per_cluster_reference(f, cfg, br))) < 1e-12


def test_cc_layer_identity_when_dispatch_zero(rng):
    cfg = CCLayerConfig(centers=25)
    br = CCBranch(5, cfg, rng)
    br.fc.zero_()
    f = rng.standard_normal((2, 10, 12, 5))
    assert br(Tensor(f)).data.tobytes() == f.tobytes()


def test_cc_layer_gradient(rng):
    cfg = CCLayerConfig(centers=4, sim_dim=4)
    br = CCBranch(3, cfg, rng)
    f = Tensor(rng.standard_normal((9, 11, 3)), requires_grad=True)
    R = rng.standard_normal((9, 11, 3))
    assert T.finite_diff_check(lambda: (br(f) * R).sum(), [f] + br.parameters(), floor=1e-6) < 1e-4


def test_cc_layer_equivariant_to_window_translation(rng):
    # shifting a map by a whole window moves the output with it
    cfg = CCLayerConfig(centers=4, sim_dim=4)
    br = CCBranch(3, cfg, rng)
    f = rng.standard_normal((8, 16, 3))
    swapped = np.concatenate([f[:, 8:], f[:, :8]], axis=1)
    out = br(Tensor(f)).data
    out_s = br(Tensor(swapped)).data
    np.testing.assert_array_equal(np.concatenate([out[:, 8:], out[:, :8]], axis=1), out_s)
