import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from xdistill import autograd as ag
from xdistill.autograd import Tensor
from xdistill.models import (OccupancyDecoder, PointEncoder, ProbeHead, ProjectionHead, decode_occupancy,
                             head_parameter_count, knn_indices)

from helpers import check_leaf_grads


def cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.c_[rng.uniform(-5, 5, (n, 2)), rng.uniform(0, 2, n), rng.uniform(0, 1, n)]


def test_encoder_output_shape_finite_and_varied():
    enc = PointEncoder(np.random.default_rng(0))
    out = enc(cloud(200)).data
    assert out.shape == (200, 32)
    assert np.all(np.isfinite(out)) and out.std() > 0


def test_encoder_needs_k_points():
    enc = PointEncoder(np.random.default_rng(0))
    with pytest.raises(ValueError):
        enc(cloud(5))


def test_encoder_permutation_equivariance_bitwise():
    enc = PointEncoder(np.random.default_rng(1))
    pts = cloud(150, 1)
    perm = np.random.default_rng(2).permutation(150)
    a = enc(pts).data
    b = enc(pts[perm]).data
    assert np.array_equal(a[perm], b)


def test_receptive_field_is_two_hop():
    enc = PointEncoder(np.random.default_rng(3))
    a_pts = cloud(120, 3)
    b_pts = a_pts.copy()
    moved = 7
    b_pts[moved] += [0.3, -0.2, 0.1, 0.2]
    a, b = enc(a_pts).data, enc(b_pts).data
    touched = set()
    for pts in (a_pts, b_pts):
        nb = knn_indices(pts[:, :3], 8)
        one = {i for i in range(len(nb)) if moved in nb[i]}
        touched |= one | {i for i in range(len(nb)) if one & set(nb[i])}
    untouched = [i for i in range(len(a_pts)) if i not in touched]
    assert 0 < len(touched) < 60
    np.testing.assert_array_equal(a[untouched], b[untouched])
    assert not np.array_equal(a[sorted(touched)], b[sorted(touched)])


def test_knn_matches_tree_and_respects_segments():
    pts = cloud(60)[:, :3]
    nb = knn_indices(pts, 8)
    assert np.all(nb[:, 0] == np.arange(60))
    _, ref = cKDTree(pts).query(pts, 8)
    assert np.array_equal(np.sort(nb, axis=1), np.sort(ref, axis=1))
    seg = knn_indices(pts, 8, [(0, 30), (30, 60)])
    assert np.all(seg[:30] < 30) and np.all(seg[30:] >= 30)


def test_mlp_parameter_count_matches_arithmetic():
    d_p, d_v = 32, 16
    head = ProjectionHead(np.random.default_rng(0), d_p, d_v, 3, 2048)
    expected = d_p * 2048 + 2048 + 2048 * 2048 + 2048 + 2048 * d_v + d_v
    assert head.num_parameters() == expected == head_parameter_count(d_p, d_v, 3, 2048)
    assert head.variant == "mlp"


def test_linear_head_is_single_affine():
    head = ProjectionHead(np.random.default_rng(0), 32, 16, 1)
    assert head.variant == "linear" and set(head.params) == {"l0.W", "l0.b"}
    sq = ProjectionHead(np.random.default_rng(0), 16, 16, 1)
    sq.params["l0.W"].data = np.eye(16)
    x = np.random.default_rng(1).standard_normal((7, 16))
    np.testing.assert_array_equal(sq(Tensor(x)).data, x)


def test_head_output_not_normalized_and_width_checked():
    head = ProjectionHead(np.random.default_rng(0), 32, 16, 3, 64)
    out = head(Tensor(np.random.default_rng(1).standard_normal((5, 32)) * 10)).data
    assert out.shape == (5, 16)
    assert not np.allclose(np.linalg.norm(out, axis=1), 1.0)
    with pytest.raises(ag.ShapeError):
        head(Tensor(np.ones((5, 31))))


def test_decoder_zero_weights_give_bias():
    dec = OccupancyDecoder(np.random.default_rng(0), 32)
    for k, p in dec.params.items():
        p.data = np.zeros_like(p.data)
    dec.params["l2.b"].data = np.array([0.3, -0.7])
    out = dec(Tensor(np.random.default_rng(1).standard_normal((9, 32))), np.ones((9, 3))).data
    np.testing.assert_array_equal(out, np.tile([0.3, -0.7], (9, 1)))


def test_decoder_duplicate_rows():
    rng = np.random.default_rng(2)
    dec = OccupancyDecoder(rng, 32)
    feats = Tensor(rng.standard_normal((4, 32)))
    coords = rng.standard_normal((6, 3))
    coords[5] = coords[1]
    out = decode_occupancy(dec, feats, np.array([0, 1, 2, 3, 0, 1]), coords).data
    assert out.shape == (6, 2)
    np.testing.assert_allclose(out[1], out[5], rtol=1e-14, atol=0)  # BLAS may round rows differently


def test_decoder_index_out_of_bounds():
    dec = OccupancyDecoder(np.random.default_rng(0), 32)
    with pytest.raises(IndexError):
        decode_occupancy(dec, Tensor(np.ones((3, 32))), np.array([3]), np.zeros((1, 3)))


def _block_case(rng, which):
    """Return (build, leaves) that route a scalar through one model block with perturbable parameters."""
    if which == "encoder":
        m = PointEncoder(rng, 4, 6, 5, 3)
        pts = cloud(12, int(rng.integers(1 << 30)))
        nb = knn_indices(pts[:, :3], 3)
        key = "b1.l1.W"
        w = rng.standard_normal((12, 5))

        def run(t):
            m.params[key] = t["W"]
            m.params["b2.fuse.b"] = t["b"]
            return ag.sum(ag.mul(m(pts, nb), Tensor(w)))
        # shift biases so no ReLU sits at its kink
        m.params["b1.l1.b"].data = rng.uniform(0.1, 0.3, 6)
        return run, {"W": m.params[key].data.copy(), "b": rng.uniform(0.05, 0.2, 5)}
    if which == "head":
        m = ProjectionHead(rng, 5, 4, 3, 7)
        x = rng.standard_normal((6, 5))
        w = rng.standard_normal((6, 4))

        def run(t):
            m.params["l1.W"] = t["W"]
            return ag.sum(ag.mul(m(t["x"]), Tensor(w)))
        return run, {"W": m.params["l1.W"].data.copy(), "x": x}
    if which == "decoder":
        m = OccupancyDecoder(rng, 5, (6, 4))
        feats = rng.standard_normal((4, 5))
        idx = np.array([0, 1, 1, 3, 2])
        coords = rng.standard_normal((5, 3))
        w = rng.standard_normal((5, 2))

        def run(t):
            m.params["l0.W"] = t["W"]
            return ag.sum(ag.mul(decode_occupancy(m, t["f"], idx, coords), Tensor(w)))
        return run, {"W": m.params["l0.W"].data.copy(), "f": feats}
    m = ProbeHead(rng, 5, 3)
    x = rng.standard_normal((8, 5))
    y = rng.integers(0, 3, 8)

    def run(t):
        m.params["fc.W"] = t["W"]
        return ag.cross_entropy(m(t["x"]), y)
    return run, {"W": m.params["fc.W"].data.copy(), "x": x}


@pytest.mark.parametrize("block", ["encoder", "head", "decoder", "probe"])
def test_block_gradients_match_finite_differences(block):
    worst = 0.0
    for seed in range(20):
        build, leaves = _block_case(np.random.default_rng(seed), block)
        worst = max(worst, check_leaf_grads(build, leaves))
    assert worst < 1e-4


def test_state_roundtrip_and_shape_guard():
    a = PointEncoder(np.random.default_rng(0))
    b = PointEncoder(np.random.default_rng(1))
    b.load_state(a.state())
    pts = cloud(40)
    assert np.array_equal(a(pts).data, b(pts).data)
    bad = a.state()
    bad["b1.l1.W"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        b.load_state(bad)


def test_init_bounds():
    head = ProjectionHead(np.random.default_rng(0), 32, 16, 3, 256)
    assert np.abs(head.params["l0.W"].data).max() <= 1 / np.sqrt(32)
    assert np.abs(head.params["l1.W"].data).max() <= 1 / np.sqrt(256)
    assert not np.any(head.params["l0.b"].data)


@settings(max_examples=15, deadline=None)
@given(st.integers(8, 60), st.integers(0, 2**31 - 1))
def test_encoder_equivariance_property(n, seed):
    enc = PointEncoder(np.random.default_rng(seed % 13))
    pts = cloud(n, seed % 1009)
    perm = np.random.default_rng(seed).permutation(n)
    assert np.array_equal(enc(pts).data[perm], enc(pts[perm]).data)
