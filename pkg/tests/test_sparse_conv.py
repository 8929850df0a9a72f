import numpy as np
import pytest

from pivdet import autodiff as ad
from pivdet.autodiff import Var, grad_check
from pivdet.sparse import (ConvSpec, SparseError, SparseTensor, SparseTensor2D,
                           SparseTensor3D, focal_conv, strided_sparse_conv,
                           submanifold_conv, to_dense)

from oracles import dense_conv, dense_to_sparse, sparse_to_dense


def random_sparse(rng, shape, c, density=0.3):
    total = int(np.prod(shape))
    n = max(1, int(total * density))
    flat = rng.choice(total, size=n, replace=False)
    idx = np.stack(np.unravel_index(np.sort(flat), shape), axis=1)
    feats = rng.standard_normal((n, c))
    return SparseTensor(idx, feats, shape)


def test_identity_center_tap_submanifold():
    spec = ConvSpec.make("submanifold", 2, kernel=3, in_channels=2, out_channels=2)
    w = np.zeros((9, 2, 2))
    w[4] = np.eye(2)
    t = SparseTensor(np.array([[3, 3]]), np.array([[1.0, -2.0]]), (8, 8))
    out = submanifold_conv(t, spec, w)
    assert np.array_equal(out.indices, t.indices)
    assert np.allclose(out.features.value, [[1.0, -2.0]])


def test_two_adjacent_sites_all_ones_kernel():
    spec = ConvSpec.make("submanifold", 2, kernel=3, in_channels=1, out_channels=1)
    w = np.ones((9, 1, 1))
    t = SparseTensor(np.array([[2, 2], [2, 3]]), np.array([[1.0], [2.0]]), (8, 8))
    out = submanifold_conv(t, spec, w)
    assert np.allclose(out.features.value, [[3.0], [3.0]])


def test_submanifold_preserves_active_set_random():
    rng = np.random.default_rng(0)
    for _ in range(10):
        t = random_sparse(rng, (10, 10), 3)
        spec = ConvSpec.make("submanifold", 2, in_channels=3, out_channels=4)
        out = submanifold_conv(t, spec, rng.standard_normal((9, 3, 4)))
        assert np.array_equal(out.indices, t.indices)


def test_strided_center_only_kernel_halves_coordinates():
    spec = ConvSpec.make("strided", 2, kernel=3, stride=2, padding=1,
                         in_channels=1, out_channels=1)
    w = np.zeros((9, 1, 1))
    w[4] = 1.0
    t = SparseTensor(np.array([[4, 6]]), np.array([[5.0]]), (8, 8))
    out = strided_sparse_conv(t, spec, w)
    assert (2, 3) in {tuple(i) for i in out.indices}
    row = np.nonzero((out.indices == (2, 3)).all(axis=1))[0][0]
    assert np.isclose(out.features.value[row, 0], 5.0)


def test_strided_empty_input_empty_output():
    spec = ConvSpec.make("strided", 2, stride=2, in_channels=1, out_channels=1)
    t = SparseTensor(np.zeros((0, 2)), np.zeros((0, 1)), (8, 8))
    out = strided_sparse_conv(t, spec, np.ones((9, 1, 1)))
    assert out.num_active == 0


@pytest.mark.parametrize("d,shape", [(2, (8, 8)), (3, (6, 6, 6))])
@pytest.mark.parametrize("kind,stride", [("submanifold", 1), ("strided", 2)])
def test_conv_matches_dense_oracle(d, shape, kind, stride):
    rng = np.random.default_rng(7)
    for trial in range(8):
        c_in, c_out = rng.integers(1, 5), rng.integers(1, 5)
        t = random_sparse(rng, shape, c_in, density=0.2)
        spec = ConvSpec.make(kind, d, kernel=3, stride=stride,
                             in_channels=int(c_in), out_channels=int(c_out))
        w = rng.standard_normal((spec.volume, c_in, c_out))
        b = rng.standard_normal(c_out)
        fn = submanifold_conv if kind == "submanifold" else strided_sparse_conv
        out = fn(t, spec, w, b)

        dense_in = sparse_to_dense(t.indices, t.features.value, shape)
        ref = dense_conv(dense_in, w, spec.stride, spec.padding, b)
        for idx, feat in zip(out.indices, out.features.value):
            assert np.allclose(feat, ref[tuple(idx)], atol=1e-5)
        # strided output set covers every site whose receptive field is active
        if kind == "strided":
            ref_nobias = dense_conv(dense_in, w, spec.stride, spec.padding)
            active = {tuple(i) for i in out.indices}
            # sites with nonzero pre-bias response must be active
            ridx, _ = dense_to_sparse(ref_nobias)
            for site in ridx:
                assert tuple(site) in active


def test_focal_gate_closed_equals_submanifold():
    rng = np.random.default_rng(1)
    t = random_sparse(rng, (6, 6, 6), 3, density=0.15)
    spec_f = ConvSpec.make("focal", 3, in_channels=3, out_channels=2)
    spec_s = ConvSpec.make("submanifold", 3, in_channels=3, out_channels=2)
    w = rng.standard_normal((27, 3, 2))
    b = rng.standard_normal(2)
    out, imp = focal_conv(t, spec_f, w, b, np.zeros((3, 1)), tau=0.5)
    ref = submanifold_conv(t, spec_s, w, b)
    assert np.allclose(imp.value, 0.5)
    assert np.array_equal(out.indices, ref.indices)
    assert np.allclose(out.features.value, ref.features.value)


def test_focal_forced_gate_dilates_full_neighborhood():
    t = SparseTensor3D(np.array([[3, 3, 3]]), np.array([[10.0]]), (7, 7, 7))
    spec = ConvSpec.make("focal", 3, in_channels=1, out_channels=1)
    w = np.ones((27, 1, 1))
    # large positive importance weight saturates the logistic gate
    out, imp = focal_conv(t, spec, w, None, np.array([[50.0]]), tau=0.5)
    got = {tuple(i) for i in out.indices}
    expect = {(3 + a, 3 + b, 3 + c)
              for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)}
    assert got == expect


def test_focal_grad_check():
    rng = np.random.default_rng(2)
    idx = np.array([[1, 1, 1], [1, 1, 2], [2, 3, 1]])
    feats = rng.standard_normal((3, 2))
    w = rng.standard_normal((27, 2, 2)) * 0.3
    b = rng.standard_normal(2) * 0.1
    w_imp = rng.standard_normal((2, 1))

    def closure(v):
        t = SparseTensor3D(idx, v["f"], (5, 5, 5), assume_sorted=True)
        spec = ConvSpec.make("focal", 3, in_channels=2, out_channels=2)
        out, _ = focal_conv(t, spec, v["w"], v["b"], v["wi"], tau=0.5)
        return out.features

    report = grad_check(closure, {"f": feats, "w": w, "b": b, "wi": w_imp})
    assert report["max_rel_err"] <= 1e-4


def test_to_dense_and_roundtrip():
    t = SparseTensor2D(np.zeros((0, 2)), np.zeros((0, 3)), (4, 5))
    dense = to_dense(t, 4, 5)
    assert dense.value.shape == (4, 5, 3)
    assert np.all(dense.value == 0)

    t2 = SparseTensor2D(np.array([[0, 0]]), np.array([[5.0]]), (4, 5))
    d2 = to_dense(t2, 4, 5)
    assert d2.value[0, 0, 0] == 5.0
    assert np.count_nonzero(d2.value) == 1

    rng = np.random.default_rng(3)
    t3 = random_sparse(rng, (6, 6), 2)
    d3 = to_dense(t3, 6, 6).value
    idx, feats = dense_to_sparse(d3)
    assert np.array_equal(idx, t3.indices)
    assert np.allclose(feats, t3.features.value)


def test_permutation_invariance_of_input_rows():
    rng = np.random.default_rng(4)
    idx = np.array([[0, 1], [2, 2], [3, 0], [3, 3]])
    feats = rng.standard_normal((4, 2))
    spec = ConvSpec.make("submanifold", 2, in_channels=2, out_channels=2)
    w = rng.standard_normal((9, 2, 2))
    out1 = submanifold_conv(SparseTensor(idx, feats, (5, 5)), spec, w)
    perm = np.array([2, 0, 3, 1])
    out2 = submanifold_conv(SparseTensor(idx[perm], feats[perm], (5, 5)), spec, w)
    assert np.array_equal(out1.indices, out2.indices)
    assert np.allclose(out1.features.value, out2.features.value)


def test_out_of_range_indices_rejected():
    with pytest.raises(SparseError):
        SparseTensor(np.array([[9, 0]]), np.ones((1, 1)), (4, 4))
    with pytest.raises(SparseError):
        to_dense(SparseTensor(np.array([[3, 3]]), np.ones((1, 1)), (4, 4)), 2, 2)


def test_channel_mismatch_rejected():
    t = SparseTensor(np.array([[1, 1]]), np.ones((1, 3)), (4, 4))
    spec = ConvSpec.make("submanifold", 2, in_channels=2, out_channels=2)
    with pytest.raises(SparseError):
        submanifold_conv(t, spec, np.ones((9, 2, 2)))


def test_strided_never_emits_out_of_range():
    rng = np.random.default_rng(5)
    for _ in range(20):
        t = random_sparse(rng, (9, 7), 1, density=0.4)
        spec = ConvSpec.make("strided", 2, stride=2, in_channels=1, out_channels=1)
        out = strided_sparse_conv(t, spec, rng.standard_normal((9, 1, 1)))
        out_shape = np.asarray(out.shape)
        assert (out.indices >= 0).all() and (out.indices < out_shape).all()
