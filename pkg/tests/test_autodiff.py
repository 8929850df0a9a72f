import numpy as np
import pytest

from pivdet import autodiff as ad
from pivdet.autodiff import ParamStore, Var, backward, grad_check


def test_linear_layer_grad_check():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)

    def closure(v):
        return ad.add(ad.matmul(v["x"], v["w"]), v["b"])

    report = grad_check(closure, {"x": x, "w": w, "b": b})
    assert report["max_rel_err"] <= 1e-6


def test_softmax_attention_block_grad_check():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((6, 4))
    k = rng.standard_normal((6, 4))
    v = rng.standard_normal((6, 4))

    def closure(vars_):
        logits = ad.mul(ad.matmul(vars_["q"], ad.transpose(vars_["k"], (1, 0))),
                        Var(np.asarray(1.0 / 2.0)))
        attn = ad.softmax(logits, axis=-1)
        return ad.matmul(attn, vars_["v"])

    report = grad_check(closure, {"q": q, "k": k, "v": v})
    assert report["max_rel_err"] <= 1e-4


def test_constant_op_zero_gradient():
    x = np.ones((3, 3))

    def closure(v):
        return ad.mul(Var(np.zeros((3, 3))), v["x"])

    leaf = Var(x)
    out = closure({"x": leaf})
    backward(ad.reduce_sum(out))
    assert np.allclose(leaf.grad, 0.0)


def test_gather_scatter_roundtrip_grads():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 3))
    rows = np.array([0, 2, 2, 5])

    def closure(v):
        g = ad.gather(v["x"], rows)
        return ad.scatter_add(g, np.array([1, 0, 0, 1]), 2)

    report = grad_check(closure, {"x": x})
    assert report["max_rel_err"] <= 1e-6


def test_segment_max_forward_and_grad():
    x = Var(np.array([[1.0, 5.0], [3.0, 2.0], [0.5, 0.5]]))
    seg = np.array([0, 0, 1])
    out = ad.segment_max(x, seg, 2)
    assert np.allclose(out.value, [[3.0, 5.0], [0.5, 0.5]])
    backward(ad.reduce_sum(out))
    # gradient lands on the max entries only
    assert np.allclose(x.grad, [[0, 1], [1, 0], [1, 1]])


def test_segment_max_duplicated_rows_unchanged():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3))
    base = ad.segment_max(Var(x), np.array([0, 0, 1, 1]), 2)
    doubled = ad.segment_max(Var(np.concatenate([x[:2], x], axis=0)),
                             np.array([0, 0, 0, 0, 1, 1]), 2)
    assert np.allclose(base.value, doubled.value)


def test_broadcast_add_mul_unbroadcast():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)

    def closure(v):
        return ad.mul(ad.add(v["a"], v["b"]), v["b"])

    report = grad_check(closure, {"a": a, "b": b})
    assert report["max_rel_err"] <= 1e-6


def test_smooth_l1_and_log_and_sigmoid():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8,)) * 0.4

    def closure(v):
        s = ad.sigmoid(v["x"])
        return ad.add(ad.smooth_l1(v["x"], 1.0 / 9.0), ad.log(s))

    report = grad_check(closure, {"x": x})
    assert report["max_rel_err"] <= 1e-5


def test_batched_matmul_broadcast_weight():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((5, 3, 4))
    w = rng.standard_normal((4, 2))

    def closure(v):
        return ad.matmul(v["a"], v["w"])

    report = grad_check(closure, {"a": a, "w": w})
    assert report["max_rel_err"] <= 1e-6


def test_param_store_roundtrip_and_grads():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    store.add("frozen", np.zeros(3), trainable=False)
    with pytest.raises(ValueError):
        store.add("w", np.ones(1))
    leaves = store.leaves(np.float64)
    out = ad.reduce_sum(ad.mul(leaves["w"], leaves["w"]))
    backward(out)
    store.accumulate(leaves)
    assert np.allclose(store.grad("w"), 2.0)
    assert not store.trainable("frozen")
    state = store.state()
    store.set("w", np.full((2, 2), 7.0))
    store.load_state(state)
    assert np.allclose(store.get("w"), 1.0)


def test_backward_accumulates_through_shared_nodes():
    x = Var(np.array([2.0]))
    y = ad.mul(x, x)          # x^2
    z = ad.add(y, ad.mul(x, Var(np.array([3.0]))))   # x^2 + 3x
    backward(z)
    assert np.allclose(x.grad, 2 * 2.0 + 3.0)
