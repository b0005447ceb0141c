import logging

import numpy as np
import pytest

from errors import ContractError, ShapeError
from services import autodiff as ad
from services.autodiff import SgdState, Tensor


def numeric_grad(fn, array, eps=1e-6):
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = array[idx]
        array[idx] = saved + eps
        plus = fn()
        array[idx] = saved - eps
        minus = fn()
        array[idx] = saved
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def check_gradients(build, *arrays, tol=1e-4):
    """`build(*tensors)` must return a scalar Tensor."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(build(*tensors))
    for tensor in tensors:
        expected = numeric_grad(lambda: build(*[Tensor(t.data) for t in tensors]).item(), tensor.data)
        scale = max(np.abs(expected).max(), np.abs(tensor.grad).max(), 1e-8)
        assert np.abs(tensor.grad - expected).max() / scale < tol


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def weighted(out, seed=1):
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum(ad.mul(out, Tensor(weights)))


def test_broadcast_add_and_mul_gradients(rng):
    check_gradients(lambda a, b: weighted(a + b), rng.normal(size=(2, 3, 4)), rng.normal(size=4))
    check_gradients(lambda a, b: weighted(a * b), rng.normal(size=(3, 4)), rng.normal(size=4))
    check_gradients(lambda a, b: weighted(a - b), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))


def test_batched_matmul_gradient(rng):
    check_gradients(lambda a, b: weighted(a @ b), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))
    check_gradients(lambda a, b: weighted(a @ ad.transpose(b)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)))


def test_shape_op_gradients(rng):
    check_gradients(lambda a: weighted(ad.reshape(a, (6, 2))), rng.normal(size=(3, 4)))
    check_gradients(lambda a, b: weighted(ad.concat([a, b], axis=1)), rng.normal(size=(2, 1, 3)), rng.normal(size=(2, 4, 3)))
    check_gradients(lambda a: weighted(ad.take(a, 1, axis=-2)), rng.normal(size=(2, 4, 3)))
    check_gradients(lambda a: weighted(ad.take(a, [0, 2, 2], axis=0)), rng.normal(size=(3, 2)))
    check_gradients(lambda a: weighted(ad.expand(a, 3)), rng.normal(size=(2, 2)))
    perm = np.array([[2, 0, 3, 1], [1, 3, 0, 2]])
    check_gradients(lambda a: weighted(ad.permute_rows(a, perm)), rng.normal(size=(2, 4, 3)))


def test_nonlinearity_gradients(rng):
    x = rng.normal(size=(3, 5))
    check_gradients(lambda a: weighted(ad.exp(a)), x.copy())
    check_gradients(lambda a: weighted(ad.sigmoid(a)), x.copy())
    check_gradients(lambda a: weighted(ad.gelu(a)), x.copy())
    check_gradients(lambda a: weighted(ad.softmax_rows(a)), x.copy())
    check_gradients(lambda a: weighted(ad.log_softmax_rows(a)), x.copy())
    check_gradients(lambda a: weighted(ad.log(a)), rng.uniform(0.5, 2.0, size=(3, 4)))
    check_gradients(lambda a: weighted(ad.xlogx(a)), rng.uniform(0.1, 1.0, size=(3, 4)))
    check_gradients(lambda a: weighted(ad.mean(a, axis=0)), x.copy())


def test_layer_norm_gradient(rng):
    check_gradients(
        lambda x, g, b: weighted(ad.layer_norm(x, g, b)),
        rng.normal(size=(2, 3, 6)),
        rng.normal(size=6),
        rng.normal(size=6),
    )


def test_cross_entropy_gradient_with_smoothing(rng):
    labels = np.array([0, 2, 1])
    check_gradients(lambda z: ad.cross_entropy(z, labels, smoothing=0.1), rng.normal(size=(3, 4)))


def test_fan_out_contributions_are_summed():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    ad.backward(ad.sum(x * x + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_cross_entropy_of_uniform_logits_is_log_k():
    loss = ad.cross_entropy(Tensor(np.zeros((4, 6))), [0, 1, 2, 5])
    assert loss.item() == pytest.approx(np.log(6))
    assert loss.item() == pytest.approx(1.7918, abs=1e-4)


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_xlogx_treats_zero_as_zero():
    out = ad.xlogx(Tensor(np.array([0.0, 1.0, 0.5])))
    np.testing.assert_allclose(out.data, [0.0, 0.0, 0.5 * np.log(0.5)])


def test_backward_contracts():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)
    with pytest.raises(ContractError):
        ad.backward(ad.sum(Tensor(np.ones(3))))


def test_binary_ops_reject_mismatched_trailing_shapes():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(2))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(x * 3.0)
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_sgd_step_momentum_and_weight_decay():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.1)
    p.grad = np.array([0.5])
    ad.sgd_step({"p": p}, state)
    np.testing.assert_allclose(p.data, [0.94])
    np.testing.assert_array_equal(p.grad, [0.0])
    p.grad = np.array([0.5])
    ad.sgd_step({"p": p}, state)
    np.testing.assert_allclose(state.velocity["p"], [1.134])
    np.testing.assert_allclose(p.data, [0.8266])


def test_sgd_step_lr_scale():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    ad.sgd_step({"p": p}, SgdState(learning_rate=0.5, momentum=0.0, weight_decay=0.0), lr_scale=0.01)
    np.testing.assert_allclose(p.data, [0.995])


def test_sgd_step_requires_gradients():
    with pytest.raises(ContractError):
        ad.sgd_step({"p": Tensor(np.ones(2), requires_grad=True)}, SgdState(learning_rate=0.1))


def test_sgd_state_validation():
    with pytest.raises(ContractError):
        SgdState(learning_rate=0.0)
    with pytest.raises(ContractError):
        SgdState(learning_rate=0.1, momentum=1.0)


def test_checkpoint_layout_and_float32_storage(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float64).reshape(2, 3) / 3.0, "b": np.array([1.0, -1.0])}
    blob = ad.checkpoint_bytes(arrays)
    assert blob[:8] == b"CSFTCKPT"
    loaded = ad.parse_checkpoint(blob)
    assert list(loaded) == ["w", "b"]
    assert loaded["w"].dtype == np.float32
    np.testing.assert_array_equal(loaded["w"], arrays["w"].astype(np.float32))
    assert ad.checkpoint_bytes(loaded) == blob

    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, arrays)
    assert path.read_bytes() == blob


def test_checkpoint_io_is_logged(tmp_path, caplog):
    path = tmp_path / "model.ckpt"
    with caplog.at_level(logging.DEBUG, logger="services.autodiff"):
        ad.save_checkpoint(path, {"w": np.ones(3)})
        assert list(ad.load_checkpoint(path)) == ["w"]
    messages = [r.getMessage() for r in caplog.records if r.name == "services.autodiff"]
    assert any(m.startswith("wrote 1 arrays") for m in messages)
    assert any(m.startswith("read 1 arrays") for m in messages)


def test_checkpoint_rejects_bad_magic():
    with pytest.raises(ContractError):
        ad.parse_checkpoint(b"NOTACKPT" + bytes(8))
