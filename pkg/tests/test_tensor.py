import math
import struct

import numpy as np
import pytest

from clvd import tensor as T
from clvd.errors import BackwardError, ConfigError, InputError, ShapeError
from clvd.tensor import Tape, Tensor, grad_check
from primitive_cases import CASES

MISH_1 = 0.8650983882673103461
MISH_NEG10 = -0.0004539889918567469430


# ---------------------------------------------------------------- forward values


def test_matmul_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    assert T.matmul(a, b).data.tolist() == [[17.0], [39.0]]
    m = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert not T.matmul(Tensor(np.zeros((3, 4))), Tensor(m.reshape(3, 2)[:, :1].repeat(4, 0)[:4])).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_values():
    y = T.elementwise(Tensor([0.0, 1.0, -10.0]), "mish").data
    np.testing.assert_allclose(y, [0.0, MISH_1, MISH_NEG10], atol=1e-12)
    assert T.elementwise(Tensor([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    assert T.elementwise(Tensor(np.zeros((0,))), "mish").shape == (0,)


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    y = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(y[0] - 1.0) < 1e-12 and abs(y[1]) < 1e-12


def test_softmax_rows_are_simplex(rng):
    for _ in range(20):
        x = rng.normal(scale=rng.uniform(0.1, 30), size=(5, 7))
        y = T.softmax(Tensor(x), axis=-1).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_statistics(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-5).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-6
    assert np.abs(y.var(axis=-1) - 1).max() <= 1e-4
    const = T.layer_norm(Tensor(np.full((2, 8), 7.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-5).data
    assert np.abs(const).max() <= 1e-6
    with pytest.raises(ConfigError):
        T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 0.0)


def test_embed_lookup_and_errors():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = T.embed(table, np.array([[3, 0]]))
    assert out.shape == (1, 2, 3)
    assert out.data[0, 0].tolist() == [9.0, 10.0, 11.0]
    with pytest.raises(IndexError, match="7"):
        T.embed(table, np.array([1, 7]))
    with pytest.raises(InputError):
        T.embed(table, np.array([0.5]))


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_limit_perfect_prediction():
    logits = Tensor([[50.0, 0.0, 0.0]])
    assert T.cross_entropy_smoothed(logits, [0], 0.0).item() < 1e-6


def test_cross_entropy_uniform_two_classes():
    loss = T.cross_entropy_smoothed(Tensor([[0.3, 0.3]]), [1], 0.1).item()
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_hand_formula():
    # q = (0.925, 0.025, 0.025, 0.025); log p_0 = 2 - L, log p_k = -L, L = ln(e^2 + 3)
    big_l = math.log(math.exp(2) + 3)
    expected = -(0.925 * (2 - big_l) + 3 * 0.025 * (-big_l))
    loss = T.cross_entropy_smoothed(Tensor([[2.0, 0.0, 0.0, 0.0]]), [0], 0.1).item()
    assert loss == pytest.approx(expected, abs=1e-14)


def test_cross_entropy_ignores_pad_rows(rng):
    logits = rng.normal(size=(3, 5))
    full = T.cross_entropy_smoothed(Tensor(logits[:2]), [1, 3], 0.1, pad_id=2).item()
    padded = T.cross_entropy_smoothed(Tensor(logits), [1, 3, 2], 0.1, pad_id=2).item()
    assert padded == pytest.approx(full, abs=1e-14)


@pytest.mark.parametrize("eps", [-0.1, 1.0])
def test_cross_entropy_epsilon_domain(eps):
    with pytest.raises(ConfigError):
        T.cross_entropy_smoothed(Tensor([[0.0, 1.0]]), [0], eps)


# ---------------------------------------------------------------- stochastic ops


def test_gaussian_noise_identity_at_zero():
    x = Tensor(np.array([1.5, -2.0], dtype=np.float32))
    y = T.gaussian_noise(x, 0.0, np.random.default_rng(0))
    assert y.data.tobytes() == x.data.tobytes()


def test_gaussian_noise_statistics():
    x = Tensor(np.zeros(10**6))
    z = T.gaussian_noise(x, 0.3, np.random.default_rng(2019)).data
    assert abs(z.mean()) <= 3 * 0.3 / 1000
    assert abs(z.std() - 0.3) <= 0.01 * 0.3


def test_gaussian_noise_deterministic_and_validated():
    x = Tensor(np.zeros((4, 5)))
    a = T.gaussian_noise(x, 0.3, np.random.default_rng(5)).data
    b = T.gaussian_noise(x, 0.3, np.random.default_rng(5)).data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ConfigError):
        T.gaussian_noise(x, -0.1, np.random.default_rng(5))


def test_gaussian_noise_passes_gradient_through():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(T.gaussian_noise(x, 0.5, np.random.default_rng(1)))
    np.testing.assert_array_equal(tape.backward(loss)[x], np.ones((3, 2)))


def test_dropout_identities():
    x = Tensor(np.arange(6.0))
    assert T.dropout(x, 0.0, True, np.random.default_rng(0)).data.tobytes() == x.data.tobytes()
    assert T.dropout(x, 0.9, False, np.random.default_rng(0)).data.tobytes() == x.data.tobytes()


def test_dropout_statistics():
    m = 10**6
    y = T.dropout(Tensor(np.ones(m)), 0.25, True, np.random.default_rng(2019)).data
    zeroed = float((y == 0).mean())
    assert abs(zeroed - 0.25) <= 0.002
    assert abs(y.mean() - 1.0) <= 0.005
    assert abs(y.mean() - 1.0) <= 5 * y.std() / math.sqrt(m)
    assert set(np.unique(y)) == {0.0, 1.0 / 0.75}


def test_dropout_backward_uses_same_mask():
    x = Tensor(np.ones(1000), requires_grad=True)
    with Tape() as tape:
        y = T.dropout(x, 0.5, True, np.random.default_rng(3))
        loss = T.sum_(y)
    g = tape.backward(loss)[x]
    np.testing.assert_array_equal(g, y.data)


@pytest.mark.parametrize("delta", [1.0, -0.1])
def test_dropout_domain(delta):
    with pytest.raises(ConfigError):
        T.dropout(Tensor(np.ones(3)), delta, True, np.random.default_rng(0))


# ---------------------------------------------------------------- reverse pass


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x)
    np.testing.assert_array_equal(tape.backward(loss)[x], np.ones((2, 3)))


def test_backward_mish_of_linear_map(rng):
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(3, 2))
    report = grad_check(lambda w_, x_: T.sum_(T.elementwise(T.matmul(w_, x_), "mish")), [w, x], step=1e-4)
    assert report.passed, report.failures
    assert report.max_rel_error <= 1e-4


def test_disconnected_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(T.scale(x, 2.0))
    grads = tape.backward(loss, wrt=[x, unused])
    np.testing.assert_array_equal(grads[x], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))
    assert unused.grad is grads[unused]


def test_tape_is_single_use():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x)
    tape.backward(loss)
    with pytest.raises(BackwardError, match="consumed"):
        tape.backward(loss)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 3.0)
    with pytest.raises(BackwardError, match="scalar"):
        tape.backward(y)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.scale(x, 2.0)
    assert not y.requires_grad
    with Tape() as tape:
        T.scale(x, 2.0)
        T.scale(Tensor(np.ones(3)), 2.0)
    assert len(tape) == 1


def test_records_are_topological():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.matmul(x, x)
        T.sum_(T.elementwise(y, "gelu"))
    produced = set()
    for rec in tape.records:
        for inp in rec.inputs:
            assert inp.is_leaf or id(inp) in produced
        produced.add(id(rec.out))


def test_shared_input_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(T.mul(x, x))
    np.testing.assert_allclose(tape.backward(loss)[x], [2.0, 4.0])


def test_debug_mode_flags_non_finite():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError, match="scale"):
        T.scale(Tensor([1e308]), 10.0)


# ---------------------------------------------------------------- grad_check utility


def test_grad_check_quadratic_exact():
    x = np.random.default_rng(0).normal(size=10)
    report = grad_check(lambda v: T.scale(T.sum_(T.mul(v, v)), 0.5), x)
    assert report.n_checked == 10
    assert report.max_rel_error < 1e-9


def test_grad_check_empty_input():
    report = grad_check(lambda v: T.sum_(v), np.zeros((0,)))
    assert report.n_checked == 0 and report.passed and report.max_rel_error == 0.0


def test_grad_check_detects_wrong_backward():
    def bad_square(a):
        return T._emit("bad", a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

    report = grad_check(lambda v: T.sum_(bad_square(v)), np.array([1.0, -2.0, 3.0]))
    assert not report.passed
    assert len(report.failures) == 3
    assert "failing" in str(report)


def test_grad_check_coordinate_subsample():
    x = np.random.default_rng(0).normal(size=(30, 30))
    report = grad_check(lambda v: T.sum_(T.elementwise(v, "mish")), x, max_coords=25)
    assert report.n_checked == 25 and report.passed


# ---------------------------------------------------------------- every primitive, 20 seeds

SEEDS = range(20)


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    for seed in SEEDS:
        f, point = CASES[name](np.random.default_rng(seed))
        report = grad_check(f, point, step=1e-4, tolerance=1e-4)
        assert report.passed, (name, seed, report.failures[:3])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([0.5], dtype=np.float32),
              "ünï": np.zeros((1, 2, 2), dtype=np.float32)}
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw[:4] == b"CLVD"
    assert struct.unpack_from("<I", raw, 4)[0] == T.CHECKPOINT_VERSION
    # first record: name "w", rank 2, dims (2, 3), then little-endian float32 payload
    assert struct.unpack_from("<I", raw, 8)[0] == 1 and raw[12:13] == b"w"
    assert struct.unpack_from("<III", raw, 13) == (2, 2, 3)
    assert np.frombuffer(raw, "<f4", 6, 25).tolist() == [0, 1, 2, 3, 4, 5]
    back = T.load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(InputError, match="magic"):
        T.load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    T.save_checkpoint(good, {"w": np.ones((4, 4), np.float32)})
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(InputError, match="truncated"):
        T.load_checkpoint(trunc)


def test_determinism_same_seed_same_bits():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
        y = T.gaussian_noise(x, 0.3, rng)
        y = T.dropout(T.elementwise(T.matmul(y, x), "mish"), 0.25, True, rng)
        return T.softmax(y).data.tobytes()

    assert run() == run()
