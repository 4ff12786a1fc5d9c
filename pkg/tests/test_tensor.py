"""Tensor op and autodiff tests, checked against naive brute-force oracles."""

import numpy as np
import pytest

from mhcnn import tensor as T
from mhcnn.rng import SplitMix64


# ---------------------------------------------------------------------------
# oracles, kept deliberately naive and independent of the library's fast paths
# ---------------------------------------------------------------------------


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop batched matrix product."""
    batch = a.shape[:-2]
    m, k = a.shape[-2:]
    _, n = b.shape[-2:]
    a2 = a.reshape(-1, m, k)
    b2 = b.reshape(-1, k, n)
    out = np.zeros((a2.shape[0], m, n), dtype=np.float64)
    for s in range(a2.shape[0]):
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for l in range(k):
                    acc += float(a2[s, i, l]) * float(b2[s, l, j])
                out[s, i, j] = acc
    return out.reshape(*batch, m, n)


def conv2d_oracle(x, w, bias, stride, ph, pw):
    """Sliding-window convolution, scalar accumulation."""
    b, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (wid + 2 * pw - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((b, cout, oh, ow), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += float(xp[bi, ci, oi * stride + ki, oj * stride + kj]) * float(
                                    w[co, ci, ki, kj]
                                )
                    if bias is not None:
                        acc += float(bias[co])
                    out[bi, co, oi, oj] = acc
    return out


def rand(shape, seed, dtype=np.float64):
    return SplitMix64(seed).gaussian(int(np.prod(shape))).reshape(shape).astype(dtype)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


class TestCreate:
    def test_zeros(self):
        t = T.zeros([2, 3])
        assert t.shape == (2, 3)
        assert np.all(t.data == 0.0)

    def test_fill(self):
        t = T.full([4], 1.5)
        assert t.data.tolist() == [1.5, 1.5, 1.5, 1.5]

    def test_gaussian_statistics(self):
        t = T.gaussian([100000], 0.0, 1.0, seed=7)
        assert -0.02 < t.data.mean() < 0.02
        assert 0.99 < t.data.std() < 1.01

    def test_gaussian_deterministic(self):
        a = T.gaussian([64], 0.0, 1.0, seed=3)
        b = T.gaussian([64], 0.0, 1.0, seed=3)
        assert np.array_equal(a.data, b.data)

    def test_empty_shape_rejected(self):
        with pytest.raises(T.TensorError):
            T.zeros([])

    def test_zero_dim_rejected(self):
        with pytest.raises(T.TensorError):
            T.full([2, 0], 1.0)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class TestElementwise:
    def test_self_subtraction(self):
        x = T.Tensor(rand((3, 4), 1))
        assert np.all(T.sub(x, x).data == 0.0)

    def test_add(self):
        out = T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_shape_mismatch(self):
        with pytest.raises(T.TensorError):
            T.add(T.zeros([2, 2]), T.zeros([2, 3]))

    def test_scale_gradient_matches_finite_differences(self):
        x = T.Tensor(rand((3, 3), 5))
        err = T.gradcheck(lambda: T.sum_all(T.scale(x, 2.0)), {"x": x})
        assert err <= 1e-6
        tape = T.Tape()
        tape.parameter("x", x)
        grads = tape.backward(T.sum_all(T.scale(x, 2.0)))
        assert np.allclose(grads["x"].data, 2.0)


# ---------------------------------------------------------------------------
# shape bookkeeping
# ---------------------------------------------------------------------------


class TestReshapePermuteConcat:
    def test_reshape_preserves_flat_data(self):
        x = T.Tensor(rand((2, 3), 2))
        y = T.reshape(x, (3, 2))
        assert np.array_equal(x.data.reshape(-1), y.data.reshape(-1))

    def test_reshape_count_mismatch(self):
        with pytest.raises(T.TensorError):
            T.reshape(T.zeros([1, 128, 80, 80]), (1, 80, 120, 80))

    def test_reshape_roundtrip_identity(self):
        x = T.Tensor(rand((4, 6), 3))
        y = T.reshape(T.reshape(x, (8, 3)), (4, 6))
        assert np.array_equal(x.data, y.data)

    def test_permute_identity(self):
        x = T.Tensor(rand((2, 3, 4), 4))
        assert np.array_equal(T.permute(x, (0, 1, 2)).data, x.data)

    def test_permute_shape(self):
        x = T.zeros([1, 2, 3, 4])
        assert T.permute(x, (0, 2, 1, 3)).shape == (1, 3, 2, 4)

    def test_permute_inverse_bit_exact(self):
        x = T.Tensor(rand((2, 3, 4, 5), 6))
        axes = (2, 0, 3, 1)
        inv = tuple(np.argsort(axes))
        back = T.permute(T.permute(x, axes), inv)
        assert np.array_equal(back.data, x.data)

    def test_permute_invalid(self):
        with pytest.raises(T.TensorError):
            T.permute(T.zeros([2, 2]), (0, 0))

    def test_concat_channels(self):
        parts = [T.Tensor(rand((2, 128, 16, 16), s, np.float32)) for s in range(3)]
        out = T.concat(parts, axis=1)
        assert out.shape == (2, 384, 16, 16)
        assert np.array_equal(out.data[:, 128:256], parts[1].data)

    def test_concat_single(self):
        x = T.Tensor(rand((2, 3), 9))
        assert np.array_equal(T.concat([x], 0).data, x.data)

    def test_concat_split_inverse(self):
        a = T.Tensor(rand((2, 3), 10))
        b = T.Tensor(rand((2, 5), 11))
        joined = T.concat([a, b], axis=1)
        assert np.array_equal(joined.data[:, :3], a.data)
        assert np.array_equal(joined.data[:, 3:], b.data)

    def test_concat_dim_mismatch(self):
        with pytest.raises(T.TensorError):
            T.concat([T.zeros([2, 3]), T.zeros([3, 3])], axis=1)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(rand((3, 3), 12))
        eye = T.Tensor(np.eye(3))
        assert np.allclose(T.matmul_batched(a, eye).data, a.data)

    def test_hand_case(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert T.matmul_batched(a, b).data.tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_batched_against_oracle(self):
        a = rand((4, 7, 3, 5), 13)
        b = rand((4, 7, 5, 2), 14)
        out = T.matmul_batched(T.Tensor(a), T.Tensor(b))
        assert out.shape == (4, 7, 3, 2)
        assert np.max(np.abs(out.data - matmul_oracle(a, b))) < 1e-5

    def test_inner_dim_mismatch(self):
        with pytest.raises(T.TensorError):
            T.matmul_batched(T.zeros([2, 3]), T.zeros([4, 2]))

    def test_batch_dim_mismatch(self):
        with pytest.raises(T.TensorError):
            T.matmul_batched(T.zeros([2, 3, 4]), T.zeros([3, 4, 2]))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


class TestConv2d:
    def test_one_by_one_identity(self):
        x = T.Tensor(rand((1, 1, 5, 5), 15))
        w = T.Tensor(np.ones((1, 1, 1, 1)))
        assert np.allclose(T.conv2d(x, w).data, x.data)

    def test_same_padding_preserves_size(self):
        x = T.zeros([1, 1, 8, 8])
        w = T.zeros([4, 1, 3, 3])
        assert T.conv2d(x, w, stride=1, padding=1).shape == (1, 4, 8, 8)

    def test_interior_sum_of_ones(self):
        x = T.Tensor(np.ones((1, 1, 8, 8)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1)
        assert out.data[0, 0, 4, 4] == pytest.approx(9.0)

    @pytest.mark.parametrize("seed", range(12))
    def test_against_sliding_window_oracle(self, seed):
        rng = SplitMix64(seed)
        b = rng.randint(2) + 1
        cin = rng.randint(3) + 1
        cout = rng.randint(3) + 1
        k = [1, 3][rng.randint(2)]
        pad = rng.randint(2)
        h = rng.randint(4) + k + 2
        w = rng.randint(4) + k + 2
        x = rand((b, cin, h, w), seed * 31 + 1, np.float32)
        wt = rand((cout, cin, k, k), seed * 31 + 2, np.float32)
        bias = rand((cout,), seed * 31 + 3, np.float32)
        out = T.conv2d(T.Tensor(x), T.Tensor(wt), T.Tensor(bias), stride=1, padding=pad)
        expect = conv2d_oracle(x, wt, bias, 1, pad, pad)
        assert np.max(np.abs(out.data - expect)) < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(T.TensorError):
            T.conv2d(T.zeros([1, 2, 4, 4]), T.zeros([1, 3, 3, 3]))

    def test_nonpositive_output(self):
        with pytest.raises(T.TensorError):
            T.conv2d(T.zeros([1, 1, 2, 2]), T.zeros([1, 1, 3, 3]), padding=0)


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------


class TestRotate:
    def test_four_turns_identity(self):
        x = T.Tensor(rand((2, 3, 4, 5), 20))
        out = x
        for _ in range(4):
            out = T.rotate90k(out, 1)
        assert np.array_equal(out.data, x.data)

    def test_half_turn_composition(self):
        x = T.Tensor(rand((1, 1, 3, 4), 21))
        once_twice = T.rotate90k(T.rotate90k(x, 1), 1)
        assert np.array_equal(T.rotate90k(x, 2).data, once_twice.data)

    def test_counterclockwise_quarter(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert T.rotate90k(x, 1).data.tolist() == [[2.0, 4.0], [1.0, 3.0]]

    def test_k_taken_mod_four(self):
        x = T.Tensor(rand((1, 1, 2, 3), 22))
        assert np.array_equal(T.rotate90k(x, 5).data, T.rotate90k(x, 1).data)


# ---------------------------------------------------------------------------
# tape / backward
# ---------------------------------------------------------------------------


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(rand((3, 4), 30))
        tape = T.Tape()
        tape.parameter("x", x)
        grads = tape.backward(T.sum_all(x))
        assert np.array_equal(grads["x"].data, np.ones((3, 4)))

    def test_quadratic_gradient(self):
        x = T.Tensor(rand((5,), 31))
        tape = T.Tape()
        tape.parameter("x", x)
        grads = tape.backward(T.sum_all(T.mul(x, x)))
        assert np.allclose(grads["x"].data, 2 * x.data)

    def test_nonparticipating_leaf_gets_zeros(self):
        x = T.Tensor(rand((2, 2), 32))
        unused = T.Tensor(rand((3,), 33))
        tape = T.Tape()
        tape.parameter("x", x)
        tape.parameter("unused", unused)
        grads = tape.backward(T.sum_all(x))
        assert np.array_equal(grads["unused"].data, np.zeros(3))

    def test_loss_must_be_scalar(self):
        x = T.Tensor(rand((2, 2), 34))
        tape = T.Tape()
        tape.parameter("x", x)
        y = T.mul(x, x)
        with pytest.raises(T.TensorError):
            tape.backward(y)

    def test_loss_not_on_tape(self):
        x = T.Tensor(rand((2, 2), 35))
        tape = T.Tape()
        with pytest.raises(T.TensorError):
            tape.backward(T.sum_all(x))

    def test_duplicate_parameter_name(self):
        tape = T.Tape()
        tape.parameter("x", T.zeros([1]))
        with pytest.raises(T.TensorError):
            tape.parameter("x", T.zeros([1]))

    def test_mixed_tapes_rejected(self):
        t1, t2 = T.Tape(), T.Tape()
        a = t1.parameter("a", T.zeros([2]))
        b = t2.parameter("b", T.zeros([2]))
        with pytest.raises(T.TensorError):
            T.add(a, b)

    def test_composite_conv_chain_matches_finite_differences(self):
        x = T.Tensor(rand((1, 2, 6, 6), 36))
        w = T.Tensor(rand((3, 2, 3, 3), 37))
        bias = T.Tensor(rand((3,), 38))
        lossw = T.Tensor(rand((1, 3, 6, 6), 39))

        def forward():
            y = T.conv2d(x, w, bias, stride=1, padding=1)
            y = T.mul(y, y)
            return T.sum_all(T.mul(y, lossw))

        err = T.gradcheck(forward, {"x": x, "w": w, "b": bias})
        assert err <= 1e-5


# ---------------------------------------------------------------------------
# per-op finite-difference properties, 20 random seeds each
# ---------------------------------------------------------------------------


def _weighted_loss(out: T.Tensor, seed: int) -> T.Tensor:
    w = T.Tensor(rand(out.shape, seed))
    return T.sum_all(T.mul(out, w))


OP_CASES = {
    "add": lambda p: T.add(p["a"], p["b"]),
    "sub": lambda p: T.sub(p["a"], p["b"]),
    "mul": lambda p: T.mul(p["a"], p["b"]),
    "scale": lambda p: T.scale(p["a"], -1.7),
    "reshape": lambda p: T.reshape(p["a"], (p["a"].size,)),
    "permute": lambda p: T.permute(p["a"], (1, 0)),
    "rotate": lambda p: T.rotate90k(T.reshape(p["a"], (1, 1) + p["a"].shape), 1),
    "concat": lambda p: T.concat([p["a"], p["b"]], axis=0),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(op, seed):
    rng = SplitMix64(seed * 101 + 7)
    shape = (rng.randint(7) + 1, rng.randint(7) + 1)
    a = T.Tensor(rand(shape, seed * 3 + 1))
    b = T.Tensor(rand(shape, seed * 3 + 2))
    fn = OP_CASES[op]
    err = T.gradcheck(lambda: _weighted_loss(fn({"a": a, "b": b}), seed + 999), {"a": a, "b": b})
    assert err <= 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_matmul_gradients_match_finite_differences(seed):
    rng = SplitMix64(seed + 500)
    m, k, n = rng.randint(4) + 1, rng.randint(4) + 1, rng.randint(4) + 1
    a = T.Tensor(rand((2, m, k), seed * 7 + 1))
    b = T.Tensor(rand((2, k, n), seed * 7 + 2))
    err = T.gradcheck(
        lambda: _weighted_loss(T.matmul_batched(a, b), seed + 77), {"a": a, "b": b}
    )
    assert err <= 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_gradients_match_finite_differences(seed):
    rng = SplitMix64(seed + 900)
    k = [1, 3][rng.randint(2)]
    pad = rng.randint(2)
    x = T.Tensor(rand((1, 2, 5, 5), seed * 11 + 1))
    w = T.Tensor(rand((2, 2, k, k), seed * 11 + 2))
    bias = T.Tensor(rand((2,), seed * 11 + 3))
    err = T.gradcheck(
        lambda: _weighted_loss(T.conv2d(x, w, bias, 1, pad), seed + 13),
        {"x": x, "w": w, "b": bias},
    )
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# gradcheck plumbing
# ---------------------------------------------------------------------------


class TestGradcheck:
    def test_linear_map_near_exact(self):
        x = T.Tensor(rand((4,), 40))
        err = T.gradcheck(lambda: T.sum_all(T.scale(x, 3.0)), {"x": x})
        assert err <= 1e-10

    def test_nondeterministic_forward_rejected(self):
        state = {"n": 0.0}
        x = T.Tensor(rand((2,), 41))

        def forward():
            state["n"] += 1.0
            return T.sum_all(T.scale(x, state["n"]))

        with pytest.raises(T.TensorError):
            T.gradcheck(forward, {"x": x})

    def test_checked_mode_surfaces_nonfinite(self):
        x = T.Tensor(np.array([1e300]))
        with T.checked(), np.errstate(over="ignore"):
            with pytest.raises(T.TensorError):
                T.mul(x, x)
