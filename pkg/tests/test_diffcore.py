import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from evdeblur import diffcore as dc
from evdeblur.diffcore import Tensor, TensorFileError

from _gradcases import MAX_ENTRIES, OP_CASES
from _gradcheck import check_gradients

SEEDS = range(10)


def grad_of(fn, x):
    x.requires_grad = True
    x.grad = None
    with dc.Tape() as tape:
        loss = fn(x)
    dc.backward(tape, loss)
    return x.grad


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(dc.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_silu_at_zero(self):
        x = Tensor([0.0])
        assert dc.silu(x).data[0] == 0.0
        assert grad_of(lambda t: dc.sum_(dc.silu(t)), x)[0] == 0.5

    def test_sigmoid_is_stable(self):
        y = dc.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])

    def test_mul_gradient_3x3(self):
        rng = np.random.default_rng(0)
        a, b = Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal((3, 3)))
        errs = check_gradients(lambda: dc.sum_(dc.mul(a, b)), {"a": a, "b": b})
        assert max(errs.values()) < 1e-6

    def test_operators_match_functions(self):
        a, b = Tensor([1.0, -2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a * b - a / 4.0 + 2 * a).data,
                                      a.data * b.data - a.data / 4.0 + 2 * a.data)
        with pytest.raises(TypeError):
            a / b


class TestMatmul:
    def test_identity(self):
        x = np.random.default_rng(1).standard_normal((4, 4))
        np.testing.assert_array_equal(dc.matmul(Tensor(np.eye(4)), Tensor(x)).data, x)

    def test_hand_product(self):
        out = dc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_gradient(self):
        rng = np.random.default_rng(2)
        a, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))
        errs = check_gradients(lambda: dc.sum_(dc.square(dc.matmul(a, b))), {"a": a, "b": b})
        assert max(errs.values()) < 1e-6


class TestConv2d:
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 5, 6))
        out = dc.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_center(self):
        out = dc.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), pad=1)
        assert out.data[0, 1, 1] == 9.0
        assert out.data[0, 0, 0] == 4.0

    def test_cross_correlation_no_flip(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 0, 0] = 1.0  # picks the up-left neighbour
        x = np.arange(16.0).reshape(1, 4, 4)
        out = dc.conv2d(Tensor(x), Tensor(k), pad=1)
        assert out.data[0, 2, 2] == x[0, 1, 1]

    def test_stride2_shape(self):
        out = dc.conv2d(Tensor(np.zeros((2, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, pad=1)
        assert out.shape == (2, 4, 4, 4)

    def test_gradient_2x4x4(self):
        rng = np.random.default_rng(3)
        x, w = Tensor(rng.standard_normal((2, 4, 4))), Tensor(rng.standard_normal((3, 2, 3, 3)))
        errs = check_gradients(lambda: dc.sum_(dc.square(dc.conv2d(x, w, pad=1))), {"x": x, "w": w})
        assert max(errs.values()) < 1e-5

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError):
            dc.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_rejects_empty_output(self):
        with pytest.raises(ValueError):
            dc.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestResampleConcat:
    def test_up2_constant(self):
        out = dc.up2_nearest(Tensor(np.full((1, 1, 1), 7.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 7.0))

    def test_down_then_up_constant_fixed_point(self):
        x = Tensor(np.full((1, 8, 8), 0.3))
        avg = Tensor(np.full((1, 1, 1, 1), 1.0))
        out = dc.up2_nearest(dc.conv2d(x, avg, stride=2))
        np.testing.assert_array_equal(out.data, x.data)

    def test_resample_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            dc.resample(Tensor(np.zeros((1, 2, 2))), "bicubic")

    def test_concat(self):
        out = dc.concat_channels(Tensor(np.zeros((1, 2, 2))), Tensor(np.ones((1, 2, 2))))
        assert not out.data[0].any() and np.all(out.data[1] == 1)

    def test_split_inverts_concat(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((3, 3, 3))
        sa, sb = dc.split_channels(dc.concat_channels(Tensor(a), Tensor(b)), 2)
        np.testing.assert_array_equal(sa.data, a)
        np.testing.assert_array_equal(sb.data, b)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ValueError):
            dc.concat_channels(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 3))))


class TestLayerNormSoftmax:
    def test_constant_token_is_zero(self):
        out = dc.layer_norm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)),
                      elements=st.floats(-100, 100)))
    def test_moments(self, x):
        # tokens with a real spread; eps is negligible next to their variance
        spread = x.std(axis=-1) > 1e-2
        out = dc.layer_norm(Tensor(x), Tensor(np.ones(x.shape[-1])), Tensor(np.zeros(x.shape[-1])),
                            eps=1e-12).data[spread]
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
        assert np.all(np.abs(out.var(axis=-1) - 1) < 1e-9)

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(dc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_softmax_no_overflow(self):
        y = dc.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(y)) and y[0, 0] == pytest.approx(1.0) and y[0, 1] < 1e-300

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 10)),
                      elements=st.floats(-500, 500)))
    def test_softmax_rows_sum_to_one(self, x):
        y = dc.softmax_rows(Tensor(x)).data
        assert np.all(np.abs(y.sum(axis=-1) - 1) < 1e-12)


class TestTape:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 2)))
        np.testing.assert_array_equal(grad_of(dc.sum_, x), np.ones((3, 2)))

    def test_half_sum_of_squares(self):
        x = Tensor(np.random.default_rng(1).standard_normal(5))
        np.testing.assert_allclose(grad_of(lambda t: dc.scale(dc.sum_(dc.mul(t, t)), 0.5), x), x.data)

    def test_accumulates_two_uses(self):
        x = Tensor(np.zeros(4))
        np.testing.assert_array_equal(grad_of(lambda t: dc.add(dc.sum_(t), dc.sum_(t)), x), 2.0)

    def test_grad_shape_matches(self):
        x = Tensor(np.zeros((2, 3)))
        assert grad_of(lambda t: dc.sum_(dc.add(t, Tensor(np.ones(3)))), x).shape == (2, 3)

    def test_non_scalar_loss(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with dc.Tape() as tape:
            y = dc.mul(x, x)
        with pytest.raises(ValueError):
            dc.backward(tape, y)

    def test_detached_loss(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with dc.Tape() as tape:
            dc.sum_(x)
        with pytest.raises(ValueError, match="detached"):
            dc.backward(tape, Tensor(1.0))

    def test_no_recording_without_grad(self):
        with dc.Tape() as tape:
            dc.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_finite_differences(op, seed):
    fn, tensors = OP_CASES[op](np.random.default_rng(seed))
    errs = check_gradients(fn, tensors, h=1e-5, max_entries=MAX_ENTRIES.get(op), seed=seed)
    assert max(errs.values()) < 1e-5, errs


class TestTensorFile:
    def test_empty_map(self):
        data = dc.save_tensors({})
        assert len(data) == 12 and dc.load_tensors(data) == {}

    def test_round_trip(self):
        m = {"w": np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)}
        out = dc.load_tensors(dc.save_tensors(m))
        assert list(out) == ["w"]
        np.testing.assert_array_equal(out["w"], m["w"])

    def test_entry_layout(self):
        data = dc.save_tensors({"ab": np.zeros((2, 3), dtype=np.float32)})
        # 12 header + 2 name len + 2 name + 1 rank + 8 dims + 24 payload
        assert len(data) == 12 + 2 + 2 + 1 + 8 + 24

    @pytest.mark.parametrize("mutate, fragment", [
        (lambda d: b"XUNT" + d[4:], "bad magic"),
        (lambda d: d[:4] + b"\x02" + d[5:], "unsupported version"),
        (lambda d: d[:-1], "truncated"),
        (lambda d: d + b"\x00", "trailing"),
    ])
    def test_rejects(self, mutate, fragment):
        data = dc.save_tensors({"a": np.ones(3, dtype=np.float32)})
        with pytest.raises(TensorFileError, match=fragment):
            dc.load_tensors(mutate(data))

    def test_duplicate_name_in_file(self):
        one = dc.save_tensors({"a": np.ones(1, dtype=np.float32)})[12:]
        data = b"KUNT" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + one + one
        with pytest.raises(TensorFileError, match="duplicate"):
            dc.load_tensors(data)

    @settings(max_examples=100, deadline=None)
    @given(st.dictionaries(
        st.text(alphabet="abcdefghij._0123456789", min_size=1, max_size=12),
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                   elements=st.floats(-1e6, 1e6, width=32)),
        max_size=4))
    def test_round_trip_property(self, m):
        out = dc.load_tensors(dc.save_tensors(m))
        assert list(out) == list(m)
        for k in m:
            np.testing.assert_array_equal(out[k], m[k])
