import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alga_oracles import loop_matmul
from alter import numerics as nx
from alter.checkpoint import VERSION, load_checkpoint, save_checkpoint
from alter.numerics import NonFiniteError, Parameter, Tensor, backward, finite_diff_check


def param(rng, *shape, name="p"):
    return Parameter(rng.standard_normal(shape), name)


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 3))
        assert np.array_equal(nx.matmul(np.eye(3), x).data, x)

    def test_scalar(self):
        assert nx.matmul(np.array([[3.0]]), np.array([[4.0]])).data[0, 0] == 12.0

    def test_against_loops(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.allclose(nx.matmul(a, b).data, loop_matmul(a, b), atol=1e-12, rtol=0)

    def test_batched_weight_path_matches_loops(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        out = nx.matmul(a, b).data
        for i in range(2):
            assert np.allclose(out[i], loop_matmul(a[i], b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            nx.matmul(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(nx.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        assert np.allclose(nx.softmax_rows(x).data, nx.softmax_rows(x + 123.4).data, atol=1e-12, rtol=0)

    def test_large_logits_stable(self):
        out = nx.softmax_rows(np.array([[1000.0, 0.0]])).data
        mp = mpmath.mp
        mp.dps = 50
        ref = mpmath.exp(-1000) / (1 + mpmath.exp(-1000))
        assert out[0, 0] == 1.0
        assert abs(out[0, 1] - float(ref)) < 1e-300

    def test_rejects_nonfinite(self):
        with pytest.raises(NonFiniteError):
            nx.softmax_rows(np.array([[np.inf, 0.0]]))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3))
    def test_rows_stochastic(self, seed, scale):
        x = np.random.default_rng(seed).standard_normal((5, 7)) * scale
        s = nx.softmax_rows(x).data
        assert np.all(s >= 0)
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


class TestLinearAndNorm:
    def test_linear_identity(self, rng):
        x = rng.standard_normal((5, 3))
        y = nx.linear(x, Parameter(np.eye(3), "w"), Parameter(np.zeros(3), "b"))
        assert np.array_equal(y.data, x)

    def test_linear_zero_input(self, rng):
        b = rng.standard_normal(4)
        y = nx.linear(np.zeros((3, 2)), Parameter(rng.standard_normal((4, 2)), "w"), Parameter(b, "b"))
        assert np.allclose(y.data, np.tile(b, (3, 1)))

    def test_layer_norm_constant_row(self, rng):
        b = rng.standard_normal(4)
        y = nx.layer_norm(Tensor(np.full((2, 4), 3.0)), Parameter(rng.standard_normal(4), "g"), Parameter(b, "b"))
        assert np.allclose(y.data, np.tile(b, (2, 1)))

    def test_layer_norm_standardized_row(self):
        row = np.array([[-1.0, 1.0, -1.0, 1.0]])
        y = nx.layer_norm(Tensor(row), Parameter(np.ones(4), "g"), Parameter(np.zeros(4), "b"), eps=0.0)
        assert np.allclose(y.data, row, atol=1e-15)

    def test_concat_shapes(self, rng):
        out = nx.concat_cols([rng.standard_normal((3, 2)), rng.standard_normal((3, 5))])
        assert out.shape == (3, 7)

    def test_concat_empty_right(self, rng):
        x = rng.standard_normal((3, 2))
        assert np.array_equal(nx.concat_cols([x, np.zeros((3, 0))]).data, x)


GRAD_CASES = {
    "linear": lambda x, w, b: nx.total(nx.mul(nx.linear(x, w, b), nx.linear(x, w, b))),
    "softmax": lambda x, w, b: nx.total(nx.mul(nx.softmax_rows(nx.linear(x, w, b)), Tensor(np.arange(4.0)))),
    "layer_norm": lambda x, w, b: nx.total(nx.mul(nx.layer_norm(nx.linear(x, w), b, nx.scale(b, -0.5), 1e-5), Tensor(np.arange(12.0).reshape(3, 4)))),
    "concat": lambda x, w, b: nx.total(nx.mul(nx.concat_cols([x, nx.linear(x, w, b)]),
                                              Tensor(np.linspace(-1, 1, 24).reshape(3, 8)))),
    "relu_max": lambda x, w, b: nx.total(nx.max_axis(nx.relu(nx.linear(x, w, b)), 0)),
    "mean_sum": lambda x, w, b: nx.total(nx.mul(nx.mean_axis(nx.linear(x, w, b), 0), nx.sum_axis(x, 0))),
    "transpose_reshape": lambda x, w, b: nx.total(nx.mul(nx.reshape(nx.transpose(nx.linear(x, w, b)), (2, 6)),
                                                         Tensor(np.arange(12.0).reshape(2, 6)))),
    "gather": lambda x, w, b: nx.total(nx.mul(nx.gather_rows(nx.linear(x, w, b), np.array([2, 0])),
                                              Tensor(np.arange(8.0).reshape(2, 4)))),
    "xent": lambda x, w, b: nx.softmax_cross_entropy(nx.linear(x, w, b), np.array([0, 3, 1])),
    "nll": lambda x, w, b: nx.nll_from_probs(nx.softmax_rows(nx.linear(x, w, b)), np.array([0, 3, 1])),
}


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_gradients_match_central_differences(case):
    rng = np.random.default_rng(7)
    x = Parameter(rng.standard_normal((3, 4)), "x")
    w = Parameter(rng.standard_normal((4, 4)), "w")
    b = Parameter(rng.standard_normal(4), "b")
    fn = GRAD_CASES[case]
    report = finite_diff_check(lambda: fn(x, w, b), [x, w, b], tolerance=1e-4, n_coords=100, step=1e-5)
    assert report.passed, report


def test_batched_matmul_gradient():
    rng = np.random.default_rng(3)
    a = Parameter(rng.standard_normal((2, 3, 4)), "a")
    b = Parameter(rng.standard_normal((2, 4, 5)), "b")
    w = Parameter(rng.standard_normal((5, 2)), "w")
    def loss():
        y = nx.matmul(nx.matmul(a, b), w)
        return nx.total(nx.mul(y, y))

    report = finite_diff_check(loss, [a, b, w], tolerance=1e-4, n_coords=100)
    assert report.passed, report


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = param(rng, 3, 2)
        backward(nx.total(w))
        assert np.array_equal(w.grad, np.ones((3, 2)))

    def test_quadratic_analytic(self, rng):
        x = rng.standard_normal((5, 3))
        w = param(rng, 3, 2)
        xw = nx.matmul(x, w)
        backward(nx.total(nx.mul(xw, xw)))
        assert np.allclose(w.grad, 2 * x.T @ (x @ w.data), atol=1e-12)

    def test_two_linear_chain(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((6, 4))
        w1, b1 = param(rng, 5, 4, name="w1"), param(rng, 5, name="b1")
        w2, b2 = param(rng, 2, 5, name="w2"), param(rng, 2, name="b2")
        fn = lambda: nx.softmax_cross_entropy(nx.linear(nx.relu(nx.linear(x, w1, b1)), w2, b2), np.arange(6) % 2)
        report = finite_diff_check(fn, [w1, b1, w2, b2], tolerance=1e-6)
        assert report.passed, report

    def test_unreached_param_keeps_zero_grad(self, rng):
        used, unused = param(rng, 2, name="u"), param(rng, 2, name="v")
        backward(nx.total(used))
        assert np.array_equal(unused.grad, np.zeros(2))

    def test_backward_without_record(self):
        with pytest.raises(RuntimeError):
            backward(Tensor(np.array(1.0)))

    def test_deterministic(self):
        grads = []
        for _ in range(2):
            rng = np.random.default_rng(0)
            w = param(rng, 4, 4)
            x = rng.standard_normal((8, 4))
            backward(nx.total(nx.softmax_rows(nx.linear(x, w))))
            grads.append(w.grad.tobytes())
        assert grads[0] == grads[1]

    def test_shared_subexpression_accumulates(self, rng):
        w = param(rng, 3)
        y = nx.mul(w, w)
        backward(nx.total(nx.add(y, y)))
        assert np.allclose(w.grad, 4 * w.data)

    def test_nan_is_error(self):
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            nx.scale(Tensor(np.array([1e308])), 1e10)


class TestGradCheck:
    def test_linear_passes_tight(self, rng):
        x = rng.standard_normal((4, 3))
        w = param(rng, 2, 3)
        report = finite_diff_check(lambda: nx.total(nx.linear(x, w)), [w], tolerance=1e-6)
        assert report.passed and report.n_checked == 6

    def test_corrupted_backward_fails(self, rng):
        x = rng.standard_normal((4, 3))
        w = param(rng, 2, 3)

        def broken():
            y = nx.linear(x, w)
            out = nx.total(nx.mul(y, y))
            original = out._node.backward_fn
            out._node.backward_fn = lambda g: tuple(1.5 * gi for gi in original(g))
            return out

        assert not finite_diff_check(broken, [w], tolerance=1e-4).passed


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
    save_checkpoint(tmp_path / "m.ckpt", tensors, {"epoch": 3})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["epoch"] == 3
    assert np.array_equal(back["w"], tensors["w"])
    assert np.array_equal(back["b"], tensors["b"][None, :])


def test_checkpoint_layout(tmp_path):
    import json
    import struct

    save_checkpoint(tmp_path / "m.ckpt", {"a": np.array([[1.0, 2.0]]), "b": np.array([[3.0]])})
    blob = (tmp_path / "m.ckpt").read_bytes()
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + hlen])
    assert header["version"] == VERSION == "alter-ckpt-1"
    assert header["tensors"] == [
        {"name": "a", "rows": 1, "cols": 2, "offset": 0},
        {"name": "b", "rows": 1, "cols": 1, "offset": 16},
    ]
    assert struct.unpack("<3d", blob[8 + hlen :]) == (1.0, 2.0, 3.0)


def test_checkpoint_rejects_other_version(tmp_path):
    import json
    import struct

    header = json.dumps({"version": "other", "tensors": []}).encode()
    (tmp_path / "bad.ckpt").write_bytes(struct.pack("<Q", len(header)) + header)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
