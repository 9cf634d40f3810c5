"""Unit tests for the differentiable array engine."""
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import cognatekit.numerics as nm
from cognatekit.numerics import (CheckpointError, NumericError, Parameter,
                                 PreconditionError, Rng, ShapeError, Tensor,
                                 tensor)

finite_floats = st.floats(-5, 5, allow_nan=False, allow_infinity=False,
                          width=32)


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


# ------------------------------------------------------------------ conv1d

class TestConv1d:
    def test_output_length(self):
        # T=7, k=3 -> 5 output positions
        out = nm.conv1d(tensor(rand((7, 2))), tensor(rand((4, 3, 2), 1)),
                        tensor(rand((4,), 2)))
        assert out.shape == (5, 4)

    def test_zero_input_zero_bias(self):
        out = nm.conv1d(tensor(np.zeros((6, 3), np.float32)),
                        tensor(rand((2, 2, 3))),
                        tensor(np.zeros((2,), np.float32)))
        assert np.all(out.data == 0.0)

    def test_k1_identity_filter(self):
        # single width-1 filter == tanh of a per-position projection
        x = rand((5, 3))
        w = rand((1, 1, 3), 7)
        b = rand((1,), 8)
        out = nm.conv1d(tensor(x), tensor(w), tensor(b))
        expect = np.tanh(x @ w[0, 0] + b[0])
        np.testing.assert_allclose(out.data[:, 0], expect, atol=1e-6)

    def test_loop_oracle(self):
        # naive sliding-window double loop as independent oracle
        x, w, b = rand((9, 4)), rand((3, 2, 4), 5), rand((3,), 6)
        out = nm.conv1d(tensor(x), tensor(w), tensor(b))
        for f in range(3):
            for j in range(8):
                window = x[j:j + 2]
                expect = math.tanh(float((window * w[f]).sum()) + float(b[f]))
                assert abs(float(out.data[j, f]) - expect) < 1e-5

    def test_window_shorter_than_filter(self):
        with pytest.raises(PreconditionError):
            nm.conv1d(tensor(rand((2, 3))), tensor(rand((1, 4, 3))),
                      tensor(rand((1,))))

    def test_gradient(self):
        w = tensor(rand((2, 3, 4), 3), requires_grad=True, dtype=np.float64)
        b = tensor(rand((2,), 4), requires_grad=True, dtype=np.float64)
        x = tensor(rand((6, 4), 5), requires_grad=True, dtype=np.float64)
        err = nm.grad_check(lambda: nm.tsum(nm.conv1d(x, w, b)), [w, b, x])
        assert err < 1e-3


# ----------------------------------------------------------------- softmax

class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax_rows(tensor(np.zeros((1, 2), np.float32)))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)

    def test_log2_case(self):
        out = nm.softmax_rows(tensor(np.array([[math.log(2), 0.0]], np.float32)))
        np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3]], atol=1e-6)

    def test_shift_invariance(self):
        # up to float32 rounding of logits + c
        logits = rand((4, 3))
        a = nm.softmax_rows(tensor(logits)).data
        b = nm.softmax_rows(tensor(logits + 100.0)).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    @given(arrays(np.float32, (3, 4), elements=finite_floats))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, logits):
        p = nm.softmax_rows(tensor(logits)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(p > 0) and np.all(p < 1)


# ------------------------------------------------------------------ cosine

class TestCosine:
    def test_self_similarity(self):
        x = tensor(np.array([1.0, -2.0, 0.5], np.float32))
        assert abs(nm.cosine(x, x).item() - 1.0) < 1e-6

    def test_orthogonal(self):
        a = tensor(np.array([1.0, 0.0], np.float32))
        b = tensor(np.array([0.0, 1.0], np.float32))
        assert abs(nm.cosine(a, b).item()) < 1e-7

    def test_collinear(self):
        a = tensor(np.array([1.0, 2.0], np.float32))
        b = tensor(np.array([2.0, 4.0], np.float32))
        assert abs(nm.cosine(a, b).item() - 1.0) < 1e-6

    def test_both_zero_is_neutral(self):
        z = tensor(np.zeros(3, np.float32))
        assert nm.cosine(z, z).item() == 0.0

    @given(arrays(np.float32, (4,), elements=finite_floats),
           arrays(np.float32, (4,), elements=finite_floats))
    @settings(max_examples=50, deadline=None)
    def test_range(self, u, v):
        c = nm.cosine(tensor(u), tensor(v)).item()
        assert -1.0 - 1e-5 <= c <= 1.0 + 1e-5


# --------------------------------------------------------------- mse / kl

class TestLosses:
    def test_mse_equal_inputs(self):
        a = tensor(rand((3, 4)))
        assert nm.mse(a, tensor(a.data.copy())).item() == 0.0

    def test_mse_unit(self):
        a = tensor(np.array([[1.0, 0.0]], np.float32))
        b = tensor(np.zeros((1, 2), np.float32))
        assert abs(nm.mse(a, b).item() - 1.0) < 1e-7

    def test_mse_loop_oracle(self):
        a, b = rand((4, 3)), rand((4, 3), 1)
        got = nm.mse(tensor(a), tensor(b)).item()
        expect = sum((float(a[i, j]) - float(b[i, j])) ** 2
                     for i in range(4) for j in range(3)) / 4
        assert abs(got - expect) < 1e-5

    def test_mse_shape_mismatch(self):
        with pytest.raises((ShapeError, ValueError)):
            nm.mse(tensor(rand((2, 3))), tensor(rand((3, 2))))

    def test_kl_identical(self):
        p = tensor(np.array([[0.3, 0.7], [0.5, 0.5]], np.float32))
        assert abs(nm.kl_div(p, p).item()) < 1e-9

    def test_kl_onehot_vs_uniform(self):
        p = tensor(np.array([[1.0, 0.0]], np.float32))
        q = tensor(np.array([[0.5, 0.5]], np.float32))
        assert abs(nm.kl_div(p, q).item() - math.log(2)) < 1e-6

    def test_kl_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = rng.dirichlet(np.ones(3), size=4).astype(np.float32)
        q = rng.dirichlet(np.ones(3), size=4).astype(np.float32)
        got = nm.kl_div(tensor(p), tensor(q)).item()
        expect = sum(float(p[i, j]) * math.log(float(p[i, j]) / float(q[i, j]))
                     for i in range(4) for j in range(3) if p[i, j] > 0)
        assert abs(got - expect) < 1e-5

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_kl_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(4), size=3).astype(np.float32)
        q = rng.dirichlet(np.ones(4), size=3).astype(np.float32)
        assert nm.kl_div(tensor(p), tensor(q)).item() >= -1e-9


# ---------------------------------------------------------------- backward

class TestBackward:
    def test_mse_scalar_gradient(self):
        # d/dx (x - 0)^2 at x=3 is 6
        x = tensor(np.array([[3.0]], np.float32), requires_grad=True)
        loss = nm.mse(x, tensor(np.zeros((1, 1), np.float32)))
        loss.backward()
        assert abs(float(x.grad[0, 0]) - 6.0) < 1e-6

    def test_softmax_kl_composite(self):
        logits = tensor(rand((2, 2)).astype(np.float64), requires_grad=True)
        target = np.random.default_rng(1).dirichlet(np.ones(2), size=2)

        def loss_fn():
            return nm.kl_div(tensor(target, dtype=np.float64),
                             nm.softmax_rows(logits))

        assert nm.grad_check(loss_fn, [logits]) < 1e-3

    def test_constant_gets_no_grad(self):
        const = tensor(rand((2, 2)))
        w = tensor(rand((2, 2), 1), requires_grad=True)
        nm.tsum(nm.matmul(const, w)).backward()
        assert const.grad is None and w.grad is not None

    def test_broadcast_bias_gradient(self):
        # gradient of a broadcast add is reduced back to the bias shape
        b = tensor(rand((3,)).astype(np.float64), requires_grad=True)
        x = tensor(rand((5, 3), 1).astype(np.float64))
        assert nm.grad_check(lambda: nm.tsum(nm.square(x + b)), [b]) < 1e-3
        assert b.grad.shape == (3,)

    def test_grad_accumulates_across_uses(self):
        x = tensor(np.array(2.0, np.float32), requires_grad=True)
        (x * x).backward()          # d(x^2)/dx = 2x = 4
        assert abs(float(x.grad) - 4.0) < 1e-6

    def test_nan_is_hard_error(self):
        x = tensor(np.array([1e30], np.float32))
        with pytest.raises(NumericError):
            nm.exp(nm.mul(x, x))


# --------------------------------------------------------------- sgd / rng

class TestSgdAndRng:
    def test_basic_step(self):
        p = Parameter("w", tensor(np.array([1.0], np.float32),
                                  requires_grad=True))
        p.value.grad = np.array([1.0], np.float32)
        nm.sgd_step({"w": p}, lr=0.1)
        np.testing.assert_allclose(p.value.data, [0.9], atol=1e-7)
        assert p.value.grad is None  # zeroed afterwards

    def test_decay_schedule(self):
        p = Parameter("w", tensor(np.array([1.0], np.float32),
                                  requires_grad=True))
        p.value.grad = np.array([1.0], np.float32)
        nm.sgd_step({"w": p}, lr=0.1, epoch=1, decay=0.5)
        np.testing.assert_allclose(p.value.data, [0.95], atol=1e-7)

    def test_non_trainable_untouched(self):
        p = Parameter("c", tensor(np.array([1.0], np.float32)), trainable=False)
        nm.sgd_step({"c": p}, lr=0.1)
        np.testing.assert_allclose(p.value.data, [1.0])

    def test_rng_determinism(self):
        a = Rng(42).normal(0, 1, (4, 4))
        b = Rng(42).normal(0, 1, (4, 4))
        assert np.array_equal(a, b)

    def test_rng_seed_sensitivity(self):
        assert not np.array_equal(Rng(1).normal(0, 1, (4,)),
                                  Rng(2).normal(0, 1, (4,)))

    def test_training_step_bit_identical(self):
        def one_run():
            rng = Rng(7)
            p = nm.uniform_param("w", (3, 3), 3, rng)
            x = tensor(rng.normal(0, 1, (2, 3)))
            nm.tsum(nm.square(nm.matmul(x, p.value))).backward()
            nm.sgd_step({"w": p}, lr=0.01)
            return p.value.data.copy()

        assert np.array_equal(one_run(), one_run())


# -------------------------------------------------------------- checkpoint

class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {"b/y": rand((2,), 1), "a/x": rand((3, 4))}
        path = tmp_path / "ck.wscd"
        nm.save_checkpoint(path, arrays)
        back = nm.load_checkpoint(path)
        assert set(back) == set(arrays)
        for k in arrays:
            assert np.array_equal(back[k], arrays[k])

    def test_magic_and_order(self, tmp_path):
        path = tmp_path / "ck.wscd"
        nm.save_checkpoint(path, {"z": rand((1,)), "a": rand((1,), 1)})
        blob = path.read_bytes()
        assert blob[:4] == b"WSCD" and blob[4] == 1
        assert blob.find(b"a") < blob.find(b"z")  # lexicographic name order

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.wscd"
        path.write_bytes(b"NOPE" + b"\x01" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            nm.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "ck.wscd"
        nm.save_checkpoint(path, {"a": rand((8, 8))})
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            nm.load_checkpoint(path)
