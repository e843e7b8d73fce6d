"""Tensor op semantics, oracle comparisons, and the gradient checker."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latsep.errors import DimensionError, GradCheckError
from latsep.numerics import (RunningStats, Tensor, grad_check, no_grad, ops)

from oracles import naive_conv2d, naive_linear

RNG_SEEDS = range(10)


def rand(rng, *shape):
    return rng.standard_normal(shape)


def bounded_away(rng, *shape, margin=0.2):
    """Values with |x| >= margin: keeps finite differences off the ReLU hinge."""
    return (rng.uniform(margin, 1.2, size=shape)
            * rng.choice([-1.0, 1.0], size=shape))


# ---------------------------------------------------------------------------
# linear

class TestLinear:
    def test_identity(self):
        y = ops.linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        assert np.array_equal(y.data, [1.0, 2.0])

    def test_hand_case(self):
        y = ops.linear(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]),
                       Tensor([10.0, 20.0]))
        assert np.allclose(y.data, [14.0, 26.0])

    def test_zero_weight_broadcasts_bias(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
        b = np.array([1.5, -2.0])
        y = ops.linear(x, Tensor(np.zeros((3, 2))), Tensor(b))
        assert np.array_equal(y.data, np.broadcast_to(b, (4, 2)))

    def test_shape_mismatch_names_operand(self):
        with pytest.raises(DimensionError, match="'x'"):
            ops.linear(Tensor(np.ones(3)), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))

    @pytest.mark.parametrize("seed", RNG_SEEDS)
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rand(rng, 5, 5), rand(rng, 5, 5), rand(rng, 5)
        got = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.abs(got - naive_linear(x, w, b)).max() < 1e-10


# ---------------------------------------------------------------------------
# conv2d / transposed_conv2d

class TestConv2d:
    def test_one_by_one_identity_is_exact(self):
        x = np.random.default_rng(1).standard_normal((1, 6, 7))
        y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        assert np.array_equal(y.data, x)

    def test_hand_sum(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        y = ops.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
        assert y.data.shape == (1, 1, 1) and y.data[0, 0, 0] == 10.0

    def test_stride_shape_arithmetic(self):
        x = Tensor(np.zeros((1, 4, 4)))
        y = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)),
                       stride=(2, 2))
        assert y.data.shape == (1, 2, 2)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError, match="larger than padded"):
            ops.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))),
                       Tensor(np.zeros(1)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channels"):
            ops.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.ones((1, 2, 1, 1))),
                       Tensor(np.zeros(1)))

    @pytest.mark.parametrize("seed", RNG_SEEDS)
    @pytest.mark.parametrize("stride,padding", [((1, 1), (0, 0)), ((2, 1), (1, 1)),
                                                ((2, 2), (1, 0))])
    def test_matches_naive_oracle(self, seed, stride, padding):
        rng = np.random.default_rng(seed)
        x = rand(rng, 2, 5, 5)
        k = rand(rng, 3, 2, 3, 3)
        b = rand(rng, 3)
        got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding).data
        assert np.abs(got - naive_conv2d(x, k, b, stride, padding)).max() < 1e-10


class TestTransposedConv2d:
    def test_one_by_one_identity(self):
        x = np.random.default_rng(2).standard_normal((1, 3, 4))
        y = ops.transposed_conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))),
                                  Tensor(np.zeros(1)))
        assert np.array_equal(y.data, x)

    def test_upsample_shape(self):
        y = ops.transposed_conv2d(Tensor(np.zeros((1, 2, 2))),
                                  Tensor(np.ones((1, 1, 2, 2))),
                                  Tensor(np.zeros(1)), stride=(2, 2))
        assert y.data.shape == (1, 4, 4)

    def test_single_pixel_stamps_kernel(self):
        k = np.arange(4.0).reshape(1, 1, 2, 2)
        y = ops.transposed_conv2d(Tensor(np.array([[[3.0]]])), Tensor(k),
                                  Tensor(np.zeros(1)), stride=(1, 1))
        assert np.array_equal(y.data[0], 3.0 * k[0, 0])

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_of_conv2d(self, seed):
        # <conv(x), y> == <x, tconv(y)> characterizes gradient-of-conv semantics;
        # the conv kernel [Co, Ci, kF, kT] reads directly as a tconv kernel
        # [C_in=Co, C_out=Ci, kF, kT].
        rng = np.random.default_rng(seed)
        x = rand(rng, 2, 6, 5)
        k = rand(rng, 3, 2, 3, 2)
        y_shape = ops.conv2d(Tensor(x), Tensor(k), None, (2, 2)).data.shape
        y = rand(rng, *y_shape)
        lhs = np.sum(ops.conv2d(Tensor(x), Tensor(k), None, (2, 2)).data * y)
        back = ops.transposed_conv2d(Tensor(y), Tensor(k), None, (2, 2)).data
        embedded = np.zeros_like(x)
        embedded[:, :back.shape[1], :back.shape[2]] = back
        assert abs(lhs - np.sum(x * embedded)) < 1e-9


# ---------------------------------------------------------------------------
# batch norm, relu, softmax

class TestBatchNorm:
    def test_eval_with_init_stats_keeps_constant(self):
        x = Tensor(np.full((3, 4, 5), 2.5))
        stats = RunningStats(3, dtype=np.float64)
        y = ops.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats,
                           training=False, axis=-3)
        assert np.allclose(y.data, 2.5, rtol=1e-4)

    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 8, 9)) * 3 + 1)
        stats = RunningStats(4, dtype=np.float64)
        y = ops.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), stats,
                           training=True, axis=-3).data
        assert np.abs(y.mean(axis=(1, 2))).max() < 1e-6
        assert np.abs(y.var(axis=(1, 2)) - 1.0).max() < 1e-3

    def test_zero_scale_gives_shift(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 3, 4)))
        stats = RunningStats(2, dtype=np.float64)
        y = ops.batch_norm(x, Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)), stats,
                           training=True, axis=-3)
        assert np.array_equal(y.data, np.full((2, 3, 4), 5.0))

    def test_running_stats_update(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 10, 10)) + 2.0
        stats = RunningStats(3, dtype=np.float64)
        ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), stats,
                       training=True, momentum=0.1, axis=-3)
        expect = 0.9 * 0.0 + 0.1 * x.mean(axis=(1, 2))
        assert np.allclose(stats.mean, expect)


class TestActivations:
    def test_relu(self):
        y = ops.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(y.data, [0.0, 0.0, 2.0])

    def test_softmax_symmetry(self):
        assert np.allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_overflow_safe(self):
        y = ops.softmax(Tensor([1000.0, 1000.0])).data
        assert np.isfinite(y).all() and np.allclose(y, [0.5, 0.5])

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=16))
    def test_softmax_sums_to_one(self, values):
        y = ops.softmax(Tensor(np.array(values, dtype=np.float64))).data
        assert (y > 0).all() or np.allclose(y[y <= 0], 0.0)
        assert abs(y.sum() - 1.0) < 1e-6

    @settings(deadline=None, max_examples=30)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8),
           st.floats(min_value=-100, max_value=100))
    def test_softmax_shift_invariance(self, values, shift):
        a = ops.softmax(Tensor(np.array(values))).data
        b = ops.softmax(Tensor(np.array(values) + shift)).data
        assert np.allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------------------
# gradient checker

class TestGradCheck:
    def test_quadratic_is_machine_exact(self):
        p = Tensor(np.random.default_rng(0).standard_normal(9), requires_grad=True)
        rep = grad_check(lambda: ops.sum_(ops.mul(p, p)), [("p", p)], h=1e-4, tol=1e-8)
        assert rep.passed and rep.max_rel_err < 1e-8

    def test_constant_function_zero_both_ways(self):
        p = Tensor(np.ones(4), requires_grad=True)
        c = Tensor(np.array(7.0))
        rep = grad_check(lambda: ops.mul(c, c), [("p", p)], h=1e-4, tol=1e-8)
        assert rep.passed and rep.max_rel_err < 1e-8

    def test_nonfinite_failure_names_parameter(self):
        p = Tensor(np.array([1.0]), requires_grad=True)

        def f():
            return ops.div(ops.sum_(p), ops.sub(ops.sum_(p), 1.0))

        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(GradCheckError, match="non-finite"):
                grad_check(f, [("p", p)], h=1e-4, tol=1e-4)

    def test_lightsaft_block_mse(self):
        from latsep.blocks import SaftBlock, SaftSpec, TfcSpec
        from latsep.blocks import make_query
        from latsep.train import mse_loss

        rng = np.random.default_rng(7)
        blk = SaftBlock(TfcSpec(2, 2, 1), SaftSpec("lightsaft", 8, 4, 2, 4),
                        rng, dtype=np.float64)
        from latsep.blocks import ConditionEmbedding
        emb = ConditionEmbedding(2, 4, rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 8, 4)))
        target = Tensor(rng.standard_normal((2, 8, 4)))
        params = list(blk.named_parameters()) + list(emb.named_parameters())
        rep = grad_check(
            lambda: mse_loss(blk(x, make_query(0, emb)), target),
            params, h=1e-4, tol=1e-4)
        assert rep.passed, rep.summary()


def _gradcheck_case(name, seed):
    """Build (f, params) for one op; inputs double precision."""
    rng = np.random.default_rng(seed)
    if name == "linear":
        x = Tensor(rand(rng, 3, 5), requires_grad=True)
        w = Tensor(rand(rng, 5, 4), requires_grad=True)
        b = Tensor(rand(rng, 4), requires_grad=True)
        return (lambda: ops.mean(ops.mul(ops.linear(x, w, b), ops.linear(x, w, b))),
                [("x", x), ("w", w), ("b", b)])
    if name == "conv2d":
        x = Tensor(rand(rng, 2, 6, 5), requires_grad=True)
        k = Tensor(rand(rng, 3, 2, 3, 3) * 0.5, requires_grad=True)
        b = Tensor(rand(rng, 3), requires_grad=True)
        return (lambda: ops.mean(ops.mul(ops.conv2d(x, k, b, (2, 1), (1, 1)),
                                         ops.conv2d(x, k, b, (2, 1), (1, 1)))),
                [("x", x), ("k", k), ("b", b)])
    if name == "transposed_conv2d":
        x = Tensor(rand(rng, 3, 4, 3), requires_grad=True)
        k = Tensor(rand(rng, 3, 2, 2, 2) * 0.5, requires_grad=True)
        b = Tensor(rand(rng, 2), requires_grad=True)
        return (lambda: ops.mean(ops.mul(ops.transposed_conv2d(x, k, b, (2, 2)),
                                         ops.transposed_conv2d(x, k, b, (2, 2)))),
                [("x", x), ("k", k), ("b", b)])
    if name in ("batch_norm_train", "batch_norm_eval"):
        x = Tensor(rand(rng, 3, 4, 5), requires_grad=True)
        sc = Tensor(rand(rng, 3) + 1.5, requires_grad=True)
        sh = Tensor(rand(rng, 3), requires_grad=True)
        stats = RunningStats(3, dtype=np.float64)
        stats.update(rand(rng, 3), np.abs(rand(rng, 3)) + 0.5, 1.0)
        training = name.endswith("train")
        return (lambda: ops.mean(ops.mul(
            ops.batch_norm(x, sc, sh, stats, training, axis=-3),
            ops.batch_norm(x, sc, sh, stats, training, axis=-3))),
            [("x", x), ("scale", sc), ("shift", sh)])
    if name == "relu":
        x = Tensor(bounded_away(rng, 4, 6), requires_grad=True)
        return (lambda: ops.mean(ops.mul(ops.relu(x), ops.relu(x))), [("x", x)])
    if name == "softmax":
        x = Tensor(rand(rng, 3, 6), requires_grad=True)
        w = Tensor(rand(rng, 3, 6), requires_grad=False)
        return (lambda: ops.mean(ops.mul(ops.softmax(x, axis=-1), w)), [("x", x)])
    raise AssertionError(name)


OP_NAMES = ["linear", "conv2d", "transposed_conv2d", "batch_norm_train",
             "batch_norm_eval", "relu", "softmax"]


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_every_op_passes_grad_check(name, seed):
    f, params = _gradcheck_case(name, seed)
    rep = grad_check(f, params, h=1e-4, tol=1e-4)
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------------------
# structural ops that back the blocks

class TestStructuralOps:
    def test_concat_stack_grads(self):
        rng = np.random.default_rng(0)
        a = Tensor(rand(rng, 2, 3), requires_grad=True)
        b = Tensor(rand(rng, 2, 3), requires_grad=True)

        def f():
            s = ops.stack([a, b], axis=0)
            c = ops.concat([a, b], axis=-1)
            return ops.add(ops.mean(ops.mul(s, s)), ops.mean(ops.mul(c, c)))

        rep = grad_check(f, [("a", a), ("b", b)], h=1e-4, tol=1e-6)
        assert rep.passed

    def test_take_rows_gradient_hits_only_looked_up_row(self):
        table = Tensor(np.random.default_rng(0).standard_normal((5, 3)),
                       requires_grad=True)
        y = ops.sum_(ops.take_rows(table, [2]))
        y.backward()
        assert np.array_equal(table.grad[2], np.ones(3))
        mask = np.ones(5, dtype=bool)
        mask[2] = False
        assert np.array_equal(table.grad[mask], np.zeros((4, 3)))

    def test_pad_crop_roundtrip(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
        padded = ops.pad2d(x, (0, 2), (0, 1))
        assert padded.data.shape == (2, 5, 5)
        assert np.array_equal(ops.crop2d(padded, 3, 4).data, x.data)

    def test_latent_mix_matches_einsum(self):
        rng = np.random.default_rng(3)
        w = Tensor(rand(rng, 4))
        v = Tensor(rand(rng, 4, 2, 3))
        got = ops.latent_mix(w, v).data
        assert np.allclose(got, np.einsum("s,scf->cf", w.data, v.data))

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = ops.mul(x, x)
        assert y._vjp is None and not y.requires_grad
