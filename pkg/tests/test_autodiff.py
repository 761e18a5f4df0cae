import numpy as np
import pytest

from mocaps import autodiff as ad
from mocaps.autodiff import (
    Tape, TapeError, UnsupportedOpError, backward, finite_difference, grad_check, record,
    relative_error,
)
from mocaps.bench.ledger import MemoryLedger
from mocaps.capsnn import capsule_layer, conv_stem, primary_capsules, squash
from mocaps.tensor import RngState, normal_init


def rand(shape, seed=0, scale=1.0):
    return normal_init(shape, 0.0, scale, RngState(seed))


# scalar-valued compositions exercising each primitive; FD oracle on 20 random points
PRIMITIVE_CASES = {
    "add": lambda a, b: ad.sum_(ad.mul(ad.add(a, b), b)),
    "sub": lambda a, b: ad.sum_(ad.square(ad.sub(a, b))),
    "mul": lambda a, b: ad.sum_(ad.mul(a, b)),
    "scale": lambda a, b: ad.sum_(ad.mul(ad.scale(a, -2.5), b)),
    "add_scalar": lambda a, b: ad.sum_(ad.square(ad.add_scalar(a, 0.3))),
    "matmul": lambda a, b: ad.sum_(ad.square(ad.matmul(a, ad.transpose(b, (1, 0))))),
    "add_bias": lambda a, b: ad.sum_(ad.square(ad.add_bias(a, ad.sum_(b, axis=0)))),
    "mean": lambda a, b: ad.mean(ad.square(ad.mul(a, b))),
    "sum_axis": lambda a, b: ad.sum_(ad.square(ad.sum_(ad.mul(a, b), axis=1))),
    "reshape": lambda a, b: ad.sum_(ad.mul(ad.reshape(a, (-1,)), ad.reshape(b, (-1,)))),
    "relu": lambda a, b: ad.sum_(ad.mul(ad.relu(a), b)),
    "sigmoid": lambda a, b: ad.sum_(ad.mul(ad.sigmoid(a), b)),
    "softmax": lambda a, b: ad.sum_(ad.mul(ad.softmax(a, axis=1), b)),
    "l2norm": lambda a, b: ad.sum_(ad.mul(ad.l2norm(a), ad.sum_(b, axis=1))),
}


class TestPrimitiveVJPs:
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_against_finite_differences(self, name):
        f = PRIMITIVE_CASES[name]
        a, b = rand((4, 5), 1), rand((4, 5), 2)
        report = grad_check(f, {"a": a, "b": b}, tolerance=1e-6, max_entries=20, rng=RngState(9))
        assert report.passed, report.max_rel_error


class TestRecord:
    def test_identity_passes_upstream_through(self):
        x = rand((3, 2))
        _, tape = record(lambda t: ad.scale(t, 1.0), x)
        g = rand((3, 2), 5)
        (gx,), _ = backward(tape, g)
        np.testing.assert_array_equal(gx, g)

    def test_scale_three(self):
        x = rand((3, 2))
        _, tape = record(lambda t: ad.scale(t, 3.0), x)
        g = rand((3, 2), 5)
        (gx,), _ = backward(tape, g)
        np.testing.assert_allclose(gx, 3 * g, rtol=0, atol=0)

    def test_unregistered_primitive_raises(self):
        tape = Tape()
        with tape:
            x = tape.leaf(np.ones(3))
            with pytest.raises(UnsupportedOpError):
                ad.emit("cube_root", np.ones(3), (x,))

    def test_capsule_layer_gradient(self):
        u = squash(rand((2, 3, 4), 3))
        W = rand((3, 2, 4, 4), 4, 0.5)
        report = grad_check(lambda u, W: ad.sum_(ad.mul(capsule_layer(u, W), np.ones((2, 2, 4)) * 0.3)),
                            {"u": u, "W": W}, tolerance=1e-4)
        assert report.passed, report.max_rel_error

    def test_second_backward_raises(self):
        _, tape = record(lambda t: ad.sum_(t), np.ones(3))
        backward(tape, np.ones(()))
        with pytest.raises(TapeError):
            backward(tape, np.ones(()))


class TestBackward:
    def test_zero_upstream(self):
        x, w = rand((2, 3)), rand((3, 4), 1)
        _, tape = record(lambda x, w: ad.relu(ad.matmul(x, w)), x, params={"w": w})
        (gx,), grads = backward(tape, np.zeros((2, 4)))
        assert not gx.any() and not grads["w"].any()

    def test_sum_gives_ones(self):
        x = rand((3, 5))
        _, tape = record(ad.sum_, x)
        (gx,), _ = backward(tape, np.ones(()))
        np.testing.assert_array_equal(gx, np.ones((3, 5)))

    def test_conv_capsule_loss_composite(self):
        img = rand((1, 1, 8, 8), 11)
        params = {"ws": rand((2, 1, 3, 3), 12, 0.5), "bs": rand((2,), 13, 0.1),
                  "wp": rand((4, 2, 3, 3), 14, 0.5), "bp": rand((4,), 15, 0.1),
                  "W": rand((8, 2, 3, 2), 16, 0.5)}

        def f(ws, bs, wp, bp, W):
            feats = conv_stem(img, ws, bs)
            caps = primary_capsules(feats, wp, bp, capsule_dim=2, stride=2)
            out = capsule_layer(caps, W)
            return ad.sum_(ad.square(ad.l2norm(out)))

        report = grad_check(f, params, tolerance=1e-4)
        assert report.passed, report.max_rel_error

    def test_fan_out_accumulates(self):
        x = rand((4,))
        _, tape = record(lambda t: ad.sum_(ad.add(ad.mul(t, t), t)), x)
        (gx,), _ = backward(tape, np.ones(()))
        np.testing.assert_allclose(gx, 2 * x + 1, atol=1e-15)


class TestGradCheck:
    def test_linear_is_machine_precision(self):
        w = rand((5,), 3)
        report = grad_check(lambda x: ad.sum_(ad.mul(x, w)), {"x": rand((5,))})
        assert report.worst < 1e-8

    def test_squash_random_point(self):
        report = grad_check(lambda s: ad.sum_(ad.mul(squash(s), np.arange(6.0).reshape(2, 3))),
                            {"s": rand((2, 3), 7)})
        assert report.passed

    def test_squash_zero_vector_warns(self):
        report = grad_check(lambda s: ad.sum_(squash(s)), {"s": np.zeros((1, 3))})
        assert any("non-differentiable" in w or "nondifferentiable" in w for w in report.warnings)

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: ad.scale(x, 2.0), {"x": np.ones(3)})

    def test_relative_error(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
        assert relative_error(np.zeros(3), np.zeros(3)) == 0

    def test_finite_difference_subset(self):
        fd = finite_difference(lambda x: float((x ** 2).sum()), {"x": np.arange(4.0)}, "x", indices=[1])
        assert np.isnan(fd[0]) and fd[1] == pytest.approx(2.0)


class TestLedgerIntegration:
    def test_release_returns_to_baseline(self):
        ledger = MemoryLedger()
        x, w = rand((8, 16)), rand((16, 16), 1)
        _, tape = record(lambda x, w: ad.sum_(ad.relu(ad.matmul(x, w))), x, params={"w": w}, ledger=ledger)
        assert ledger.live_bytes > 0
        backward(tape, np.ones(()))
        assert ledger.live_bytes == 0

    def test_release_without_backward(self):
        ledger = MemoryLedger()
        _, tape = record(lambda x: ad.sum_(ad.sigmoid(x)), rand((8, 8)), ledger=ledger)
        tape.release()
        assert ledger.live_bytes == 0 and ledger.held == 0

    def test_no_tape_records_nothing(self):
        tape = Tape()
        with tape:
            x = tape.leaf(np.ones(3))
            with ad.no_tape():
                y = ad.scale(np.ones(3), 2.0)
            assert not isinstance(y, ad.Var)
            assert isinstance(ad.scale(x, 2.0), ad.Var)
