import threading

import numpy as np
import pytest

from p3tl import tensor as ts
from p3tl.tensor import (
    CheckReport,
    DomainError,
    ShapeMismatch,
    Tape,
    Tensor,
    backward,
    grad_check,
)


def t64(values, requires_grad=True):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


class TestForwardOps:
    def test_matmul_identity(self):
        a = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
        eye = Tensor(np.eye(3))
        out = ts.matmul(eye, a)
        np.testing.assert_array_equal(out.values, a.values)

    def test_relu(self):
        out = ts.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.values, [0.0, 0.0, 2.0])

    def test_logsumexp_no_overflow(self):
        out = ts.logsumexp(t64([1000.0, 1000.0], requires_grad=False), axis=0)
        # shifted-exponent oracle: m + log(sum(exp(x - m)))
        assert out.item() == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)

    def test_logsumexp_matches_naive_small_magnitudes(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.uniform(-20, 20, size=(5, 7))
            ours = ts.logsumexp(t64(x, requires_grad=False), axis=1).values
            naive = np.log(np.sum(np.exp(x), axis=1))
            np.testing.assert_allclose(ours, naive, atol=1e-12)

    def test_logsumexp_finite_at_huge_magnitudes(self):
        x = np.array([[1e4, -1e4, 500.0]])
        out = ts.logsumexp(t64(x, requires_grad=False), axis=1)
        assert np.isfinite(out.values).all()

    def test_max_tie_routes_to_lowest_index(self):
        x = t64([[1.0, 3.0, 3.0]])
        with Tape():
            out = ts.tsum(ts.tmax(x, axis=1))
            backward(out)
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_gather_rows(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
        out = ts.gather_rows(x, np.array([2, 0, 2]))
        np.testing.assert_array_equal(out.values, x.values[[2, 0, 2]])

    def test_l2_normalize_rows_unit(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(6, 5)))
        out = ts.l2_normalize_rows(x)
        np.testing.assert_allclose(np.linalg.norm(out.values, axis=1), 1.0, atol=1e-6)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(16, 16))
        b = rng.normal(size=(16, 16))
        r1 = ts.matmul(Tensor(a), Tensor(b)).values
        r2 = ts.matmul(Tensor(a), Tensor(b)).values
        assert np.array_equal(r1, r2)


class TestErrors:
    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeMismatch, match=r"add.*\(2,\).*\(3,\)"):
            ts.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch, match="matmul"):
            ts.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ts.log(Tensor([1.0, 0.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            ts.div(Tensor([1.0]), Tensor([0.0]))

    def test_backward_rejects_non_scalar(self):
        x = t64([1.0, 2.0])
        with Tape():
            y = ts.mul(x, x)
            with pytest.raises(ShapeMismatch):
                backward(y)


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = t64([1.0, 2.0, 3.0])
        with Tape():
            out = ts.tsum(ts.mul(x, x))
            backward(out)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_repeated_backward_accumulates(self):
        x = t64([1.0, 2.0, 3.0])
        with Tape():
            out = ts.tsum(ts.mul(x, x))
            backward(out)
            backward(out)
        np.testing.assert_allclose(x.grad, [4.0, 8.0, 12.0])

    def test_two_class_linear_cross_entropy_matches_fd(self):
        rng = np.random.default_rng(3)
        w = t64(rng.normal(size=(4, 2)))
        b = t64(rng.normal(size=(2,)))
        x = np.asarray(rng.normal(size=(1, 4)))

        def loss(w_, b_):
            logits = ts.add_bias(ts.matmul(Tensor(x, dtype=np.float64), w_), b_)
            lse = ts.logsumexp(logits, axis=1)
            picked = ts.tsum(ts.mul(logits, Tensor([[1.0, 0.0]], dtype=np.float64)), axis=1)
            return ts.tmean(ts.sub(lse, picked))

        report = grad_check(loss, [w, b], step=1e-4, tolerance=1e-5)
        assert report.passed, report.details

    def test_fanout_accumulates_into_intermediate(self):
        x = t64([2.0])
        with Tape():
            y = ts.mul(x, x)  # used twice below
            out = ts.tsum(ts.add(y, y))
            backward(out)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_no_tape_records_nothing(self):
        x = t64([1.0])
        y = ts.mul(x, x)
        assert not y.requires_grad

    def test_tape_confined_to_thread(self):
        seen = {}

        def worker():
            seen["tape"] = ts.active_tape()

        with Tape():
            th = threading.Thread(target=worker)
            th.start()
            th.join()
        assert seen["tape"] is None


def _random_points(rng, shape, low=0.5, high=2.0):
    return t64(rng.uniform(low, high, size=shape))


# One entry per differentiable primitive: (name, builder) where builder returns
# (fn, points) with fn scalar-valued. Points are chosen inside each op's domain
# and away from max/tie boundaries.
def _op_cases(rng):
    a = _random_points(rng, (3, 4))
    b = _random_points(rng, (3, 4))
    m1 = _random_points(rng, (3, 4))
    m2 = _random_points(rng, (4, 2))
    bm1 = _random_points(rng, (2, 3, 4))
    bm2 = _random_points(rng, (2, 4, 3))
    signed = t64(rng.uniform(-2, 2, size=(3, 4)) + 0.1)
    vec = _random_points(rng, (4,))
    rows = t64(rng.normal(size=(5, 3)) + 0.05)
    idx = rng.integers(0, 3, size=7)
    return [
        ("add", lambda *_: ts.tsum(ts.mul(ts.add(a, b), ts.add(a, b))), [a, b]),
        ("sub", lambda *_: ts.tsum(ts.mul(ts.sub(a, b), ts.sub(a, b))), [a, b]),
        ("mul", lambda *_: ts.tsum(ts.mul(a, b)), [a, b]),
        ("div", lambda *_: ts.tsum(ts.div(a, b)), [a, b]),
        ("neg", lambda *_: ts.tsum(ts.mul(ts.neg(a), b)), [a, b]),
        ("scalar_ops", lambda *_: ts.tsum(ts.add(ts.mul(a, 3.0), 1.5)), [a]),
        ("power", lambda *_: ts.tsum(ts.power(a, 2.5)), [a]),
        ("relu", lambda *_: ts.tsum(ts.mul(ts.relu(signed), ts.relu(signed))), [signed]),
        ("exp", lambda *_: ts.tsum(ts.exp(ts.mul(a, 0.5))), [a]),
        ("log", lambda *_: ts.tsum(ts.log(a)), [a]),
        ("sqrt", lambda *_: ts.tsum(ts.sqrt(a)), [a]),
        ("abs", lambda *_: ts.tsum(ts.absolute(signed)), [signed]),
        ("matmul", lambda *_: ts.tsum(ts.matmul(m1, m2)), [m1, m2]),
        ("bmm", lambda *_: ts.tsum(ts.bmm(bm1, bm2)), [bm1, bm2]),
        ("sum_axis", lambda *_: ts.tsum(ts.mul(ts.tsum(a, axis=1), ts.tsum(b, axis=1))), [a, b]),
        ("mean_axis", lambda *_: ts.tsum(ts.mul(ts.tmean(a, axis=0), ts.tmean(b, axis=0))), [a, b]),
        ("max_axis", lambda *_: ts.tsum(ts.tmax(a, axis=1)), [a]),
        ("gather_rows", lambda *_: ts.tsum(ts.mul(ts.gather_rows(rows, idx), ts.gather_rows(rows, idx))), [rows]),
        ("concat", lambda *_: ts.tsum(ts.mul(ts.concat([a, b], axis=0), ts.concat([b, a], axis=0))), [a, b]),
        ("l2_normalize", lambda *_: ts.tsum(ts.mul(ts.l2_normalize_rows(rows), ts.gather_rows(rows, np.arange(5)))), [rows]),
        ("logsumexp", lambda *_: ts.tsum(ts.logsumexp(a, axis=1)), [a]),
        ("transpose", lambda *_: ts.tsum(ts.matmul(ts.transpose(m1), m1)), [m1]),
        ("reshape", lambda *_: ts.tsum(ts.mul(ts.reshape(a, (4, 3)), ts.reshape(b, (4, 3)))), [a, b]),
        ("add_bias", lambda *_: ts.tsum(ts.mul(ts.add_bias(a, vec), ts.add_bias(b, vec))), [a, b, vec]),
    ]


class TestGradCheckSuite:
    def test_sum_of_squares_tiny_error(self):
        rng = np.random.default_rng(4)
        x = t64(rng.normal(size=(6,)))
        report = grad_check(lambda p: ts.tsum(ts.mul(p, p)), [x], step=1e-6, tolerance=1e-8)
        assert report.passed

    @pytest.mark.parametrize("trial", range(10))
    def test_every_op_passes_fd_check(self, trial):
        rng = np.random.default_rng(100 + trial)
        for name, fn, points in _op_cases(rng):
            report = grad_check(fn, points, step=1e-6, tolerance=1e-5)
            assert report.passed, f"{name}: max_rel_error={report.max_rel_error:.3g} {report.details}"

    def test_non_finite_reported_as_failure(self):
        x = t64([1e-9])
        report = grad_check(lambda p: ts.tsum(ts.log(p)), [x], step=1e-6, tolerance=1e-5)
        assert not report.passed
        assert report.failure is not None

    def test_report_type(self):
        x = t64([1.0])
        report = grad_check(lambda p: ts.tsum(ts.mul(p, p)), [x])
        assert isinstance(report, CheckReport)
        assert report.max_rel_error <= report.tolerance
