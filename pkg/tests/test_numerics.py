import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phenoyield import numerics as nx
from phenoyield.gradsuite import op_suite
from phenoyield.numerics import DegenerateInputError, GradReport, Tensor, grad_check

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_softmax_reference_values():
    out = nx.softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_large_logits_stay_finite():
    out = nx.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(x, shift):
    p = nx.softmax(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        nx.softmax(Tensor(np.zeros((2, 0))))
    with pytest.raises(ValueError):
        nx.softmax(Tensor([1.0, np.nan]))
    with pytest.raises(ValueError):
        nx.softmax(Tensor([-np.inf, -np.inf]))


def test_softmax_masked_entries_get_zero_weight():
    p = nx.softmax(Tensor([0.0, -np.inf, 1.0])).data
    assert p[1] == 0.0
    assert abs(p.sum() - 1) < 1e-15


def test_cosine_similarity_reference():
    out = nx.cosine_similarity(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).item()
    assert abs(out - 11 / (math.sqrt(5) * 5)) < 1e-12
    assert abs(out - 0.98387) < 1e-5


def test_cosine_similarity_zero_vector_raises():
    with pytest.raises(DegenerateInputError):
        nx.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@given(arrays(np.float64, (4,), elements=finite), arrays(np.float64, (4,), elements=finite),
       st.floats(0.1, 10))
def test_cosine_bounded_and_scale_invariant(a, b, scale):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = nx.cosine_similarity(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert abs(nx.cosine_similarity(Tensor(a * scale), Tensor(b)).item() - c) < 1e-10


@given(arrays(np.float64, (3, 7), elements=finite))
def test_layer_norm_zero_mean_unit_variance(x):
    if (x.std(axis=-1) < 1e-2).any():
        return
    y = nx.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-10)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=1e-9)


def test_logsumexp_matches_direct_sum():
    x = np.array([[0.1, -2.0, 3.0], [700.0, 701.0, 699.0]])
    out = nx.logsumexp(Tensor(x), axis=-1).data
    assert abs(out[0] - math.log(np.exp(x[0]).sum())) < 1e-12
    assert abs(out[1] - (701 + math.log(1 + math.exp(-1) + math.exp(-2)))) < 1e-10


def test_backward_accumulates_across_uses():
    x = Tensor([2.0, -1.0], requires_grad=True)
    y = nx.tsum(x * x + x * 3.0)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_backward_requires_scalar_without_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_matmul_rejects_vectors_and_mismatch():
    with pytest.raises(ValueError):
        nx.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_finite_difference_check(seed):
    reports = op_suite(seed)
    failed = {k: r.summary() for k, r in reports.items() if not r.passed}
    assert not failed


def test_grad_check_flags_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def broken(p):
        # forward is x^2, backward pretends it is 3x^2's derivative
        a = p["x"]
        out = nx.tsum(a * a)
        bw = out._backward

        def wrong(g):
            a._accumulate(3 * a.data * g)
        out._backward = wrong if bw is not None else None
        return out

    report = grad_check(broken, {"x": x})
    assert not report.passed
    assert report.worst == "x"


def test_grad_check_step_bounds():
    x = Tensor([1.0], requires_grad=True)
    for step in (1e-9, 0.1):
        with pytest.raises(ValueError):
            grad_check(lambda p: nx.tsum(p["x"] * p["x"]), {"x": x}, step=step)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_nonfinite_loss():
    x = Tensor([0.0], requires_grad=True)
    report = grad_check(lambda p: nx.tsum(nx.log(p["x"])), {"x": x})
    assert not report.passed
    assert report.diagnostic is not None


def test_grad_report_summary_mentions_worst():
    rep = GradReport({"a": 1e-6, "b": 5e-3}, 1e-3)
    assert rep.worst == "b"
    assert not rep.passed
    assert "b" in rep.summary()


@settings(max_examples=25)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)), arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_matmul_gradient_identity(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    nx.tsum(nx.matmul(ta, tb)).backward()
    np.testing.assert_allclose(ta.grad, np.ones((2, 2)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((2, 2)), atol=1e-12)
