import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdfd.autodiff import PRIMITIVES, Tape, Tensor, apply_primitive, backward, grad_check, no_tape
from pdfd.checks import joint_loss_error, primitive_cases, primitive_checks
from pdfd.errors import DomainError, NumericalError, UsageError
from pdfd.owssl import cross_entropy


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    out = apply_primitive("matmul", [np.eye(3), a])
    np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform_row():
    out = Tensor([[0.0, 0.0, 0.0]]).softmax()
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_relu_definition():
    np.testing.assert_array_equal(Tensor([-1.0, 2.0]).relu().data, [0.0, 2.0])


def test_backward_sum_of_squares():
    w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    with Tape():
        loss = (w * w).sum()
    grads = backward(loss)
    np.testing.assert_array_equal(grads["w"].data, [2.0, 4.0])


def test_backward_mean():
    w = Tensor(np.arange(4.0), requires_grad=True, name="w")
    with Tape():
        loss = w.mean()
    np.testing.assert_array_equal(backward(loss)["w"].data, [0.25] * 4)


def test_cross_entropy_gradient_at_zero_logits():
    z = Tensor([[0.0, 0.0]], requires_grad=True, name="z")
    with Tape():
        loss = cross_entropy(z, [0])
    g = backward(loss)["z"].data
    # central-difference oracle
    num = np.zeros(2)
    for i in range(2):
        e = np.zeros((1, 2))
        e[0, i] = 1e-6
        num[i] = (cross_entropy(Tensor(z.data + e), [0]).item() - cross_entropy(Tensor(z.data - e), [0]).item()) / 2e-6
    np.testing.assert_allclose(g[0], num, atol=1e-9)
    np.testing.assert_allclose(g[0], [-0.5, 0.5], atol=1e-12)


def test_grad_check_square():
    assert grad_check(lambda x: x.square().sum(), np.array([1.0, 2.0, 3.0]), eps=1e-5) < 1e-6


def test_grad_check_constant():
    assert grad_check(lambda x: Tensor(3.0), np.array([1.0, 2.0])) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(UsageError):
        grad_check(lambda x: x.sum(), np.ones(2), eps=0.0)


def test_every_primitive_has_a_case():
    assert set(primitive_cases(np.random.default_rng(0))) >= set(PRIMITIVES)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    (result,) = list(primitive_checks(seed=0, points=10, names=[name]))
    assert result.passed, result.line()


def test_joint_loss_gradient():
    err, per = joint_loss_error(seed=0)
    assert err < 1e-4, per


def test_non_finite_detection():
    with pytest.raises(NumericalError):
        Tensor([np.nan])
    with pytest.raises(DomainError):
        Tensor([0.0]).log()
    with pytest.raises(NumericalError):
        Tensor([800.0]).exp()


def test_tensor_shape_and_grad_shape(rng):
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True, name="w")
    assert w.data.size == 6
    with Tape():
        loss = (w @ Tensor(rng.standard_normal((3, 4)))).sum()
    assert backward(loss)["w"].shape == w.shape


def test_single_sweep_per_tape():
    w = Tensor([1.0], requires_grad=True, name="w")
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    with pytest.raises(UsageError):
        tape.backward(loss)


def test_topological_order():
    w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    with Tape() as tape:
        ((w.exp() * w).sum() + w.square().mean()).item()
    seen = {id(w)}
    for node in tape.nodes:
        for t in node.inputs:
            assert id(t) in seen or t._node is None
        seen.add(id(node.out))


def test_no_tape_records_nothing():
    w = Tensor([1.0], requires_grad=True, name="w")
    with Tape() as tape:
        with no_tape():
            (w * 2.0).sum()
    assert len(tape) == 0


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-3, 3)),
    st.floats(-2, 2),
    st.floats(-2, 2),
)
def test_linearity_of_backward(x, a, b):
    def grads(fn):
        w = Tensor(x, requires_grad=True, name="w")
        with Tape():
            loss = fn(w)
        return backward(loss)["w"].data

    l1 = lambda w: (w * w).sum()  # noqa: E731
    l2 = lambda w: w.sigmoid().sum()  # noqa: E731
    combined = grads(lambda w: l1(w) * a + l2(w) * b)
    np.testing.assert_allclose(combined, a * grads(l1) + b * grads(l2), rtol=0, atol=1e-12)


def test_determinism(rng):
    x = rng.standard_normal((4, 3))

    def run():
        w = Tensor(x, requires_grad=True, name="w")
        with Tape():
            loss = w.softmax().log().sum()
        return loss.data.copy(), backward(loss)["w"].data.copy()

    (a1, g1), (a2, g2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and g1.tobytes() == g2.tobytes()


def test_tensors_are_immutable():
    t = Tensor([1.0])
    with pytest.raises(ValueError):
        t.data[0] = 2.0
