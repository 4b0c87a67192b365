import numpy as np
import pytest

from thinkgen_lab import autodiff as ad
from thinkgen_lab.autodiff import Tensor, grad_check
from thinkgen_lab.autodiff.nn import AdamW, Linear, lr_at
from thinkgen_lab.errors import ContractError, DeterminismError, NumericsError, ShapeError


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_add_example():
    assert ad.add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]


def test_softmax_symmetric():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_batched_matmul_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    out = ad.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], naive_matmul(a[i], b), atol=1e-12, rtol=0)


def test_concat_and_slice_match_reference():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    cat = ad.concat([Tensor(a), Tensor(b)], axis=0).data
    for i in range(6):
        row = a[i] if i < 2 else b[i - 2]
        np.testing.assert_allclose(cat[i], row, atol=1e-12, rtol=0)
    sl = ad.slice_(Tensor(b), (slice(1, 3), slice(0, 2))).data
    for i in range(2):
        for j in range(2):
            assert abs(sl[i, j] - b[i + 1, j]) <= 1e-12


def test_derivative_of_square():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_softmax_sum_has_zero_gradient():
    x = Tensor(np.random.default_rng(3).normal(size=5), requires_grad=True)
    ad.backward(ad.softmax(x).sum())
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2)


def test_non_ancestors_absent_and_repeat_backward_identical():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = Tensor([0.5, 0.5], requires_grad=True)
    unrelated = Tensor([3.0], requires_grad=True)
    loss = (x * x * y).sum()
    tape1 = ad.backward(loss)
    g1 = x.grad.copy()
    tape2 = ad.backward(loss)
    np.testing.assert_array_equal(g1, x.grad)
    assert x in tape1 and y in tape2
    assert unrelated not in tape1
    assert unrelated.grad is None


def test_multi_consumer_gradients_sum():
    x = Tensor(2.0, requires_grad=True)
    ad.backward(x * 3.0 + x * 4.0)
    assert x.grad == pytest.approx(7.0)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_rejected_in_checked_mode():
    with pytest.raises(NumericsError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericsError):
        ad.log(Tensor([0.0]))
    with ad.checked(False):
        assert np.isnan(Tensor([np.nan]).data[0])


def test_arrays_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# -- finite-difference checks for every op kind --------------------------------

RNG = np.random.default_rng(1234)
IDX = RNG.integers(0, 4, size=(3, 1))
IDX2 = RNG.integers(0, 4, size=(3, 2))

OP_CASES = {
    "add": (lambda p: (ad.add(p[0], p[1]) ** 2).sum(), [(3, 4), (4,)]),
    "sub": (lambda p: (ad.sub(p[0], p[1]) ** 2).sum(), [(3, 4), (3, 1)]),
    "mul": (lambda p: ad.mul(p[0], p[1]).sum(), [(3, 4), (1, 4)]),
    "div": (lambda p: ad.div(p[0], ad.exp(p[1])).sum(), [(3, 4), (3, 4)]),
    "matmul": (lambda p: (ad.matmul(p[0], p[1]) ** 2).mean(), [(2, 3, 4), (4, 5)]),
    "sum": (lambda p: (ad.sum_(p[0], axis=1) ** 2).sum(), [(3, 4)]),
    "mean": (lambda p: (ad.mean(p[0], axis=0, keepdims=True) ** 3).sum(), [(3, 4)]),
    "gelu": (lambda p: ad.gelu(p[0]).sum(), [(3, 4)]),
    "tanh": (lambda p: ad.tanh(p[0]).sum(), [(3, 4)]),
    "softmax": (lambda p: (ad.softmax(p[0], axis=-1) * ad.Tensor(np.arange(12).reshape(3, 4))).sum(), [(3, 4)]),
    "log_softmax": (lambda p: (ad.log_softmax(p[0]) * ad.Tensor(np.arange(12).reshape(3, 4))).sum(), [(3, 4)]),
    "log": (lambda p: ad.log(ad.exp(p[0]) + 1.0).sum(), [(3, 4)]),
    "exp": (lambda p: ad.exp(p[0]).sum(), [(3, 4)]),
    "gather": (lambda p: (ad.gather(p[0], IDX, axis=1) ** 2).sum(), [(3, 4)]),
    "gather_dup": (lambda p: (ad.gather(p[0], IDX2, axis=1) ** 2).sum(), [(3, 4)]),
    "embedding": (lambda p: (ad.embedding(p[0], [0, 2, 2]) ** 2).sum(), [(3, 4)]),
    "concat": (lambda p: (ad.concat([p[0], p[1]], axis=0) ** 2).sum(), [(2, 4), (3, 4)]),
    "slice": (lambda p: (p[0][1:, ::2] ** 2).sum(), [(3, 4)]),
    "layer_norm": (lambda p: (ad.layer_norm(p[0], p[1], p[2]) * ad.Tensor(np.arange(12).reshape(3, 4))).sum(),
                   [(3, 4), (4,), (4,)]),
    "mse": (lambda p: ad.mse(p[0], p[1]), [(3, 4), (3, 4)]),
    "reshape_transpose": (lambda p: (p[0].reshape(2, 6).transpose() ** 2 * ad.Tensor(np.arange(12).reshape(6, 2))).sum(),
                          [(3, 4)]),
    "minimum": (lambda p: ad.minimum(p[0], p[1]).sum(), [(3, 4), (3, 4)]),
    "stack": (lambda p: (ad.stack([p[0], p[1]], axis=1) ** 2).sum(), [(3,), (3,)]),
    "power": (lambda p: ad.power(ad.exp(p[0]), 1.5).sum(), [(3, 4)]),
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(kind):
    f, shapes = OP_CASES[kind]
    rng = np.random.default_rng(abs(hash(kind)) % 2**32)
    params = [rng.normal(size=s) for s in shapes]
    report = grad_check(f, params, h=1e-5, tol=1e-5)
    assert report.passed, (kind, report.max_rel_error)


def test_relu_gradient_away_from_kink():
    x = np.array([[-1.3, 0.7], [2.0, -0.4]])
    report = grad_check(lambda p: (ad.relu(p[0]) ** 2).sum(), [x])
    assert report.passed and report.excluded == [[]]


def test_three_layer_mlp_gradient():
    rng = np.random.default_rng(7)
    x = ad.Tensor(rng.normal(size=(5, 4)))
    shapes = [(4, 8), (8,), (8, 8), (8,), (8, 1), (1,)]
    params = [rng.normal(size=s) * 0.5 for s in shapes]

    def f(p):
        h = ad.gelu(ad.matmul(x, p[0]) + p[1])
        h = ad.tanh(ad.matmul(h, p[2]) + p[3])
        return ad.mean(ad.matmul(h, p[4]) + p[5])

    report = grad_check(f, params, h=1e-5, tol=1e-5)
    assert report.worst <= 1e-5


def test_grad_check_linear_mse():
    rng = np.random.default_rng(8)
    x, y = ad.Tensor(rng.normal(size=(6, 3))), ad.Tensor(rng.normal(size=(6, 2)))
    report = grad_check(lambda p: ad.mse(ad.matmul(x, p[0]), y), [rng.normal(size=(3, 2))], tol=1e-5)
    assert report.passed


def test_grad_check_constant_function():
    report = grad_check(lambda p: ad.Tensor(4.0) + p[0].sum() * 0.0, [np.ones(3)])
    assert report.passed and report.max_rel_error == [0.0]


def test_grad_check_reports_kink_of_abs():
    report = grad_check(lambda p: ad.abs_(p[0]).sum(), [np.array([0.0, 1.5])])
    assert report.excluded == [[(0,)]]
    assert report.passed


def test_grad_check_detects_nondeterminism():
    counter = iter(range(10**6))
    with pytest.raises(DeterminismError):
        grad_check(lambda p: p[0].sum() + float(next(counter)), [np.ones(2)])


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        grad_check(lambda p: p[0].sum(), [np.ones(2)], h=0.0)


def test_tgar_round_trip(tmp_path):
    arr = np.random.default_rng(9).normal(size=(2, 3, 4))
    path = tmp_path / "a.tgar"
    ad.save_array(path, arr)
    blob = path.read_bytes()
    assert blob[:4] == b"TGAR"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 3
    np.testing.assert_array_equal(ad.load_array(path), arr)


def test_tgar_rejects_bad_magic():
    with pytest.raises(ContractError):
        ad.loads_array(b"NOPE" + bytes(16))


def test_streams_are_addressable():
    a = ad.stream(7, "noise", 3).normal(size=4)
    b = ad.stream(7, "noise", 3).normal(size=4)
    c = ad.stream(7, "noise", 4).normal(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_adamw_reduces_quadratic_and_respects_clip():
    lin = Linear(3, 1, np.random.default_rng(0))
    opt = AdamW(lin.named_parameters(), lr=0.05)
    x = ad.Tensor(np.eye(3))
    target = ad.Tensor(np.array([[1.0], [2.0], [3.0]]))
    losses = []
    for _ in range(300):
        loss = ad.mse(lin(x), target)
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 1e-3 < losses[0]


def test_lr_schedules():
    assert lr_at(0, 1.0, "cosine", warmup=10, total=100) == pytest.approx(0.1)
    assert lr_at(10, 1.0, "cosine", warmup=10, total=100) == pytest.approx(1.0)
    assert lr_at(100, 1.0, "cosine", warmup=10, total=100) == pytest.approx(0.0)
    assert lr_at(50, 2.0, "constant") == 2.0


def test_forward_op_dispatch():
    out = ad.forward_op("add", [ad.Tensor([1.0]), ad.Tensor([2.0])])
    assert out.data.tolist() == [3.0]
    with pytest.raises(ValueError):
        ad.forward_op("bogus", [])
