import numpy as np
import pytest
import torch

from equiv_assembly import grad
from equiv_assembly.errors import CheckpointError, ContractError, DimensionError


def central_diff(f, x, h=1e-3):
    """Central finite differences of scalar ``f`` at float64 ``x``."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return ((a - b).norm() / b.norm().clamp_min(1e-12)).item()


def autograd_of(f, *xs):
    xs = [x.clone().requires_grad_(True) for x in xs]
    return grad.backward(f(*xs), xs)


def test_matmul_values():
    eye = torch.eye(3)
    assert torch.equal(grad.matmul(eye, eye), eye)
    a = grad.tensor([[1, 2], [3, 4]])
    b = grad.tensor([[5], [6]])
    assert grad.matmul(a, b).tolist() == [[17.0], [39.0]]


def test_matmul_batch_broadcast():
    a = torch.randn(4, 2, 3)
    b = torch.randn(1, 3, 5)
    assert grad.matmul(a, b).shape == (4, 2, 5)
    assert grad.matmul(a, torch.randn(3, 5)).shape == (4, 2, 5)


@pytest.mark.parametrize("sa,sb", [((2, 3), (2, 3)), ((4, 2, 3), (3, 3, 1)), ((3,), (3, 3))])
def test_matmul_shape_errors(sa, sb):
    with pytest.raises(DimensionError) as exc:
        grad.matmul(torch.zeros(sa), torch.zeros(sb))
    assert str(tuple(sa)) in str(exc.value)


@pytest.mark.parametrize("seed", range(20))
def test_matmul_gradient_matches_finite_differences(seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    b = torch.randn(4, 2, generator=gen, dtype=torch.float64)
    ga, gb = autograd_of(lambda x, y: grad.matmul(x, y).sum(), a, b)
    assert rel_err(ga, central_diff(lambda x: grad.matmul(x, b).sum(), a.clone())) < 1e-3
    assert rel_err(gb, central_diff(lambda y: grad.matmul(a, y).sum(), b.clone())) < 1e-3


def test_elementwise_values():
    assert grad.elementwise("add", grad.tensor([1, 2]), grad.tensor([3, 4])).tolist() == [4, 6]
    assert grad.elementwise("scale", grad.tensor([1, -2]), 0.5).tolist() == [0.5, -1]
    assert grad.elementwise("negate", grad.tensor([1, -2])).tolist() == [-1, 2]
    assert grad.elementwise("sub", grad.tensor([1, 2]), 1.0).tolist() == [0, 1]


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        grad.elementwise("mul", torch.zeros(2), torch.zeros(3))
    with pytest.raises(DimensionError):
        grad.elementwise("add", torch.zeros(2, 1), torch.zeros(1, 2))


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
@pytest.mark.parametrize("seed", range(20))
def test_elementwise_gradients(op, seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(5, generator=gen, dtype=torch.float64)
    b = torch.randn(5, generator=gen, dtype=torch.float64)
    w = torch.randn(5, generator=gen, dtype=torch.float64)

    def f(x, y):
        return (grad.elementwise(op, x, y) * w).sum()

    ga, gb = autograd_of(f, a, b)
    assert rel_err(ga, central_diff(lambda x: f(x, b), a.clone())) < 1e-3
    assert rel_err(gb, central_diff(lambda y: f(a, y), b.clone())) < 1e-3


def test_reduce_values():
    assert grad.reduce("mean", grad.tensor([2, 4, 6]), 0).item() == 4
    assert grad.reduce("max", grad.tensor([[1, 5], [3, 2]]), 1).tolist() == [5, 3]
    assert grad.reduce("sum", grad.tensor([[1, 5], [3, 2]]), 0).tolist() == [4, 7]


def test_reduce_invalid_axis():
    with pytest.raises(DimensionError):
        grad.reduce("sum", torch.zeros(2, 2), 2)


def test_mean_gradient_is_uniform():
    (g,) = autograd_of(lambda x: grad.reduce("mean", x, 0), torch.randn(7))
    assert torch.allclose(g, torch.full((7,), 1 / 7))


def test_max_routes_gradient_to_argmax_only():
    x = grad.tensor([[1.0, 5.0], [3.0, 2.0]])
    (g,) = autograd_of(lambda t: grad.reduce("max", t, 1).sum(), x)
    assert g.tolist() == [[0, 1], [1, 0]]
    # ties: the first index wins
    (g,) = autograd_of(lambda t: grad.reduce("max", t, 0).sum(), grad.tensor([2.0, 2.0]))
    assert g.tolist() == [1, 0]


def test_backward_square():
    (g,) = autograd_of(lambda x: x * x, torch.tensor(3.0))
    assert g.item() == 6.0


def test_backward_rejects_non_scalar_root():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractError):
        grad.backward(x * 2, [x])


def test_unused_parameter_gets_zero_gradient():
    x = torch.ones(3, requires_grad=True)
    y = torch.ones(2, 2, requires_grad=True)
    gx, gy = grad.backward((x * 2).sum(), [x, y])
    assert gx.tolist() == [2, 2, 2]
    assert torch.equal(gy, torch.zeros(2, 2))


def test_shared_subexpression_accumulates():
    # f(x) = s * s with s = sum(x) used twice; d/dx = 2 s
    x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    s = grad.reduce("sum", x, 0)
    (g,) = grad.backward(grad.elementwise("mul", s, s), [x])
    # oracle: the same function written with two independent copies of s
    x2 = x.detach().clone().requires_grad_(True)
    (g2,) = grad.backward(x2.sum() * x2.detach().sum() + x2.detach().sum() * x2.sum(), [x2])
    assert torch.allclose(g, g2)
    assert g.tolist() == [12.0, 12.0, 12.0]


def test_forward_is_deterministic():
    a, b = torch.randn(8, 8), torch.randn(8, 8)
    assert torch.equal(grad.matmul(a, b), grad.matmul(a, b))


def test_adam_first_step_closed_form():
    p = torch.zeros(1)
    state = grad.OptimizerState()
    assert state.learning_rate == 1e-4
    grad.adam_step([p], [torch.ones(1)], state)
    # mhat = 1, vhat = 1 after bias correction
    assert state.step_count == 1
    assert p.item() == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-6)


def test_adam_zero_gradient_leaves_parameter():
    p = torch.tensor([0.3, -2.0])
    before = p.clone()
    state = grad.OptimizerState(learning_rate=0.1)
    for _ in range(3):
        grad.adam_step([p], [torch.zeros(2)], state)
    assert torch.equal(p, before)
    assert state.first[0].shape == p.shape


def test_adam_matches_reference_over_steps():
    p = torch.tensor([1.0, -1.0], dtype=torch.float64)
    ref = p.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=0.01)
    state = grad.OptimizerState(learning_rate=0.01)
    for step in range(10):
        g = torch.tensor([0.1 * step - 0.3, 0.5], dtype=torch.float64)
        grad.adam_step([p], [g], state)
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(p, ref.detach(), atol=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        grad.adam_step([torch.zeros(2)], [torch.zeros(3)], grad.OptimizerState())


def test_checkpoint_round_trip_bit_exact(tmp_path):
    tensors = {"a.weight": torch.randn(3, 4), "b": torch.randn(5), "scalar": torch.tensor(2.5)}
    path = tmp_path / "x.eqas"
    grad.save_checkpoint(path, tensors)
    back = grad.load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.eqas"
    grad.save_checkpoint(path, {"w": torch.tensor([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"EQAS"
    # version, name length, name, rank, dims, payload
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (1).to_bytes(4, "little") and raw[12:13] == b"w"
    assert raw[13:17] == (2).to_bytes(4, "little")
    assert np.frombuffer(raw[17:25], "<u4").tolist() == [1, 2]
    assert np.frombuffer(raw[25:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.eqas"
    bad.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(CheckpointError):
        grad.load_checkpoint(bad)
    good = tmp_path / "good.eqas"
    grad.save_checkpoint(good, {"w": torch.ones(10)})
    bad.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        grad.load_checkpoint(bad)
