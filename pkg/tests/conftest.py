import numpy as np
import pytest

from bptriplet import model as nets
from bptriplet.gradcheck import numerical_gradient, relative_error
from bptriplet.tensor import Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_specs():
    return nets.MlpSpec((4, 8, 6)), nets.MlpSpec((6, 3)), nets.MlpSpec((6, 5, 2))


def tape_grads(fn, arrays):
    """Tape gradients of scalar ``fn(*tensors)`` at the given arrays."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]


def fd_grads(fn, arrays, h=1e-5):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    return numerical_gradient(lambda: fn(*[Tensor(a) for a in arrays]).item(), arrays, h)


def check_grad(fn, arrays, tol=1e-4):
    analytic = tape_grads(fn, arrays)
    numeric = fd_grads(fn, arrays)
    err = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    assert err < tol, err
    return err
