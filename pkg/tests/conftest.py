import numpy as np
import pytest
import torch


def central_difference(fn, tensor, index, eps=1e-6):
    """d fn / d tensor[index] by central differences (float64 tensors expected)."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + eps
        up = float(fn())
        tensor[index] = orig - eps
        down = float(fn())
        tensor[index] = orig
    return (up - down) / (2 * eps)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(fn, tensor, n_coords=10, seed=0, eps=1e-6):
    """Compare autograd against central differences at random coordinates of ``tensor``.

    Returns the worst relative error.
    """
    tensor.grad = None
    out = fn()
    (grad,) = torch.autograd.grad(out, tensor)
    rng = np.random.default_rng(seed)
    flat = rng.choice(tensor.numel(), size=min(n_coords, tensor.numel()), replace=False)
    worst = 0.0
    for f in flat:
        idx = np.unravel_index(int(f), tuple(tensor.shape))
        numeric = central_difference(fn, tensor.data, idx, eps)
        analytic = grad[idx].item()
        # tiny gradients are compared on absolute scale
        err = rel_err(analytic, numeric, floor=1e-6)
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
