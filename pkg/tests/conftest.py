import numpy as np
import pytest
import torch

from implant_depth.phantom import PhantomConfig, generate_phantom


@pytest.fixture(scope="session")
def default_phantoms():
    """A handful of default-config phantoms, generated once per session."""
    return [generate_phantom(PhantomConfig(), seed) for seed in range(4)]


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomConfig(), 7)


def central_difference(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar f at x, elementwise (float64)."""
    assert x.dtype == torch.float64
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        f_plus = float(f(x))
        flat[i] = orig - step
        f_minus = float(f(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def autograd_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    out.backward()
    return x.grad.detach().clone()


def max_relative_error(a: torch.Tensor, b: torch.Tensor,
                       zero_floor: float = 1e-8) -> float:
    """Elementwise |a-b| / max(|a|, |b|); pairs both below the floor count 0."""
    a = a.reshape(-1)
    b = b.reshape(-1)
    denom = torch.maximum(a.abs(), b.abs())
    err = (a - b).abs() / denom.clamp(min=zero_floor)
    err = torch.where(denom < zero_floor, torch.zeros_like(err), err)
    return float(err.max())


def gradcheck(f, x: torch.Tensor, tol: float, h: float = 1e-6) -> float:
    """Compare autograd and central differences; returns the max rel. error."""
    ad = autograd_gradient(f, x)
    fd = central_difference(f, x.detach().clone(), h=h)
    err = max_relative_error(ad, fd)
    assert err < tol, f"gradient mismatch: max relative error {err} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(0)
