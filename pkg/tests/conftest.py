import numpy as np
import pytest
import torch

from diarist import Annotation, Segment

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


def naive_selective_scan(u, delta, A, B, C, D):
    """Step-by-step scalar unrolling of the scan recurrence (test oracle)."""
    u, delta, A, B, C, D = (np.asarray(t, dtype=np.float64) for t in (u, delta, A, B, C, D))
    T, d_inner = u.shape
    d_state = A.shape[1]
    h = np.zeros((d_inner, d_state))
    y = np.zeros_like(u)
    for t in range(T):
        for d in range(d_inner):
            for n in range(d_state):
                x = delta[t, d] * A[d, n]
                decay = np.exp(x)
                if x == 0.0:
                    bbar = delta[t, d] * B[t, n]
                else:
                    bbar = (np.expm1(x) / x) * delta[t, d] * B[t, n]
                h[d, n] = decay * h[d, n] + bbar * u[t, d]
            y[t, d] = float(h[d] @ C[t]) + D[d] * u[t, d]
    return y


def finite_difference_gradients(fn, tensors, upstream, eps=1e-5):
    """Central-difference gradients of sum(fn(*tensors) * upstream).

    ``tensors`` maps name -> tensor; every scalar entry is perturbed in place.
    """
    def loss():
        with torch.no_grad():
            return float((fn(*tensors.values()) * upstream).sum())

    grads = {}
    for name, tensor in tensors.items():
        grad = torch.zeros_like(tensor)
        flat = tensor.view(-1)
        gflat = grad.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads[name] = grad
    return grads


def module_fd_gradients(module, x, upstream, eps=1e-5):
    """Central differences for every module parameter and for the input."""
    tensors = {"x": x}
    tensors.update({name: p.data for name, p in module.named_parameters()})

    def fn(x_in, *_params):
        return module(x_in)

    return finite_difference_gradients(fn, tensors, upstream, eps=eps)


def max_relative_error(got: torch.Tensor, want: torch.Tensor) -> float:
    diff = (got - want).abs()
    denom = torch.maximum(
        torch.maximum(got.abs(), want.abs()),
        torch.tensor(1e-6, dtype=got.dtype),
    )
    return float((diff / denom).max())


def random_annotation(rng, rec_id="rec", speakers=("A", "B", "C"), max_segments=6, horizon=30.0):
    """Small random annotation for scoring tests."""
    segments = []
    for label in speakers:
        for _ in range(rng.integers(0, max_segments + 1)):
            start = rng.uniform(0, horizon - 0.5)
            length = rng.uniform(0.2, 5.0)
            segments.append(Segment(start, min(start + length, horizon), label))
    return Annotation(rec_id, segments).normalized()
