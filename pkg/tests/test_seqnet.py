import math

import numpy as np
import pytest
import torch
from torch import nn

from diarist import (
    BiLstm,
    ExternalBiMamba,
    LstmConfig,
    MambaBlock,
    MambaBlockConfig,
    parameter_gradients,
    selective_scan,
)
from diarist.errors import NumericalError

from conftest import (
    finite_difference_gradients,
    max_relative_error,
    module_fd_gradients,
    naive_selective_scan,
)


def random_scan_instance(gen, T, d_inner, d_state, dtype=torch.float64):
    u = torch.tensor(gen.standard_normal((T, d_inner)), dtype=dtype)
    delta = torch.tensor(gen.uniform(0.01, 0.5, (T, d_inner)), dtype=dtype)
    A = torch.tensor(-gen.uniform(0.2, 3.0, (d_inner, d_state)), dtype=dtype)
    B = torch.tensor(gen.standard_normal((T, d_state)), dtype=dtype)
    C = torch.tensor(gen.standard_normal((T, d_state)), dtype=dtype)
    D = torch.tensor(gen.standard_normal(d_inner), dtype=dtype)
    return u, delta, A, B, C, D


class TestSelectiveScan:
    def test_scalar_hand_case(self):
        T = 3
        y = selective_scan(
            torch.ones(T, 1, dtype=torch.float64),
            torch.full((T, 1), math.log(2), dtype=torch.float64),
            torch.tensor([[-1.0]], dtype=torch.float64),
            torch.ones(T, 1, dtype=torch.float64),
            torch.ones(T, 1, dtype=torch.float64),
            torch.zeros(1, dtype=torch.float64),
        )
        assert y.squeeze().tolist() == pytest.approx([0.5, 0.75, 0.875], abs=1e-12)

    def test_zero_delta_reduces_to_skip(self, rng):
        T, d_inner, d_state = 5, 3, 4
        u, _, A, B, C, D = random_scan_instance(rng, T, d_inner, d_state)
        y = selective_scan(u, torch.zeros(T, d_inner, dtype=torch.float64), A, B, C, D)
        assert torch.allclose(y, u * D, atol=0.0)

    def test_matches_naive_oracle_on_random_instances(self, rng):
        for _ in range(15):
            T = int(rng.integers(1, 65))
            d_inner = int(rng.integers(1, 5))
            d_state = int(rng.integers(1, 17))
            args = random_scan_instance(rng, T, d_inner, d_state)
            got = selective_scan(*args).numpy()
            want = naive_selective_scan(*(a.numpy() for a in args))
            assert np.abs(got - want).max() < 1e-6

    def test_batched_agrees_with_unbatched(self, rng):
        u, delta, A, B, C, D = random_scan_instance(rng, 12, 2, 3)
        single = selective_scan(u, delta, A, B, C, D)
        batched = selective_scan(u[None], delta[None], A, B[None], C[None], D)
        assert torch.allclose(batched[0], single)

    def test_nonfinite_input_rejected_before_scanning(self, rng):
        u, delta, A, B, C, D = random_scan_instance(rng, 4, 2, 2)
        delta[1, 0] = math.inf
        with pytest.raises(NumericalError):
            selective_scan(u, delta, A, B, C, D)

    def test_small_delta_series_branch_continuous(self, rng):
        # Values straddling the series/expm1 switch must agree smoothly.
        u, _, A, B, C, D = random_scan_instance(rng, 6, 2, 2)
        lo = selective_scan(u, torch.full((6, 2), 4e-7, dtype=torch.float64), A, B, C, D)
        hi = selective_scan(u, torch.full((6, 2), 4e-6, dtype=torch.float64), A, B, C, D)
        assert torch.allclose(lo, hi, atol=1e-4)


class TestMambaBlock:
    def _block(self, d_model=6, d_state=4, seed=0):
        torch.manual_seed(seed)
        return MambaBlock(MambaBlockConfig(d_model=d_model, d_state=d_state)).double()

    def test_causality(self, rng):
        block = self._block()
        x = torch.tensor(rng.standard_normal((10, 6)))
        y = block(x)
        x2 = x.clone()
        x2[-1] += 1.0
        y2 = block(x2)
        assert torch.equal(y[:-1], y2[:-1])
        assert not torch.equal(y[-1], y2[-1])

    def test_single_frame_input(self, rng):
        block = self._block()
        y = block(torch.tensor(rng.standard_normal((1, 6))))
        assert y.shape == (1, 6)
        assert torch.isfinite(y).all()

    def test_zero_input_zero_biases_gives_zero_output(self):
        block = self._block()
        with torch.no_grad():
            block.conv.bias.zero_()
            block.dt_proj.bias.zero_()
        y = block(torch.zeros(7, 6, dtype=torch.float64))
        assert torch.equal(y, torch.zeros(7, 6, dtype=torch.float64))

    def test_batched_matches_unbatched(self, rng):
        block = self._block()
        x = torch.tensor(rng.standard_normal((2, 9, 6)))
        y = block(x)
        assert torch.allclose(y[0], block(x[0]))
        assert torch.allclose(y[1], block(x[1]))

    def test_dt_bias_init_in_range(self):
        block = self._block(seed=3)
        dt = torch.nn.functional.softplus(block.dt_proj.bias)
        assert (dt >= 1e-4).all() and (dt <= 0.1 + 1e-6).all()


class TestExternalBiMamba:
    def _module(self, d_model=6, seed=1):
        torch.manual_seed(seed)
        return ExternalBiMamba(d_model, d_state=4).double()

    def test_reversal_symmetry(self, rng):
        module = self._module()
        swapped = self._module()
        state = module.state_dict()
        swapped_state = {}
        for key, value in state.items():
            if key.startswith("forward_block."):
                swapped_state["backward_block." + key[len("forward_block."):]] = value
            elif key.startswith("backward_block."):
                swapped_state["forward_block." + key[len("backward_block."):]] = value
            else:
                swapped_state[key] = value
        swapped.load_state_dict(swapped_state)
        x = torch.tensor(rng.standard_normal((11, 6)))
        want = module(x).flip(0)
        got = swapped(x.flip(0))
        assert torch.allclose(got, want, atol=1e-6)

    def test_single_frame(self, rng):
        module = self._module()
        y = module(torch.tensor(rng.standard_normal((1, 6))))
        assert y.shape == (1, 6)

    def test_noncausal_by_design(self, rng):
        module = self._module()
        x = torch.tensor(rng.standard_normal((8, 6)))
        x2 = x.clone()
        x2[0] += 1.0
        y, y2 = module(x), module(x2)
        assert (y != y2).any(dim=1).all(), "a frame-0 perturbation must reach every frame"


class TestBiLstm:
    def test_output_width(self, rng):
        torch.manual_seed(0)
        net = BiLstm(12, LstmConfig(layers=2, hidden=128))
        y = net(torch.randn(5, 12))
        assert y.shape == (5, 256)

    def test_zero_weights_give_zero_output(self):
        torch.manual_seed(0)
        net = BiLstm(4, LstmConfig(layers=1, hidden=3))
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        y = net(torch.randn(6, 4))
        assert torch.equal(y, torch.zeros(6, 6))

    def test_single_layer_unidirectional_matches_cell_unroll(self, rng):
        torch.manual_seed(2)
        net = BiLstm(3, LstmConfig(layers=1, hidden=4, bidirectional=False)).double()
        x = torch.tensor(rng.standard_normal((3, 3)))
        got = net(x).detach().numpy()

        w_ih = net.lstm.weight_ih_l0.detach().numpy()
        w_hh = net.lstm.weight_hh_l0.detach().numpy()
        b_ih = net.lstm.bias_ih_l0.detach().numpy()
        b_hh = net.lstm.bias_hh_l0.detach().numpy()
        H = 4

        def sigmoid(v):
            return 1.0 / (1.0 + np.exp(-v))

        h = np.zeros(H)
        c = np.zeros(H)
        want = []
        for t in range(3):
            gates = w_ih @ x[t].numpy() + b_ih + w_hh @ h + b_hh
            i, f, g, o = gates[:H], gates[H:2*H], gates[2*H:3*H], gates[3*H:]
            i, f, o = sigmoid(i), sigmoid(f), sigmoid(o)
            g = np.tanh(g)
            c = f * c + i * g
            h = o * np.tanh(c)
            want.append(h.copy())
        assert np.abs(got - np.stack(want)).max() < 1e-6

    def test_deterministic(self, rng):
        torch.manual_seed(1)
        net = BiLstm(5, LstmConfig(layers=2, hidden=6))
        x = torch.randn(7, 5)
        assert torch.equal(net(x), net(x))


class TestParameterGradients:
    def test_scan_gradients_match_finite_differences(self, rng):
        T, d_inner, d_state = 8, 2, 4
        tensors = dict(zip("u delta A B C D".split(), random_scan_instance(rng, T, d_inner, d_state)))
        upstream = torch.tensor(rng.standard_normal((T, d_inner)))

        for t in tensors.values():
            t.requires_grad_(True)
        loss = (selective_scan(**tensors) * upstream).sum()
        analytic = torch.autograd.grad(loss, list(tensors.values()))

        detached = {k: v.detach().clone() for k, v in tensors.items()}
        fd = finite_difference_gradients(
            lambda *args: selective_scan(*args), detached, upstream
        )
        for (name, want), got in zip(fd.items(), analytic):
            assert max_relative_error(got, want) < 1e-4, name

    def test_zero_upstream_gives_zero_gradients(self, rng):
        torch.manual_seed(0)
        module = MambaBlock(MambaBlockConfig(d_model=4, d_state=3)).double()
        x = torch.tensor(rng.standard_normal((5, 4)))
        grads = parameter_gradients(module, x, torch.zeros(5, 4, dtype=torch.float64))
        for name, grad in grads.items():
            assert torch.equal(grad, torch.zeros_like(grad)), name

    def test_linear_layer_closed_form(self, rng):
        torch.manual_seed(0)
        module = nn.Linear(3, 2).double()
        x = torch.tensor(rng.standard_normal((6, 3)))
        upstream = torch.tensor(rng.standard_normal((6, 2)))
        grads = parameter_gradients(module, x, upstream)
        assert torch.allclose(grads["weight"], upstream.T @ x)
        assert torch.allclose(grads["bias"], upstream.sum(0))
        assert torch.allclose(grads["x"], upstream @ module.weight)

    def test_module_gradients_match_finite_differences(self, rng):
        torch.manual_seed(4)
        module = MambaBlock(MambaBlockConfig(d_model=4, d_state=3)).double()
        x = torch.tensor(rng.standard_normal((6, 4)))
        upstream = torch.tensor(rng.standard_normal((6, 4)))
        analytic = parameter_gradients(module, x, upstream)
        fd = module_fd_gradients(module, x, upstream)
        for name, want in fd.items():
            assert max_relative_error(analytic[name], want) < 1e-4, name

    def test_nonfinite_gradient_names_parameter(self, rng):
        module = nn.Linear(2, 2).double()
        with torch.no_grad():
            module.weight[0, 0] = math.inf
        x = torch.tensor(rng.standard_normal((3, 2)))
        with pytest.raises((NumericalError, ValueError)):
            parameter_gradients(module, x, torch.ones(3, 2, dtype=torch.float64))
