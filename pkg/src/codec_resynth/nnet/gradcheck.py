"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .mlp import ParameterSet, value_and_grad


def finite_difference_grad(params: ParameterSet, loss_fn, step: float = 1e-4) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every flat parameter (64-bit throughout)."""
    probe = params.copy()
    out = np.empty_like(probe.values)
    for j in range(probe.values.size):
        keep = probe.values[j]
        probe.values[j] = keep + step
        up = float(loss_fn(probe.leaves()).data)
        probe.values[j] = keep - step
        down = float(loss_fn(probe.leaves()).data)
        probe.values[j] = keep
        out[j] = (up - down) / (2 * step)
    return out


def relative_errors(analytic, numeric, floor: float = 1e-10) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)``; coordinates where both are below ``floor`` count as 0."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.where(scale < floor, 1.0, scale)
    return np.where(scale < floor, 0.0, err)


def check_gradients(params: ParameterSet, loss_fn, step: float = 1e-4) -> np.ndarray:
    """Relative errors between ``value_and_grad`` and central differences."""
    _, analytic = value_and_grad(params, loss_fn)
    return relative_errors(analytic, finite_difference_grad(params, loss_fn, step))


def random_net_case(rng: np.random.Generator):
    """A small random conditioned net with a scalar loss: ``(spec, params, loss_fn)``.

    All parameters, including the adaptive-norm conditioning maps, are drawn
    at random so every path carries gradient.
    """
    from .autodiff import as_tensor
    from .mlp import NetSpec, forward, init_params

    heads = int(rng.integers(1, 3))
    spec = NetSpec(
        input_dim=int(rng.integers(2, 6)),
        hidden_dims=tuple(int(h) for h in rng.integers(3, 7, size=int(rng.integers(1, 3)))),
        output_dim=int(rng.integers(1, 4)),
        cond_dim=int(rng.integers(1, 4)),
        activation=str(rng.choice(["gelu", "tanh"])),
        aux_dim=int(rng.integers(0, 3)),
        num_heads=heads,
    )
    params = init_params(spec, rng)
    params.values[:] = rng.standard_normal(params.values.size) * 0.7
    b = 5
    x = rng.standard_normal((b, spec.input_dim))
    cond = rng.standard_normal((b, spec.cond_dim))
    aux = rng.standard_normal((b, spec.aux_dim)) if spec.aux_dim else None
    head = rng.integers(0, heads, size=b) if heads > 1 else None
    target = rng.standard_normal((b, spec.output_dim))

    def loss_fn(leaves):
        d = forward(leaves, spec, x, cond=cond, aux=aux, head=head) - as_tensor(target)
        return (d * d).mean()

    return spec, params, loss_fn
