"""Conditioned MLP with adaptive layer normalization.

Per hidden layer: affine -> activation -> layer norm -> ``h * scale(c) + shift(c)``
where ``scale`` and ``shift`` are affine maps of the conditioning vector ``c``
(a time or stage embedding). The conditioning maps start at zero weights and
biases 1 / 0, so a fresh network ignores ``c`` entirely.

An optional auxiliary input is linearly projected and added to the first
layer's pre-activation; the bridge model uses it for its fixed endpoint.
With ``num_heads > 1`` the output layer holds one affine head per group and
each row is routed through the head named by ``head``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ACTIVATIONS, Tensor, as_tensor, concat_rows, layer_norm

LN_EPS = 1e-5


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    cond_dim: int = 0
    activation: str = "gelu"
    aux_dim: int = 0
    num_heads: int = 1
    layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("need at least one hidden layer")
        if min(self.input_dim, self.output_dim, self.num_heads, *self.hidden_dims) < 1:
            raise ValueError("dimensions must be positive")
        if self.cond_dim < 0 or self.aux_dim < 0:
            raise ValueError("cond_dim and aux_dim must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetSpec":
        return cls(**{**d, "hidden_dims": tuple(d["hidden_dims"])})


@dataclass
class ParameterSet:
    """Flat parameter vector with a ``name -> (offset, shape)`` layout."""

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        end = 0
        for name, (offset, shape) in self.layout.items():
            if offset != end:
                raise ValueError(f"layout gap or overlap at {name!r}")
            end = offset + int(np.prod(shape, dtype=np.int64))
        if end != self.values.size:
            raise ValueError(f"layout covers {end} values, vector has {self.values.size}")

    @classmethod
    def allocate(cls, shapes: dict[str, tuple[int, ...]]) -> "ParameterSet":
        layout, offset = {}, 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            layout[name] = (offset, shape)
            offset += int(np.prod(shape, dtype=np.int64))
        return cls(np.zeros(offset), layout)

    def __getitem__(self, name) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.values[offset:offset + int(np.prod(shape, dtype=np.int64))].reshape(shape)

    def __contains__(self, name):
        return name in self.layout

    def __len__(self):
        return self.values.size

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.values.copy(), dict(self.layout))

    def leaves(self, grad: np.ndarray | None = None, dtype=np.float64) -> dict[str, Tensor]:
        """Tensors viewing each parameter; with ``grad`` they accumulate into matching views of it.

        With ``dtype=float32`` the tensors hold float32 copies instead of views
        and ``grad`` must be a float32 buffer.
        """
        values = self.values if dtype == np.float64 else self.values.astype(dtype)
        out = {}
        for name, (offset, shape) in self.layout.items():
            n = int(np.prod(shape, dtype=np.int64))
            data = values[offset:offset + n].reshape(shape)
            if grad is None:
                out[name] = Tensor(data, requires_grad=False)
            else:
                out[name] = Tensor(data, grad=grad[offset:offset + n].reshape(shape))
        return out


def param_shapes(spec: NetSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = spec.input_dim
    for i, h in enumerate(spec.hidden_dims):
        shapes[f"l{i}.w"] = (prev, h)
        shapes[f"l{i}.b"] = (h,)
        if i == 0 and spec.aux_dim:
            shapes["aux.w"] = (spec.aux_dim, h)
        if spec.layer_norm:
            shapes[f"l{i}.scale.w"] = (spec.cond_dim, h)
            shapes[f"l{i}.scale.b"] = (h,)
            shapes[f"l{i}.shift.w"] = (spec.cond_dim, h)
            shapes[f"l{i}.shift.b"] = (h,)
        prev = h
    if spec.num_heads == 1:
        shapes["out.w"] = (prev, spec.output_dim)
        shapes["out.b"] = (spec.output_dim,)
    else:
        shapes["out.w"] = (spec.num_heads, prev, spec.output_dim)
        shapes["out.b"] = (spec.num_heads, spec.output_dim)
    return shapes


def init_params(spec: NetSpec, rng: np.random.Generator, extra: dict | None = None,
                zero_output: bool = False) -> ParameterSet:
    """Uniform fan-in initialisation; conditioning maps start as identity modulation.

    ``extra`` adds named shapes (e.g. a stage-embedding table) initialised
    with unit-variance normals.
    """
    shapes = param_shapes(spec)
    for name, shape in (extra or {}).items():
        shapes[name] = shape
    params = ParameterSet.allocate(shapes)
    for name, (_, shape) in params.layout.items():
        view = params[name]
        if name.endswith(".scale.b"):
            view[...] = 1.0
        elif name.endswith((".scale.w", ".shift.w", ".shift.b")) or name.endswith(".b"):
            view[...] = 0.0
        elif name.startswith("out.") and zero_output:
            view[...] = 0.0
        elif name.endswith(".w"):
            fan_in = shape[-2]
            bound = 1.0 / np.sqrt(fan_in)
            view[...] = rng.uniform(-bound, bound, size=shape)
        else:
            view[...] = rng.standard_normal(shape)
    return params


def _check_input(x, width, what):
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} must be (B, {width}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def _cast(v, dtype):
    return v if isinstance(v, Tensor) else np.asarray(v, dtype=dtype)


def forward(params, spec: NetSpec, x, cond=None, aux=None, head=None) -> Tensor:
    """Run the network on a batch of rows.

    ``params`` is a :class:`ParameterSet` (no gradients) or the dict returned
    by :meth:`ParameterSet.leaves`. ``x`` is (B, input_dim); ``cond`` is
    (B, cond_dim) or (1, cond_dim); ``aux`` is (B, aux_dim); ``head`` is an
    integer per row when the net has several output heads (a scalar applies
    one head to all rows).
    """
    p = params.leaves() if isinstance(params, ParameterSet) else params
    dtype = p["l0.w"].data.dtype
    x = as_tensor(_cast(x, dtype))
    _check_input(x.data, spec.input_dim, "input")
    act = ACTIVATIONS[spec.activation]
    if spec.layer_norm and spec.cond_dim:
        if cond is None:
            raise ValueError("network expects a conditioning vector")
        cond = as_tensor(_cast(cond, dtype))
        if cond.data.ndim != 2 or cond.data.shape[1] != spec.cond_dim:
            raise ValueError(f"cond must be (B, {spec.cond_dim}), got {cond.data.shape}")
    if spec.aux_dim:
        if aux is None:
            raise ValueError("network expects an auxiliary input")
        aux = as_tensor(_cast(aux, dtype))
        _check_input(aux.data, spec.aux_dim, "aux input")

    h = x
    for i in range(len(spec.hidden_dims)):
        pre = h @ p[f"l{i}.w"] + p[f"l{i}.b"]
        if i == 0 and spec.aux_dim:
            pre = pre + aux @ p["aux.w"]
        h = act(pre)
        if spec.layer_norm:
            h = layer_norm(h, LN_EPS)
            if spec.cond_dim:
                scale = cond @ p[f"l{i}.scale.w"] + p[f"l{i}.scale.b"]
                shift = cond @ p[f"l{i}.shift.w"] + p[f"l{i}.shift.b"]
            else:
                scale, shift = p[f"l{i}.scale.b"], p[f"l{i}.shift.b"]
            h = h * scale + shift

    if spec.num_heads == 1:
        return h @ p["out.w"] + p["out.b"]
    if head is None:
        raise ValueError("multi-head network needs a head index")
    head = np.asarray(head, dtype=np.int64)
    if head.ndim == 0:
        g = int(head)
        return h @ p["out.w"][g] + p["out.b"][g]
    if head.shape != (x.data.shape[0],):
        raise ValueError("head must have one entry per row")
    if head.min() < 0 or head.max() >= spec.num_heads:
        raise IndexError("head index out of range")
    parts, order = [], []
    for g in np.unique(head):
        rows = np.flatnonzero(head == g)
        parts.append(h[rows] @ p["out.w"][int(g)] + p["out.b"][int(g)])
        order.append(rows)
    stacked = concat_rows(parts)
    inverse = np.empty(x.data.shape[0], dtype=np.int64)
    inverse[np.concatenate(order)] = np.arange(x.data.shape[0])
    return stacked[inverse]


def value_and_grad(params: ParameterSet, loss_fn, dtype=np.float64):
    """Evaluate ``loss_fn(leaves) -> scalar Tensor`` and its gradient w.r.t. the flat parameter vector.

    ``dtype`` is the compute precision; the returned gradient is always float64.
    """
    grad = np.zeros(params.values.shape, dtype=dtype)
    loss = loss_fn(params.leaves(grad, dtype=dtype))
    loss.backward()
    return float(loss.data), grad.astype(np.float64, copy=False)
