"""Small neural-network building blocks on top of the autodiff engine.

Parameters are float32 by default so checkpoints round-trip bitwise; modules
can be cast to float64 with :meth:`Module.astype` for wide-precision gradient
checks. Hidden nonlinearities are tanh throughout: smooth enough for
finite-difference validation at tight tolerances and cheap on this hardware.
"""

from __future__ import annotations

import copy

import numpy as np

from .autodiff import Tensor, affine_tanh

__all__ = ["Module", "Linear", "MLP"]


class Module:
    """Base class holding named parameters and child modules.

    Parameter names are dotted paths (``"fc0.W"``). ``state`` /
    ``load_state`` exchange plain float arrays for checkpointing;
    ``set_trainable`` toggles gradient tracking for the whole subtree.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(np.ascontiguousarray(array), requires_grad=trainable)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self._params)
        for cname, child in self._children.items():
            for pname, p in child.parameters().items():
                out[f"{cname}.{pname}"] = p
        return out

    def set_trainable(self, flag: bool) -> "Module":
        for p in self.parameters().values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.data, copy=True) for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.data.dtype))
            p.grad = None

    def astype(self, dtype) -> "Module":
        clone = copy.deepcopy(self)
        for p in clone.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone


class Linear(Module):
    """Affine map ``x @ W + b`` with fan-in scaled Gaussian init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 scale: float | None = None, zero_init: bool = False,
                 bias_fill: float = 0.0, dtype=np.float32):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            s = (1.0 / np.sqrt(n_in)) if scale is None else scale
            w = rng.standard_normal((n_in, n_out)) * s
        self.W = self.add_param("W", w.astype(dtype))
        self.b = self.add_param("b", np.full((n_out,), bias_fill, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class MLP(Module):
    """Stack of Linear layers with tanh between them; the last layer is affine.

    ``zero_init_last`` zeroes the final layer so the network starts as the
    constant ``last_bias`` (used for residual heads that must begin inert).
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 zero_init_last: bool = False, last_bias: float = 0.0,
                 dtype=np.float32):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers: list[Linear] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layer = Linear(a, b, rng, zero_init=zero_init_last and last,
                           bias_fill=last_bias if last else 0.0, dtype=dtype)
            self.layers.append(self.add_module(f"fc{i}", layer))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = affine_tanh(x, layer.W, layer.b)
        return self.layers[-1](x)
