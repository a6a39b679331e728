"""Parameter containers and the handful of layers the encoders share."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


class Module:
    """Tracks parameters and child modules in attribute-assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", False)

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{key}.{i}"] = v
        object.__setattr__(self, key, value)

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=ad.DTYPE), requires_grad=True, name=name)
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix).items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ad.DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data[...] = arrays[name]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = math.sqrt(2.0),
                 bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.param("weight", orthogonal((n_in, n_out), gain, rng))
        if bias:
            self.param("bias", np.zeros(n_out))
        else:
            self.bias = None

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ad.DimensionError(f"Linear expects last dim {self.n_in}, got shape {x.shape}")
        y = ad.matmul(x, self.weight) if x.ndim >= 2 else ad.matmul(ad.reshape(x, (1, -1)), self.weight)[0]
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.param("weight", np.ones(dim))
        self.param("bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)
