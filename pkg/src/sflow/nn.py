"""Parameter containers and small layer helpers built on :mod:`sflow.autodiff`."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameters are discovered from instance attributes in definition order.

    Attributes holding a :class:`Tensor`, a :class:`Module` or a list of
    modules contribute to :meth:`parameters` under dotted names.
    """

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.parameters(key + "."))
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, sub in enumerate(value):
                    out.update(sub.parameters(f"{key}.{i}."))
        return out

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = True

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"{k}: shape {a.shape} != {p.shape}")
            p.data = a.copy()


def param(array, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=requires_grad)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> Tensor:
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def zeros(*shape: int) -> Tensor:
    return param(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return param(np.ones(shape))


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


def layer_norm(x, gain=None, bias=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    mu = ad.mean_last(x)
    var = ad.var_last(x)
    y = (x - mu) / ad.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y
