"""Parameter containers and the basic layers shared by the architecture modules."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Container of parameters, buffers and submodules.

    Attributes holding trainable Tensors, Modules, or lists of Modules are
    discovered in assignment order, so names and iteration order are stable.
    Buffers are plain ndarrays listed in ``_buffer_names``.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        names = self.__dict__.setdefault("_buffer_names", [])
        if name not in names:
            names.append(name)
        setattr(self, name, value)

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.__dict__.get("_buffer_names", []):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: np.asarray(b) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (set(params) | buffers) - set(state)
        if missing:
            raise KeyError(f"state dict lacks entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.array(state[name], dtype=getattr(owner, attr).dtype))

    def _resolve(self, dotted: str) -> tuple[Module, str]:
        owner: Module = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = getattr(owner, part) if not part.isdigit() else owner[int(part)]
        return owner, attr

    def astype(self, dtype) -> Module:
        """Cast every parameter and floating buffer in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, buf in list(self.named_buffers()):
            owner, attr = self._resolve(name)
            if np.issubdtype(np.asarray(buf).dtype, np.floating):
                setattr(owner, attr, np.asarray(buf).astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, items=()):
        self.items = list(items)

    def __getitem__(self, i):
        return self.items[i]

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


class Linear(Module):
    """Affine map over the last axis, ``y = x @ weight + bias``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        bound = 1.0 / np.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else rng.uniform(-bound, bound, (d_in, d_out))
        self.weight = tn.parameter(w)
        self.bias = tn.parameter(np.zeros(d_out) if zero else rng.uniform(-bound, bound, d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class GroupedLinear(Module):
    """``G`` independent linear maps applied to ``x[G, ..., d_in]``."""

    def __init__(self, groups: int, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = tn.parameter(rng.uniform(-bound, bound, (groups, d_in, d_out)))
        self.bias = tn.parameter(rng.uniform(-bound, bound, (groups, 1, d_out))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        g = x.shape[0]
        lead = x.shape[1:-1]
        flat = x.reshape(g, -1, x.shape[-1]) @ self.weight
        if self.bias is not None:
            flat = flat + self.bias
        return flat.reshape((g,) + lead + (self.weight.shape[-1],))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = tn.parameter(np.ones(dim), decay=False)
        self.bias = tn.parameter(np.zeros(dim), decay=False)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return tn.layernorm(x, self.gain, self.bias, self.eps)
