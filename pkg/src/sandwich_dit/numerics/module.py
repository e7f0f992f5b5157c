from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


def param(array) -> Tensor:
    return Tensor(array, requires_grad=True)


class Module:
    """Parameter container. Tensors with ``requires_grad`` set are parameters;
    attributes holding modules (or lists of modules) are walked recursively."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in place; returns the names that were loaded."""
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if strict and missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        loaded = []
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    if strict:
                        raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
                    continue
                p.data[...] = arr
                loaded.append(name)
        return loaded

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
