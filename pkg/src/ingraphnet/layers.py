from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .tensor import Parameter, Tensor, conv1x1, fully_connected, init_uniform


class Module:
    """Container that tracks :class:`Parameter` attributes and child modules."""

    def parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value.parameters()
            elif isinstance(value, dict):
                for v in value.values():
                    if isinstance(v, Module):
                        yield from v.parameters()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {list(state[name].shape)} vs model {list(p.shape)}"
                )
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float64)


class Affine(Module):
    """Weight/bias pair usable as a 1x1 convolution or a fully connected layer."""

    def __init__(self, name: str, din: int, dout: int, rng: np.random.Generator, group: str | None = None):
        self.weight = Parameter(f"{name}.weight", init_uniform(rng, (din, dout), din), group)
        self.bias = Parameter(f"{name}.bias", np.zeros(dout), group)

    def conv(self, x: Tensor) -> Tensor:
        return conv1x1(x, self.weight, self.bias)

    def fc(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)
