"""Learnable parameters: the named store plus the conv and norm bundles built from it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from gatedscale.errors import ShapeError
from gatedscale.rng import Stream
from gatedscale.tensor import DTYPES, Tensor


@dataclass
class Conv2dParams:
    """Weight (C_out, C_in, k, k) and bias (1, C_out, 1, 1) of one convolution."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        c_out, _, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise ShapeError(f"kernels are 1x1 or 3x3, got {kh}x{kw}")
        if self.dilation > 1 and kh != 3:
            raise ShapeError("dilation > 1 needs a 3x3 kernel")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(
                f"bad geometry stride={self.stride} padding={self.padding} dilation={self.dilation}"
            )
        if self.bias.shape != (1, c_out, 1, 1):
            raise ShapeError(f"bias must be (1, {c_out}, 1, 1), got {self.bias.shape}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> Conv2dParams:
        """1x1 identity convolution with zero bias."""
        w = np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros((1, channels, 1, 1), dtype), requires_grad=True))


@dataclass
class NormParams:
    """Batch normalization: learnable gamma/beta plus running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"  # train | eval

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, mode: str = "eval") -> NormParams:
        """gamma 1, beta 0, running mean 0, running var 1."""
        shape = (1, channels, 1, 1)
        return cls(
            gamma=Tensor(np.ones(shape, dtype), requires_grad=True),
            beta=Tensor(np.zeros(shape, dtype), requires_grad=True),
            running_mean=Tensor(np.zeros(shape, dtype)),
            running_var=Tensor(np.ones(shape, dtype)),
            mode=mode,
        )


@dataclass
class Entry:
    tensor: Tensor
    momentum: np.ndarray
    trainable: bool = True
    decay: bool = True


class ParamStore:
    """Named, insertion-ordered parameters with their momentum buffers.

    Non-trainable entries (normalization running statistics) live here too so
    that checkpoints capture them, but they are left out of parameter counts
    and optimizer updates.
    """

    def __init__(self, dtype="f32", seed: int = 0):
        self.dtype = DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype)
        self.seed = seed
        self._entries: dict[str, Entry] = {}

    def add(self, name: str, data, *, trainable: bool = True, decay: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(data, dtype=self.dtype), requires_grad=trainable, name=name)
        self._entries[name] = Entry(tensor, np.zeros_like(tensor.data), trainable, decay)
        return tensor

    def conv(
        self,
        name: str,
        c_in: int,
        c_out: int,
        kernel: int = 1,
        *,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
    ) -> Conv2dParams:
        """Kaiming fan-in normal weights, zero bias. Padding defaults to 'same'."""
        fan_in = c_in * kernel * kernel
        draws = Stream(self.seed, f"{name}.weight").normal_array(c_out * fan_in)
        weight = (draws * np.sqrt(2.0 / fan_in)).reshape(c_out, c_in, kernel, kernel)
        if padding is None:
            padding = dilation * (kernel // 2)
        return Conv2dParams(
            weight=self.add(f"{name}.weight", weight),
            bias=self.add(f"{name}.bias", np.zeros((1, c_out, 1, 1)), decay=False),
            stride=stride,
            padding=padding,
            dilation=dilation,
        )

    def norm(self, name: str, channels: int) -> NormParams:
        shape = (1, channels, 1, 1)
        return NormParams(
            gamma=self.add(f"{name}.gamma", np.ones(shape), decay=False),
            beta=self.add(f"{name}.beta", np.zeros(shape), decay=False),
            running_mean=self.add(f"{name}.running_mean", np.zeros(shape), trainable=False),
            running_var=self.add(f"{name}.running_var", np.ones(shape), trainable=False),
        )

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> Iterator[tuple[str, Entry]]:
        return iter(self._entries.items())

    def trainable(self) -> Iterator[tuple[str, Entry]]:
        return ((n, e) for n, e in self._entries.items() if e.trainable)

    def total_param_count(self, where: Callable[[str], bool] | None = None) -> int:
        """Element count of trainable entries, optionally filtered by name."""
        return sum(
            e.tensor.size for n, e in self._entries.items() if e.trainable and (where is None or where(n))
        )

    def zero_grad(self) -> None:
        for _, e in self.trainable():
            e.tensor.zero_grad()

    def assign(self, name: str, data: np.ndarray) -> None:
        """Overwrite an entry's values in place (shape and dtype must match)."""
        t = self[name]
        if data.shape != t.shape:
            raise ShapeError(f"{name}: expected shape {t.shape}, got {data.shape}")
        if data.dtype != t.dtype:
            raise ShapeError(f"{name}: expected dtype {t.dtype}, got {data.dtype}")
        t.data[...] = data
