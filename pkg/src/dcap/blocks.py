"""Convolutional building blocks: ConvBlock, MDRC, AaSP with SE attention, SSCA,
plus the SPPF and C3 units they are compared against.

Blocks are plain containers of parameter tensors. Forward passes are the
``*_forward`` functions; ``block(x)`` dispatches to them.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _check_channels(name: str, x: Tensor, expected: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected NCHW input, got shape {x.shape}")
    if x.shape[1] != expected:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, block expects {expected}")


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.weight.shape[2:]
        if kh != kw:
            raise ShapeError(f"square kernels only, got {kh}x{kw}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")

    @classmethod
    def create(cls, cin: int, cout: int, k: int, rng: np.random.Generator, *, stride: int = 1,
               dilation: int = 1, padding: int | None = None, dtype=np.float32) -> ConvParams:
        if padding is None:
            padding = dilation * (k - 1) // 2
        weight = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        return cls(weight, _zeros((cout,), dtype), stride, dilation, padding)

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


# called as fn(block, pre_activation) by every ConvBlock while set
_conv_observer: Callable[[ConvBlock, Tensor], None] | None = None


@contextmanager
def observe_convs(fn: Callable[[ConvBlock, Tensor], None]):
    global _conv_observer
    prev, _conv_observer = _conv_observer, fn
    try:
        yield
    finally:
        _conv_observer = prev


class Block:
    """Shared helpers; subclasses list their parameter-bearing parts in ``_parts``."""

    _parts: tuple[str, ...] = ()

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for name in self._parts:
            part = getattr(self, name)
            items = part if isinstance(part, (list, tuple)) else [part]
            for item in items:
                out.extend(item.parameters())
        return out

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0


@dataclass
class ConvBlock(Block):
    params: ConvParams
    activation: str | None = "silu"
    _parts = ("params",)

    @classmethod
    def create(cls, cin, cout, k, rng, *, stride=1, dilation=1, activation="silu", dtype=np.float32):
        return cls(ConvParams.create(cin, cout, k, rng, stride=stride, dilation=dilation, dtype=dtype), activation)

    @property
    def c1(self):
        return self.params.cin

    @property
    def c2(self):
        return self.params.cout

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels("ConvBlock", x, self.params.cin)
        y = self.params(x)
        if _conv_observer is not None:
            _conv_observer(self, y)
        return T.activate(y, self.activation) if self.activation else y


@dataclass
class MDRCBlock(Block):
    """Parallel dilated 3x3 branches, channel concat, 1x1 fuse, identity shortcut."""

    c1: int
    c2: int
    dilations: tuple[int, ...]
    branches: list[ConvBlock]
    fuse: ConvBlock
    stride: int = 1
    _parts = ("branches", "fuse")

    @classmethod
    def create(cls, c1, c2, rng, *, dilations=(2, 3), stride=1, dtype=np.float32):
        dilations = tuple(int(d) for d in dilations)
        if not dilations or min(dilations) < 1:
            raise ValueError(f"dilations must be a non-empty list of positive ints, got {dilations}")
        branches = [ConvBlock.create(c1, c2, 3, rng, stride=stride, dilation=d, dtype=dtype) for d in dilations]
        fuse = ConvBlock.create(len(dilations) * c2, c2, 1, rng, dtype=dtype)
        return cls(c1, c2, dilations, branches, fuse, stride)

    @property
    def residual(self) -> bool:
        return self.c1 == self.c2 and self.stride == 1

    def __call__(self, x):
        return mdrc_forward(self, x)


def mdrc_forward(block: MDRCBlock, x: Tensor) -> Tensor:
    _check_channels("MDRC", x, block.c1)
    y = block.fuse(T.concat_channels([b(x) for b in block.branches]))
    return x + y if block.residual else y


@dataclass
class SEAttention(Block):
    """Squeeze (global mean), excite (dense-relu-dense-sigmoid), scale."""

    channels: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    _parts = ()

    REDUCTION = 16

    @classmethod
    def create(cls, channels, rng, *, reduction=REDUCTION, dtype=np.float32):
        hidden = max(channels // reduction, 1)
        return cls(
            channels,
            kaiming_uniform(rng, (channels, hidden), channels, dtype), _zeros((hidden,), dtype),
            kaiming_uniform(rng, (hidden, channels), hidden, dtype), _zeros((channels,), dtype),
        )

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def gates(self, x: Tensor) -> Tensor:
        """Per-channel weights s in (0, 1), shape NC11."""
        _check_channels("SE", x, self.channels)
        n, c = x.shape[:2]
        z = T.global_avg_pool(x).reshape(n, c)
        s = T.sigmoid(T.dense(T.relu(T.dense(z, self.w1, self.b1)), self.w2, self.b2))
        return s.reshape(n, c, 1, 1)

    def __call__(self, x):
        return se_forward(self, x)


def se_forward(se: SEAttention, x: Tensor) -> Tensor:
    return T.elementwise(x, se.gates(x), "mul")


@dataclass
class AaSPBlock(Block):
    """1x1 reduce, two chained max-pools of growing size, concat, 1x1 fuse, SE."""

    c1: int
    c2: int
    reduce: ConvBlock
    fuse: ConvBlock
    se: SEAttention
    pool_kernels: tuple[int, int] = (5, 9)
    _parts = ("reduce", "fuse", "se")

    @classmethod
    def create(cls, c1, c2, rng, *, pool_kernels=(5, 9), dtype=np.float32):
        ch = max(c1 // 2, 1)
        return cls(
            c1, c2,
            ConvBlock.create(c1, ch, 1, rng, dtype=dtype),
            ConvBlock.create(3 * ch, c2, 1, rng, dtype=dtype),
            SEAttention.create(c2, rng, dtype=dtype),
            tuple(pool_kernels),
        )

    def __call__(self, x):
        return aasp_forward(self, x)


def aasp_forward(block: AaSPBlock, x: Tensor) -> Tensor:
    _check_channels("AaSP", x, block.c1)
    k1, k2 = block.pool_kernels
    x1 = block.reduce(x)
    y1 = T.maxpool2d(x1, k1, 1, k1 // 2)
    y2 = T.maxpool2d(y1, k2, 1, k2 // 2)
    return se_forward(block.se, block.fuse(T.concat_channels([x1, y1, y2])))


@dataclass
class SSCABlock(Block):
    """Spatial gate (7x7 conv -> sigmoid) times channel gate (pool -> 1x1 conv -> sigmoid)."""

    channels: int
    spatial_conv: ConvParams
    channel_conv: ConvParams
    _parts = ("spatial_conv", "channel_conv")

    @classmethod
    def create(cls, channels, rng, *, dtype=np.float32):
        return cls(
            channels,
            ConvParams.create(channels, 1, 7, rng, padding=3, dtype=dtype),
            ConvParams.create(channels, channels, 1, rng, dtype=dtype),
        )

    def maps(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (spatial map N1HW, channel map NC11)."""
        _check_channels("SSCA", x, self.channels)
        ms = T.sigmoid(self.spatial_conv(x))
        mc = T.sigmoid(self.channel_conv(T.global_avg_pool(x)))
        return ms, mc

    def __call__(self, x):
        return ssca_forward(self, x)


def ssca_forward(block: SSCABlock, x: Tensor) -> Tensor:
    ms, mc = block.maps(x)
    return x * ms * mc


@dataclass
class SPPFBlock(Block):
    """1x1 reduce, three chained 5x5 max-pools, concat of four maps, 1x1 fuse."""

    c1: int
    c2: int
    reduce: ConvBlock
    fuse: ConvBlock
    k: int = 5
    _parts = ("reduce", "fuse")

    @classmethod
    def create(cls, c1, c2, rng, *, k=5, dtype=np.float32):
        ch = max(c1 // 2, 1)
        return cls(c1, c2, ConvBlock.create(c1, ch, 1, rng, dtype=dtype),
                   ConvBlock.create(4 * ch, c2, 1, rng, dtype=dtype), k)

    def __call__(self, x):
        return sppf_forward(self, x)


def sppf_forward(block: SPPFBlock, x: Tensor) -> Tensor:
    _check_channels("SPPF", x, block.c1)
    maps = [block.reduce(x)]
    for _ in range(3):
        maps.append(T.maxpool2d(maps[-1], block.k, 1, block.k // 2))
    return block.fuse(T.concat_channels(maps))


@dataclass
class Bottleneck(Block):
    cv1: ConvBlock
    cv2: ConvBlock | MDRCBlock
    shortcut: bool = True
    _parts = ("cv1", "cv2")

    def __call__(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.shortcut else y


@dataclass
class C3Block(Block):
    """Two 1x1 paths, a bottleneck chain on one of them, concat, 1x1 fuse.

    With ``use_mdrc`` the 3x3 conv of every bottleneck is an MDRC block.
    """

    c1: int
    c2: int
    cv1: ConvBlock
    cv2: ConvBlock
    m: list[Bottleneck]
    cv3: ConvBlock
    use_mdrc: bool = False
    _parts = ("cv1", "cv2", "m", "cv3")

    @classmethod
    def create(cls, c1, c2, rng, *, n=1, use_mdrc=False, dilations=(2, 3), dtype=np.float32):
        ch = max(c2 // 2, 1)
        cv1 = ConvBlock.create(c1, ch, 1, rng, dtype=dtype)
        cv2 = ConvBlock.create(c1, ch, 1, rng, dtype=dtype)
        m = []
        for _ in range(n):
            inner = ConvBlock.create(ch, ch, 1, rng, dtype=dtype)
            if use_mdrc:
                outer = MDRCBlock.create(ch, ch, rng, dilations=dilations, dtype=dtype)
            else:
                outer = ConvBlock.create(ch, ch, 3, rng, dtype=dtype)
            m.append(Bottleneck(inner, outer))
        cv3 = ConvBlock.create(2 * ch, c2, 1, rng, dtype=dtype)
        return cls(c1, c2, cv1, cv2, m, cv3, use_mdrc)

    def __call__(self, x):
        return c3_forward(self, x)


def c3_forward(block: C3Block, x: Tensor) -> Tensor:
    _check_channels("C3", x, block.c1)
    a = block.cv1(x)
    for unit in block.m:
        a = unit(a)
    return block.cv3(T.concat_channels([a, block.cv2(x)]))
