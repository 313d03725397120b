"""
最小化的一维/二维张量

数据以 float64 存放；设置 format_tag 时写入即按该格式量化。
所有归约都按固定顺序顺序累加，模拟结果逐位可复现。
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import torch

from shardsim.errors import ShapeMismatchError
from shardsim.lowp import FloatFormatSpec, quantize_tensor

Number = Union[int, float]


@dataclass(frozen=True, eq=False)
class Tensor:
    """不可变的一维/二维张量（构造后不再修改 data）"""
    data: torch.Tensor
    format_tag: Optional[FloatFormatSpec] = None

    def __post_init__(self):
        data = torch.as_tensor(self.data, dtype=torch.float64)
        if data.dim() not in (1, 2):
            raise ShapeMismatchError(f"only 1-D and 2-D tensors are supported, got shape {tuple(data.shape)}")
        if self.format_tag is not None:
            data = quantize_tensor(data, self.format_tag)
        object.__setattr__(self, "data", data.contiguous())

    # ---- 构造 ----

    @classmethod
    def of(cls, values: Iterable, fmt: Optional[FloatFormatSpec] = None) -> "Tensor":
        return cls(torch.as_tensor(values, dtype=torch.float64), fmt)

    @classmethod
    def zeros(cls, shape: Sequence[int], fmt: Optional[FloatFormatSpec] = None) -> "Tensor":
        return cls(torch.zeros(tuple(shape), dtype=torch.float64), fmt)

    @classmethod
    def eye(cls, rows: int, cols: Optional[int] = None) -> "Tensor":
        return cls(torch.eye(rows, cols if cols is not None else rows, dtype=torch.float64))

    @classmethod
    def randn(cls, shape: Sequence[int], generator: torch.Generator,
              fmt: Optional[FloatFormatSpec] = None) -> "Tensor":
        return cls(torch.randn(tuple(shape), generator=generator, dtype=torch.float64), fmt)

    # ---- 基本属性 ----

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def numel(self) -> int:
        return self.data.numel()

    @property
    def T(self) -> "Tensor":
        if self.data.dim() != 2:
            raise ShapeMismatchError("transpose needs a 2-D tensor")
        return Tensor(self.data.t().contiguous(), self.format_tag)

    def with_format(self, fmt: Optional[FloatFormatSpec]) -> "Tensor":
        """按 fmt 重新存储（fmt 为 None 时转为宽精度）"""
        return Tensor(self.data, fmt)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.data).all())

    def tolist(self):
        return self.data.tolist()

    # ---- 逐元素运算（结果为宽精度，除非给出 fmt） ----

    def _check_same_shape(self, other: "Tensor"):
        if self.shape != other.shape:
            raise ShapeMismatchError(f"shape mismatch: {self.shape} vs {other.shape}")

    def add(self, other: "Tensor", fmt: Optional[FloatFormatSpec] = None) -> "Tensor":
        self._check_same_shape(other)
        return Tensor(self.data + other.data, fmt)

    def sub(self, other: "Tensor", fmt: Optional[FloatFormatSpec] = None) -> "Tensor":
        self._check_same_shape(other)
        return Tensor(self.data - other.data, fmt)

    def mul(self, other: "Tensor", fmt: Optional[FloatFormatSpec] = None) -> "Tensor":
        self._check_same_shape(other)
        return Tensor(self.data * other.data, fmt)

    def scale(self, factor: Number, fmt: Optional[FloatFormatSpec] = None) -> "Tensor":
        return Tensor(self.data * factor, fmt)

    def __add__(self, other: "Tensor") -> "Tensor":
        return self.add(other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self.sub(other)

    def __mul__(self, factor: Number) -> "Tensor":
        return self.scale(factor)

    __rmul__ = __mul__

    def __truediv__(self, divisor: Number) -> "Tensor":
        return Tensor(self.data / divisor)

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False,
           fmt: Optional[FloatFormatSpec] = None) -> Tensor:
    """
    二维矩阵乘法，可选转置操作数

    每个输出元素按 k = 0..K-1 的顺序从 0 开始顺序累加，
    与朴素三重循环逐位一致。
    """
    if a.data.dim() != 2 or b.data.dim() != 2:
        raise ShapeMismatchError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    left = a.data.t() if transpose_a else a.data
    right = b.data.t() if transpose_b else b.data
    if left.shape[1] != right.shape[0]:
        raise ShapeMismatchError(
            f"inner dimensions differ: {tuple(left.shape)} x {tuple(right.shape)}"
            f" (transpose_a={transpose_a}, transpose_b={transpose_b})"
        )
    rows, inner = left.shape
    cols = right.shape[1]
    if inner == 0:
        return Tensor(torch.zeros(rows, cols, dtype=torch.float64), fmt)
    # products[i, k, j]; cumsum 沿 k 顺序累加
    products = left.unsqueeze(2) * right.unsqueeze(0)
    return Tensor(torch.cumsum(products, dim=1)[:, -1, :], fmt)


def sequential_sum(values: torch.Tensor) -> float:
    """按存储顺序从 0 开始顺序求和"""
    flat = values.reshape(-1).to(torch.float64)
    if flat.numel() == 0:
        return 0.0
    return float(torch.cumsum(flat, dim=0)[-1])


def squared_norm(a: Tensor) -> float:
    return sequential_sum(a.data * a.data)


def frobenius_norm(a: Tensor) -> float:
    return squared_norm(a) ** 0.5


def concat(parts: Sequence[Tensor], axis: int = 0, fmt: Optional[FloatFormatSpec] = None) -> Tensor:
    if not parts:
        raise ShapeMismatchError("nothing to concatenate")
    return Tensor(torch.cat([p.data for p in parts], dim=axis), fmt)


def split(t: Tensor, pieces: int, axis: int = 0) -> list:
    """沿 axis 均分为 pieces 份"""
    size = t.shape[axis]
    if pieces < 1 or size % pieces != 0:
        raise ShapeMismatchError(f"cannot split axis {axis} of size {size} into {pieces} pieces")
    return [Tensor(chunk.contiguous(), t.format_tag) for chunk in torch.chunk(t.data, pieces, dim=axis)]
