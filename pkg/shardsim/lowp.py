"""
低精度浮点格式的软件模拟

所有算术在 float64 中完成，只在存储边界按格式量化（quantize-on-store）。
舍入一律为就近偶数；下溢归零；上溢按格式的 overflow_policy 处理。

内置格式：
    fp16   1-5-10  IEEE binary16
    m169   1-6-9   Adam 一阶矩、误差缓冲、P/Q 因子
    m0610  0-6-10  Adam 二阶矩（无符号）
    fp32   1-8-23  未压缩参数组
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Optional, Union

import torch

from shardsim.errors import CalibrationError, FormatError

logger = logging.getLogger(__name__)

ArrayLike = Union[torch.Tensor, Iterable[float], float]


class OverflowPolicy(str, Enum):
    """上溢处理方式"""
    TO_INFINITY = "to_infinity"
    CLAMP_TO_MAX = "clamp_to_max"


class NonfiniteEncoding(str, Enum):
    """非有限值的编码位置

    IEEE: 最高指数码整体保留给 Inf/NaN
    TOP_CODE: 只保留最高指数码下全 1 的尾数（Inf）；有符号格式用负零编码 NaN
    """
    IEEE = "ieee"
    TOP_CODE = "top_code"


@dataclass(frozen=True)
class FloatFormatSpec:
    """参数化的 符号-指数-尾数 浮点格式"""
    name: str
    sign_bits: int
    exponent_bits: int
    significand_bits: int
    bias: int
    reserves_inf_nan: bool = True
    supports_subnormals: bool = True
    overflow_policy: OverflowPolicy = OverflowPolicy.TO_INFINITY
    nonfinite_encoding: NonfiniteEncoding = NonfiniteEncoding.IEEE

    def __post_init__(self):
        if self.sign_bits not in (0, 1):
            raise FormatError(f"{self.name}: sign_bits must be 0 or 1, got {self.sign_bits}")
        if self.exponent_bits < 2 or self.significand_bits < 1:
            raise FormatError(f"{self.name}: need at least 2 exponent bits and 1 significand bit")
        if self.significand_bits > 40:
            raise FormatError(f"{self.name}: significand too wide to emulate exactly in float64")
        if self.overflow_policy == OverflowPolicy.TO_INFINITY and not self.has_infinity:
            raise FormatError(f"{self.name}: to_infinity overflow needs an infinity encoding")
        if self.emax < self.emin:
            raise FormatError(f"{self.name}: bias {self.bias} leaves no normal exponent")

    @property
    def total_bits(self) -> int:
        return self.sign_bits + self.exponent_bits + self.significand_bits

    @property
    def signed(self) -> bool:
        return self.sign_bits == 1

    @property
    def has_infinity(self) -> bool:
        return self.reserves_inf_nan

    @property
    def has_nan(self) -> bool:
        if not self.reserves_inf_nan:
            return False
        if self.nonfinite_encoding == NonfiniteEncoding.TOP_CODE:
            return self.signed
        return True

    @property
    def emin(self) -> int:
        """最小正规数的无偏指数"""
        return 1 - self.bias

    @property
    def emax(self) -> int:
        """最大有限值的无偏指数"""
        top_code = (1 << self.exponent_bits) - 1
        if self.reserves_inf_nan and self.nonfinite_encoding == NonfiniteEncoding.IEEE:
            return top_code - 1 - self.bias
        return top_code - self.bias

    @property
    def max_finite(self) -> float:
        m = self.significand_bits
        if self.reserves_inf_nan and self.nonfinite_encoding == NonfiniteEncoding.TOP_CODE:
            significand = 2.0 - math.ldexp(1.0, 1 - m)
        else:
            significand = 2.0 - math.ldexp(1.0, -m)
        return math.ldexp(significand, self.emax)

    @property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.emin)

    @property
    def min_positive(self) -> float:
        if self.supports_subnormals:
            return math.ldexp(1.0, self.emin - self.significand_bits)
        return self.min_normal

    @property
    def min_exponent(self) -> int:
        """最小正数的指数 floor(log2(min_positive))"""
        return self.emin - self.significand_bits if self.supports_subnormals else self.emin

    @property
    def exponent_midpoint(self) -> int:
        """可表示指数范围的中点（向下取整），用于缩放常数校准"""
        return math.floor((self.min_exponent + self.emax) / 2)

    def describe(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "layout": f"{self.sign_bits}-{self.exponent_bits}-{self.significand_bits}",
            "bias": self.bias,
            "emin": self.emin,
            "emax": self.emax,
            "max_finite": self.max_finite,
            "min_normal": self.min_normal,
            "min_positive": self.min_positive,
            "has_infinity": self.has_infinity,
            "has_nan": self.has_nan,
            "supports_subnormals": self.supports_subnormals,
            "overflow_policy": self.overflow_policy.value,
            "nonfinite_encoding": self.nonfinite_encoding.value,
        }


# 1-6-9 / 0-6-10 的偏置：最大有限值 (2 - 2^-8) * 2^3 = 15.96875，略小于 16
M169_BIAS = 60

FP16 = FloatFormatSpec("fp16", 1, 5, 10, 15)
M169 = FloatFormatSpec("m169", 1, 6, 9, M169_BIAS, nonfinite_encoding=NonfiniteEncoding.TOP_CODE)
M0610 = FloatFormatSpec("m0610", 0, 6, 10, M169_BIAS, nonfinite_encoding=NonfiniteEncoding.TOP_CODE)
FP32 = FloatFormatSpec("fp32", 1, 8, 23, 127)

FORMATS: Dict[str, FloatFormatSpec] = {f.name: f for f in (FP16, M169, M0610, FP32)}

_ALIASES = {"1-5-10": "fp16", "1-6-9": "m169", "0-6-10": "m0610", "1-8-23": "fp32"}


def get_format(name: str) -> FloatFormatSpec:
    """按名称或位布局（如 "1-6-9"）查找内置格式"""
    key = _ALIASES.get(name, name).lower()
    try:
        return FORMATS[key]
    except KeyError:
        raise FormatError(f"unknown format '{name}', known: {sorted(FORMATS)}") from None


def _as_float64(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(x, dtype=torch.float64)


def _pow2(exponent: torch.Tensor) -> torch.Tensor:
    """精确的 2^exponent（float64 正规指数范围内，直接拼指数位）"""
    biased = torch.clamp(exponent, min=-1022, max=1023) + 1023
    return (biased << 52).view(torch.float64)


def quantize_tensor(x: ArrayLike, fmt: Optional[FloatFormatSpec]) -> torch.Tensor:
    """
    逐元素量化到 fmt，返回 float64 张量

    fmt 为 None 时原样返回（宽精度路径）。
    """
    values = _as_float64(x)
    if fmt is None:
        return values.clone()

    nan_mask = torch.isnan(values)
    if not fmt.has_nan and bool(nan_mask.any()):
        raise FormatError(f"NaN cannot be encoded in {fmt.name}")

    finite = torch.isfinite(values)
    magnitude = torch.where(finite, values.abs(), torch.zeros_like(values))

    # floor(log2|x|)，低于 emin 的落入次正规区间
    _, exp = torch.frexp(magnitude)
    exponent = torch.clamp(exp.to(torch.int64) - 1, min=fmt.emin)
    spacing = _pow2(exponent - fmt.significand_bits)
    rounded = torch.round(magnitude / spacing) * spacing

    if not fmt.supports_subnormals:
        rounded = torch.where(rounded < fmt.min_normal, torch.zeros_like(rounded), rounded)

    overflow_value = math.inf if fmt.overflow_policy == OverflowPolicy.TO_INFINITY else fmt.max_finite
    infinite_input = torch.isinf(values)
    rounded = torch.where((rounded > fmt.max_finite) | infinite_input,
                          torch.full_like(rounded, overflow_value), rounded)

    negative = values < 0
    if fmt.signed:
        if fmt.nonfinite_encoding == NonfiniteEncoding.TOP_CODE:
            # 负零码是 NaN，零统一为 +0
            result = torch.where(negative & (rounded != 0), -rounded, rounded)
        else:
            result = torch.where(negative, -rounded, rounded)
    else:
        result = torch.where(negative, torch.zeros_like(rounded), rounded)

    return torch.where(nan_mask, values, result)


def quantize(x: float, fmt: Optional[FloatFormatSpec]) -> float:
    """量化单个实数"""
    return float(quantize_tensor(torch.tensor([float(x)], dtype=torch.float64), fmt)[0])


def max_finite(fmt: FloatFormatSpec) -> float:
    return fmt.max_finite


def min_positive(fmt: FloatFormatSpec) -> float:
    return fmt.min_positive


def is_representable(x: float, fmt: FloatFormatSpec) -> bool:
    if math.isnan(x):
        return fmt.has_nan
    return quantize(x, fmt) == x


def ulp(x: float, fmt: FloatFormatSpec) -> float:
    """|x| 所在区间的相邻可表示值间距"""
    if x == 0 or not math.isfinite(x):
        return fmt.min_positive if x == 0 else math.inf
    exponent = min(max(math.frexp(abs(x))[1] - 1, fmt.emin), fmt.emax)
    return math.ldexp(1.0, exponent - fmt.significand_bits)


def ulp_tensor(x: ArrayLike, fmt: FloatFormatSpec) -> torch.Tensor:
    """逐元素的 ulp；0 处为最小正数，超出最大有限值按最大指数，非有限为 inf"""
    values = _as_float64(x)
    finite = torch.isfinite(values)
    _, exp = torch.frexp(torch.where(finite, values.abs(), torch.zeros_like(values)))
    exponent = torch.clamp(exp.to(torch.int64) - 1, min=fmt.emin, max=fmt.emax)
    spacing = _pow2(exponent - fmt.significand_bits)
    return torch.where(finite, spacing, torch.full_like(spacing, math.inf))


def count_underflow(values: ArrayLike, fmt: FloatFormatSpec) -> int:
    """非零有限值被量化为 0 的个数"""
    data = _as_float64(values)
    q = quantize_tensor(torch.where(torch.isnan(data), torch.zeros_like(data), data), fmt)
    return int(((data != 0) & torch.isfinite(data) & (q == 0)).sum())


def representable_values(fmt: FloatFormatSpec) -> torch.Tensor:
    """枚举全部非负有限可表示值（升序，仅限 ≤16 位格式）"""
    if fmt.total_bits > 16:
        raise FormatError(f"enumeration is limited to 16-bit formats, {fmt.name} has {fmt.total_bits}")
    m = fmt.significand_bits
    top_code = (1 << fmt.exponent_bits) - 1
    codes = torch.arange(1 << m, dtype=torch.float64)
    values = [codes * math.ldexp(1.0, fmt.emin - m)] if fmt.supports_subnormals else [torch.zeros(1, dtype=torch.float64)]
    for biased in range(1, top_code + 1):
        significands = codes
        if fmt.reserves_inf_nan and biased == top_code:
            if fmt.nonfinite_encoding == NonfiniteEncoding.IEEE:
                break
            significands = codes[:-1]
        values.append((1.0 + significands / (1 << m)) * math.ldexp(1.0, biased - fmt.bias))
    return torch.unique(torch.cat(values))


def representable_census(fmt: FloatFormatSpec) -> Dict[str, object]:
    """编码空间统计：正规数、次正规数、零、Inf、NaN 各占多少个码"""
    m = fmt.significand_bits
    signs = 2 if fmt.signed else 1
    exponent_codes = 1 << fmt.exponent_bits
    per_exponent = (1 << m) * signs

    if not fmt.reserves_inf_nan:
        inf_codes, nan_codes, zero_codes = 0, 0, signs
        normal = (exponent_codes - 1) * per_exponent
    elif fmt.nonfinite_encoding == NonfiniteEncoding.IEEE:
        inf_codes, nan_codes, zero_codes = signs, per_exponent - signs, signs
        normal = (exponent_codes - 2) * per_exponent
    else:
        inf_codes = signs
        nan_codes = 1 if fmt.signed else 0
        zero_codes = 1
        normal = (exponent_codes - 1) * per_exponent - inf_codes

    # 指数码 0 的非零尾数：支持次正规时是次正规数，否则冲刷为零
    subnormal = ((1 << m) - 1) * signs
    census = fmt.describe()
    census.update({
        "total_codes": 1 << fmt.total_bits,
        "normal_codes": normal,
        "subnormal_codes": subnormal,
        "zero_codes": zero_codes,
        "inf_codes": inf_codes,
        "nan_codes": nan_codes,
        "distinct_finite_nonnegative": normal // signs + ((1 << m) - 1 if fmt.supports_subnormals else 0) + 1,
    })
    return census


class ExponentHistogram(dict):
    """
    指数直方图：floor(log2|v|) -> 计数

    零与非有限值不进入映射，分别计入 zeros / nonfinite。
    """

    def __init__(self, counts: Optional[Dict[int, int]] = None, zeros: int = 0, nonfinite: int = 0):
        super().__init__(sorted((counts or {}).items()))
        self.zeros = zeros
        self.nonfinite = nonfinite

    @classmethod
    def from_values(cls, values: ArrayLike) -> "ExponentHistogram":
        data = _as_float64(values).reshape(-1)
        finite = torch.isfinite(data)
        nonzero = finite & (data != 0)
        _, exp = torch.frexp(data[nonzero].abs())
        keys, counts = torch.unique(exp.to(torch.int64) - 1, return_counts=True)
        return cls(
            {int(k): int(c) for k, c in zip(keys.tolist(), counts.tolist())},
            zeros=int((finite & (data == 0)).sum()),
            nonfinite=int((~finite).sum()),
        )

    @property
    def total(self) -> int:
        """非零有限值个数"""
        return sum(self.values())

    def merge(self, other: "ExponentHistogram") -> "ExponentHistogram":
        counts = dict(self)
        for k, v in other.items():
            counts[k] = counts.get(k, 0) + v
        return ExponentHistogram(counts, self.zeros + other.zeros, self.nonfinite + other.nonfinite)

    def median_exponent(self) -> int:
        """下中位数指数"""
        total = self.total
        if total == 0:
            raise CalibrationError("histogram has no nonzero finite values")
        target = (total + 1) // 2
        running = 0
        for exponent in sorted(self):
            running += self[exponent]
            if running >= target:
                return exponent
        raise AssertionError("unreachable")

    def to_rows(self) -> list:
        return [{"exponent": k, "count": v} for k, v in sorted(self.items())]


def exponent_histogram(values: ArrayLike) -> ExponentHistogram:
    return ExponentHistogram.from_values(values)
