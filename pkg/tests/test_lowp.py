"""
低精度格式测试

覆盖内置格式常数、就近偶数舍入、上溢/下溢/NaN 处理、编码统计与指数直方图
"""

import math
import os
import sys

import pytest
import torch

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.errors import CalibrationError, FormatError
from shardsim.lowp import (FP16, FP32, M0610, M169, ExponentHistogram, FloatFormatSpec, OverflowPolicy,
                           count_underflow, get_format, is_representable, quantize, quantize_tensor,
                           representable_census, representable_values, ulp, ulp_tensor)


def test_m169_constants():
    """测试 1-6-9 格式的范围常数"""
    assert M169.bias == 60
    assert M169.max_finite == 15.96875
    assert M169.min_positive == 2.0 ** -68
    assert M169.exponent_midpoint == -33
    assert M169.has_nan and M169.has_infinity


def test_m0610_is_unsigned_without_nan():
    """测试 0-6-10 无符号且没有 NaN 编码"""
    assert not M0610.signed
    assert not M0610.has_nan
    assert M0610.max_finite == (2.0 - 2.0 ** -9) * 8
    assert M0610.min_positive == 2.0 ** -69


def test_fp16_matches_ieee():
    """测试 fp16 的常数与 IEEE binary16 一致"""
    assert FP16.max_finite == 65504.0
    assert FP16.min_positive == 2.0 ** -24
    assert FP16.exponent_midpoint == -5
    values = torch.tensor([1e-3, 3.14159, 70000.0, -2.0 ** -26], dtype=torch.float64)
    expected = values.to(torch.float16).to(torch.float64)
    assert torch.equal(quantize_tensor(values, FP16), expected)


def test_get_format_by_layout_alias():
    """测试按位布局查找格式"""
    assert get_format("1-6-9") is M169
    assert get_format("M0610") is M0610
    assert get_format("fp32") is FP32
    with pytest.raises(FormatError):
        get_format("bf16")


def test_round_half_to_even():
    """测试舍入为就近偶数"""
    assert quantize(1.0 + 2.0 ** -10, M169) == 1.0
    assert quantize(1.0 + 3 * 2.0 ** -10, M169) == 1.0 + 2.0 ** -8


def test_overflow_and_underflow():
    """测试上溢为无穷、下溢为零"""
    assert quantize(20.0, M169) == math.inf
    assert quantize(-20.0, M169) == -math.inf
    assert quantize(2.0 ** -70, M169) == 0.0
    assert quantize(2.0 ** -68, M169) == 2.0 ** -68


def test_clamp_overflow_policy():
    """测试 clamp_to_max 上溢策略"""
    clamped = FloatFormatSpec("clamped", 1, 5, 10, 15, overflow_policy=OverflowPolicy.CLAMP_TO_MAX)
    assert quantize(1e9, clamped) == 65504.0


def test_nan_handling():
    """测试 NaN：有符号格式保留，0-6-10 报错"""
    assert math.isnan(quantize(math.nan, M169))
    with pytest.raises(FormatError):
        quantize(math.nan, M0610)


def test_unsigned_format_flushes_negatives():
    """测试无符号格式的负数写为 0"""
    assert quantize(-1.5, M0610) == 0.0


def test_wide_path_is_identity():
    """测试 fmt 为 None 时原样返回"""
    values = torch.tensor([1.0 / 3.0, 1e300], dtype=torch.float64)
    assert torch.equal(quantize_tensor(values, None), values)


def test_invalid_format_rejected():
    """测试非法格式定义"""
    with pytest.raises(FormatError):
        FloatFormatSpec("bad", 2, 5, 10, 15)
    with pytest.raises(FormatError):
        FloatFormatSpec("noinf", 1, 5, 10, 15, reserves_inf_nan=False)


def test_ulp_and_representable():
    """测试 ulp 与可表示性"""
    assert ulp(1.0, M169) == 2.0 ** -9
    assert ulp(0.0, M169) == M169.min_positive
    assert is_representable(15.96875, M169)
    assert not is_representable(0.1, M169)


def test_representable_values_match_census():
    """测试可表示值枚举与编码统计一致"""
    values = representable_values(M169)
    census = representable_census(M169)
    assert values.numel() == census["distinct_finite_nonnegative"]
    assert float(values.max()) == M169.max_finite
    assert float(values[1]) == M169.min_positive
    with pytest.raises(FormatError):
        representable_values(FP32)


def test_census_codes_cover_encoding_space():
    """测试各类编码数之和等于编码总数"""
    for fmt in (FP16, M169, M0610):
        census = representable_census(fmt)
        parts = ("normal_codes", "subnormal_codes", "zero_codes", "inf_codes", "nan_codes")
        assert sum(census[p] for p in parts) == census["total_codes"]
    assert representable_census(M169)["nan_codes"] == 1
    assert representable_census(FP16)["nan_codes"] == 2046


def test_count_underflow():
    """测试下溢计数不含原本为零的元素"""
    values = torch.tensor([0.0, 2.0 ** -30, 1.0, -2.0 ** -26], dtype=torch.float64)
    assert count_underflow(values, FP16) == 2


def test_exponent_histogram():
    """测试指数直方图与中位指数"""
    histogram = ExponentHistogram.from_values([0.0, 1.0, 1.5, 0.25, 8.0, math.inf])
    assert dict(histogram) == {-2: 1, 0: 2, 3: 1}
    assert histogram.zeros == 1
    assert histogram.nonfinite == 1
    assert histogram.median_exponent() == 0
    merged = histogram.merge(ExponentHistogram({5: 4}))
    assert merged.total == 8
    with pytest.raises(CalibrationError):
        ExponentHistogram().median_exponent()


def _log_uniform(count, low_exponent, high_exponent, seed):
    """符号随机、指数在 [low, high) 均匀的值，先取整到 float32 以免参考转换二次舍入"""
    generator = torch.Generator().manual_seed(seed)
    exponents = torch.rand(count, generator=generator, dtype=torch.float64) * (high_exponent - low_exponent)
    signs = torch.where(torch.rand(count, generator=generator) < 0.5, -1.0, 1.0).to(torch.float64)
    values = signs * torch.exp2(exponents + low_exponent)
    return values.to(torch.float32).to(torch.float64)


def test_fp16_grid_matches_torch_half():
    """测试 10000 个跨越次正规到上溢的值与 torch.float16 逐位一致"""
    values = _log_uniform(10_000, -27, 17, seed=0)
    expected = values.to(torch.float16).to(torch.float64)
    assert torch.equal(quantize_tensor(values, FP16), expected)


@pytest.mark.parametrize("fmt", [FP16, M169], ids=lambda f: f.name)
def test_quantize_properties(fmt):
    """测试量化的幂等、单调与符号对称"""
    low = fmt.emin - fmt.significand_bits - 3
    values = _log_uniform(4000, low, fmt.emax + 2, seed=1)
    once = quantize_tensor(values, fmt)
    assert torch.equal(quantize_tensor(once, fmt), once)
    assert torch.equal(quantize_tensor(-values, fmt), -once)
    ordered = quantize_tensor(torch.sort(values).values, fmt)
    assert bool((ordered[1:] >= ordered[:-1]).all())


def test_ulp_tensor_matches_scalar():
    """测试逐元素 ulp 与标量 ulp 一致"""
    values = torch.tensor([0.0, 2.0 ** -70, 1.0, -0.75, 15.0, 100.0, math.inf], dtype=torch.float64)
    units = ulp_tensor(values, M169)
    assert units.tolist() == [ulp(float(v), M169) for v in values]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
