"""
逐残差块梯度缩放测试

覆盖缩放状态机（增长、回退、窗口、截断）、分支钩子、除数校准与下溢对比
"""

import math
import os
import sys

import pytest
import torch

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.errors import CalibrationError, ConfigurationError
from shardsim.gradscale import (BACKOFF_WINDOW, DecayChain, ResblockScaler, ScaleTrajectory,
                                backoffs_respect_window, calibrate_divisor, closed_form_scale,
                                filter_nonfinite, new_scaler, on_step, overflow_safe_scale, scale_incoming,
                                underflow_report, unscale_outgoing)
from shardsim.lowp import FP16, M169, ExponentHistogram
from shardsim.tensor import Tensor


def test_new_scaler_bounds():
    """测试初始缩放与截断区间"""
    s = new_scaler(4)
    assert s.scale == 4 * 2.0 ** 13
    assert s.clamp_lo == 4 * 2.0 ** 7
    assert s.clamp_hi == 4 * 2.0 ** 24
    with pytest.raises(ConfigurationError):
        new_scaler(0)


def test_growth_matches_closed_form():
    """测试全有限运行的缩放等于闭式解"""
    s = new_scaler(2)
    for step in range(1, 2001):
        applied, s = on_step(s, True, step)
        assert applied
    assert s.scale == pytest.approx(closed_form_scale(2, 2000), rel=1e-9)
    assert s.scale == pytest.approx(2 * 2.0 ** 15, rel=1e-9)


def test_growth_clamped_at_upper_bound():
    """测试增长不超过上界"""
    s = ResblockScaler(scale=2.0 ** 24, replica_count_M=1, clamp_lo=2.0 ** 7, clamp_hi=2.0 ** 24)
    _, s = on_step(s, True, 1)
    assert s.scale == 2.0 ** 24


def test_nonfinite_step_backs_off_and_skips():
    """测试非有限步跳过更新并回退缩放"""
    s = new_scaler(1)
    applied, backed = on_step(s, False, 10)
    assert not applied
    assert backed.scale == pytest.approx(s.scale / math.sqrt(2.0))
    assert backed.last_backoff_step == 10


def test_backoff_window():
    """测试窗口内的第二次非有限步不回退"""
    s = new_scaler(1)
    _, s = on_step(s, False, 1)
    scale_after_first = s.scale
    applied, s = on_step(s, False, 2)
    assert not applied
    assert s.scale == scale_after_first
    _, s = on_step(s, False, 1 + BACKOFF_WINDOW)
    assert s.scale < scale_after_first
    assert s.backoff_steps == (1, 1 + BACKOFF_WINDOW)
    assert backoffs_respect_window(s)


def test_backoff_clamped_at_lower_bound():
    """测试回退不低于下界"""
    s = ResblockScaler(scale=2.0 ** 7, replica_count_M=1, clamp_lo=2.0 ** 7, clamp_hi=2.0 ** 24)
    _, s = on_step(s, False, 1)
    assert s.scale == 2.0 ** 7


def test_steps_must_increase():
    """测试 step 必须递增"""
    _, s = on_step(new_scaler(1), True, 5)
    with pytest.raises(ConfigurationError):
        on_step(s, True, 5)


def test_scaler_dict_roundtrip():
    """测试缩放状态序列化"""
    _, s = on_step(new_scaler(3), False, 7)
    assert ResblockScaler.from_dict(s.to_dict()) == s


def test_branch_hooks():
    """测试分支钩子：滤除非有限值、fp16 存储、宽精度除回"""
    g = Tensor.of([1.0, math.inf, math.nan, -2.0])
    filtered = filter_nonfinite(g)
    assert filtered.tolist() == [1.0, 0.0, 0.0, -2.0]
    scaled = scale_incoming(Tensor.of([1e-3, 10.0]), 2.0 ** 13)
    assert scaled.format_tag is FP16
    assert scaled.tolist()[1] == math.inf
    assert unscale_outgoing(Tensor.of([8.0]), 4.0).tolist() == [2.0]
    with pytest.raises(ConfigurationError):
        scale_incoming(g, 0.0)


def test_calibrate_divisor_moves_median_to_midpoint():
    """测试除数把中位指数移到格式指数中点"""
    histogram = ExponentHistogram.from_values(torch.full((10,), 2.0 ** 4, dtype=torch.float64))
    fp16 = calibrate_divisor([histogram], FP16)
    assert fp16.pre_allreduce_divisor == 2.0 ** 9
    assert fp16.log2_divisor == 9
    m169 = calibrate_divisor([histogram], M169)
    assert m169.pre_allreduce_divisor == 2.0 ** 37


def test_calibrate_divisor_requires_data():
    """测试空直方图校准失败"""
    with pytest.raises(CalibrationError):
        calibrate_divisor([], FP16)
    with pytest.raises(CalibrationError):
        calibrate_divisor([ExponentHistogram.from_values([0.0, 0.0])], FP16)


def test_overflow_safe_scale():
    """测试不溢出的最大 2 的幂缩放"""
    scale = overflow_safe_scale(torch.tensor([3.0, -1.0], dtype=torch.float64))
    assert scale == 2.0 ** 14
    assert 3.0 * scale <= FP16.max_finite < 3.0 * scale * 2


def test_underflow_global_vs_per_resblock():
    """测试逐块缩放消除深层块的下溢"""
    rows = underflow_report(DecayChain(resblocks=24, elements=2048, seed=1))
    assert rows[-1]["global_underflow_fraction"] > 0.5
    assert all(r["resblock_underflow"] == 0 for r in rows)
    assert rows[0]["global_underflow"] <= rows[-1]["global_underflow"]


def test_trajectory_events():
    """测试轨迹事件标记"""
    trajectory = ScaleTrajectory()
    _, backed = on_step(new_scaler(1), False, 3)
    _, grown = on_step(new_scaler(1), True, 3)
    trajectory.record(3, [grown, backed], [True, False])
    assert [r["event"] for r in trajectory.rows] == ["grow", "backoff"]
    assert trajectory.rows[0]["log2_scale"] == pytest.approx(13.001)


def _random_events(seed):
    """(M, [(step, all_finite), ...])：步号随机跳增，非有限概率随种子变化"""
    generator = torch.Generator().manual_seed(seed)
    M = (1, 2, 4, 8)[int(torch.randint(4, (1,), generator=generator))]
    rate = (0.0, 0.005, 0.05, 0.3)[seed % 4]
    count = int(torch.randint(200, 1500, (1,), generator=generator))
    gaps = torch.randint(1, 4, (count,), generator=generator)
    finite = torch.rand(count, generator=generator) >= rate
    steps = torch.cumsum(gaps, 0)
    return M, [(int(step), bool(ok)) for step, ok in zip(steps, finite)]


@pytest.mark.parametrize("seed", range(100))
def test_scaler_properties_over_random_events(seed):
    """测试随机事件序列下的闭式增长、回退窗口与截断区间"""
    M, events = _random_events(seed)
    s = new_scaler(M)
    anchor_scale, grown = s.scale, 0
    nonfinite_steps = []
    for step, finite in events:
        before = s.scale
        applied, s = on_step(s, finite, step)
        assert applied == finite
        assert s.clamp_lo <= s.scale <= s.clamp_hi
        if finite:
            grown += 1
            continue
        # 两次非有限事件之间只有增长，缩放按闭式解（含上界）
        assert before == pytest.approx(min(anchor_scale * 2.0 ** (grown / 1000.0), s.clamp_hi), rel=1e-9)
        nonfinite_steps.append(step)
        if s.backoff_steps and s.backoff_steps[-1] == step:
            assert s.scale == pytest.approx(max(before / math.sqrt(2.0), s.clamp_lo), rel=1e-12)
        else:
            assert s.scale == before
        anchor_scale, grown = s.scale, 0

    assert backoffs_respect_window(s)
    assert set(s.backoff_steps) <= set(nonfinite_steps)
    expected = []
    for step in nonfinite_steps:
        if not expected or step - expected[-1] >= BACKOFF_WINDOW:
            expected.append(step)
    assert s.backoff_steps == tuple(expected)
    if not nonfinite_steps:
        assert s.scale == pytest.approx(closed_form_scale(M, len(events)), rel=1e-9)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
