"""
逐残差块梯度缩放

- ResblockScaler：每个残差块一个梯度缩放状态机（增长 / 回退 / 窗口 / 截断）
- filter_nonfinite / scale_incoming / unscale_outgoing：分支路径上的缩放钩子
- calibrate_divisor：按指数直方图选取 all-reduce 前的除数（2 的幂）
- DecayChain：单调衰减的合成梯度链，用来对比全局缩放与逐块缩放的下溢
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from shardsim.errors import CalibrationError, ConfigurationError
from shardsim.lowp import FP16, ExponentHistogram, FloatFormatSpec, count_underflow, quantize_tensor
from shardsim.tensor import Tensor
from shardsim.utils import format_log

logger = logging.getLogger(__name__)

INITIAL_SCALE_EXPONENT = 13
CLAMP_LO_EXPONENT = 7
CLAMP_HI_EXPONENT = 24
GROWTH_FACTOR = 2.0 ** (1.0 / 1000.0)
BACKOFF_FACTOR = 1.0 / math.sqrt(2.0)
BACKOFF_WINDOW = 125


@dataclass(frozen=True)
class ResblockScaler:
    """单个残差块的梯度缩放状态"""
    scale: float
    replica_count_M: int
    growth_factor: float = GROWTH_FACTOR
    backoff_factor: float = BACKOFF_FACTOR
    window: int = BACKOFF_WINDOW
    last_backoff_step: Optional[int] = None
    clamp_lo: float = 0.0
    clamp_hi: float = math.inf
    last_step: Optional[int] = None
    backoff_steps: Tuple[int, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "scale": self.scale,
            "replica_count_M": self.replica_count_M,
            "growth_factor": self.growth_factor,
            "backoff_factor": self.backoff_factor,
            "window": self.window,
            "last_backoff_step": self.last_backoff_step,
            "clamp_lo": self.clamp_lo,
            "clamp_hi": self.clamp_hi,
            "last_step": self.last_step,
            "backoff_steps": list(self.backoff_steps),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ResblockScaler":
        values = dict(data)
        values["backoff_steps"] = tuple(values.get("backoff_steps", ()))
        return cls(**values)


def new_scaler(M: int) -> ResblockScaler:
    """初始缩放 M·2^13，截断区间 [M·2^7, M·2^24]"""
    if M < 1:
        raise ConfigurationError(f"replica count M must be >= 1, got {M}")
    return ResblockScaler(
        scale=M * 2.0 ** INITIAL_SCALE_EXPONENT,
        replica_count_M=M,
        clamp_lo=M * 2.0 ** CLAMP_LO_EXPONENT,
        clamp_hi=M * 2.0 ** CLAMP_HI_EXPONENT,
    )


def on_step(s: ResblockScaler, all_finite: bool, step: int) -> Tuple[bool, ResblockScaler]:
    """
    推进一次参数更新

    Returns:
        (apply_update, 新状态)；非有限步总是跳过更新，
        只有距上次回退至少 window 步时才回退缩放。
    """
    if s.last_step is not None and step <= s.last_step:
        raise ConfigurationError(f"scaler steps must increase: got {step} after {s.last_step}")

    if all_finite:
        scale = min(max(s.scale * s.growth_factor, s.clamp_lo), s.clamp_hi)
        return True, replace(s, scale=scale, last_step=step)

    in_window = s.last_backoff_step is not None and step - s.last_backoff_step < s.window
    if in_window:
        logger.info(format_log("INFO", "backoff suppressed inside window",
                               step=step, last_backoff=s.last_backoff_step, scale=s.scale))
        return False, replace(s, last_step=step)

    scale = min(max(s.scale * s.backoff_factor, s.clamp_lo), s.clamp_hi)
    logger.info(format_log("INFO", "gradient scale backoff", step=step, old=s.scale, new=scale))
    return False, replace(
        s,
        scale=scale,
        last_step=step,
        last_backoff_step=step,
        backoff_steps=s.backoff_steps + (step,),
    )


def closed_form_scale(M: int, steps: int) -> float:
    """全有限运行 steps 步后的缩放闭式解（含截断）"""
    value = M * 2.0 ** INITIAL_SCALE_EXPONENT * 2.0 ** (steps / 1000.0)
    return min(max(value, M * 2.0 ** CLAMP_LO_EXPONENT), M * 2.0 ** CLAMP_HI_EXPONENT)


def backoffs_respect_window(s: ResblockScaler) -> bool:
    steps = s.backoff_steps
    return all(later - earlier >= s.window for earlier, later in zip(steps, steps[1:]))


# ---- 分支路径钩子 ----

def filter_nonfinite_data(g: torch.Tensor) -> torch.Tensor:
    return torch.where(torch.isfinite(g), g, torch.zeros_like(g))


def filter_nonfinite(g: Tensor) -> Tensor:
    """Inf/NaN 置零，有限元素不变"""
    return Tensor(filter_nonfinite_data(g.data), g.format_tag)


def scale_incoming_data(g: torch.Tensor, scale: float, fmt: Optional[FloatFormatSpec] = FP16) -> torch.Tensor:
    return quantize_tensor(g * scale, fmt)


def scale_incoming(g: Tensor, scale: float, fmt: FloatFormatSpec = FP16) -> Tensor:
    """进入残差块分支的梯度乘以缩放，再按 fp16 存储"""
    if scale <= 0:
        raise ConfigurationError(f"gradient scale must be positive, got {scale}")
    return Tensor(scale_incoming_data(g.data, scale, fmt), fmt)


def unscale_outgoing(g: Tensor, scale: float) -> Tensor:
    """离开分支的梯度在宽精度下除以缩放，再汇入恒等路径"""
    if scale <= 0:
        raise ConfigurationError(f"gradient scale must be positive, got {scale}")
    return Tensor(g.data / scale)


# ---- all-reduce 前除数校准 ----

@dataclass(frozen=True)
class DivisorCalibration:
    """all-reduce 前的除数（2 的幂）及其来源直方图"""
    pre_allreduce_divisor: float
    source_histogram: ExponentHistogram = field(default_factory=ExponentHistogram)

    @property
    def log2_divisor(self) -> int:
        return int(math.log2(self.pre_allreduce_divisor))


def calibrate_divisor(histograms: Sequence[ExponentHistogram], fmt: FloatFormatSpec) -> DivisorCalibration:
    """
    合并直方图，选择把中位指数移到 fmt 指数范围中点的 2 的幂

    中点 = floor((最小正数指数 + 最大指数) / 2)，fp16 为 -5。
    """
    if not histograms:
        raise CalibrationError("no histograms to calibrate from")
    pooled = ExponentHistogram()
    for histogram in histograms:
        pooled = pooled.merge(histogram)
    if pooled.total == 0:
        raise CalibrationError("histograms contain no nonzero finite values")

    shift = pooled.median_exponent() - fmt.exponent_midpoint
    divisor = math.ldexp(1.0, shift)
    logger.info(format_log("INFO", "divisor calibrated", fmt=fmt.name,
                           median=pooled.median_exponent(), midpoint=fmt.exponent_midpoint, log2_divisor=shift))
    return DivisorCalibration(pre_allreduce_divisor=divisor, source_histogram=pooled)


# ---- 缩放轨迹 ----

class ScaleTrajectory:
    """记录 (step, resblock_index, log2_scale, event) 用于导出 CSV"""

    def __init__(self):
        self.rows: List[Dict] = []

    def record(self, step: int, scalers: Sequence[ResblockScaler], finite_flags: Sequence[bool]):
        for index, (scaler, finite) in enumerate(zip(scalers, finite_flags)):
            event = "grow" if finite else ("backoff" if scaler.last_backoff_step == step else "skip")
            self.rows.append({
                "step": step,
                "resblock_index": index,
                "log2_scale": math.log2(scaler.scale),
                "event": event,
            })


# ---- 单调衰减的合成梯度链 ----

@dataclass
class DecayChain:
    """
    R 个残差块的合成激活梯度，第 k 块的量级为 γ^k 乘以块内对数均匀分布的离散度

    第 k 块元素：±2^(top_exponent + u) · γ^k，u ~ U(-spread/2, spread/2)
    """
    resblocks: int = 24
    decay: float = 0.5
    elements: int = 4096
    spread: float = 39.0
    top_exponent: float = 0.0
    seed: int = 0

    def blocks(self) -> List[torch.Tensor]:
        if self.resblocks < 1 or not 0 < self.decay < 1:
            raise ConfigurationError("chain needs >= 1 resblock and decay in (0, 1)")
        generator = torch.Generator().manual_seed(self.seed)
        out = []
        for k in range(self.resblocks):
            u = (torch.rand(self.elements, generator=generator, dtype=torch.float64) - 0.5) * self.spread
            signs = torch.where(torch.rand(self.elements, generator=generator) < 0.5, -1.0, 1.0).to(torch.float64)
            out.append(signs * torch.exp2(self.top_exponent + u) * self.decay ** k)
        return out


def overflow_safe_scale(values: torch.Tensor, fmt: FloatFormatSpec = FP16) -> float:
    """使 max|v|·scale 不超过 fmt 最大有限值的最大 2 的幂"""
    peak = float(values.abs().max())
    if peak == 0:
        raise CalibrationError("cannot size a scale from an all-zero block")
    exponent = math.floor(math.log2(fmt.max_finite / peak))
    while math.ldexp(peak, exponent) > fmt.max_finite:
        exponent -= 1
    while math.ldexp(peak, exponent + 1) <= fmt.max_finite:
        exponent += 1
    return math.ldexp(1.0, exponent)


def underflow_report(chain: DecayChain, fmt: FloatFormatSpec = FP16) -> List[Dict]:
    """
    逐块统计两种缩放策略下被量化为 0 的元素

    global：所有块共用一个不溢出的缩放；per_resblock：每块各自的最大不溢出缩放。
    """
    blocks = chain.blocks()
    global_scale = overflow_safe_scale(torch.cat(blocks), fmt)
    rows = []
    for index, block in enumerate(blocks):
        block_scale = overflow_safe_scale(block, fmt)
        global_zero = count_underflow(block * global_scale, fmt)
        local_zero = count_underflow(block * block_scale, fmt)
        rows.append({
            "resblock_index": index,
            "elements": block.numel(),
            "log2_global_scale": math.log2(global_scale),
            "log2_resblock_scale": math.log2(block_scale),
            "global_underflow": global_zero,
            "global_underflow_fraction": global_zero / block.numel(),
            "resblock_underflow": local_zero,
            "resblock_underflow_fraction": local_zero / block.numel(),
        })
    return rows
