"""
AdamW（低精度动量）、全局范数裁剪、参数指数滑动平均与各类退火调度
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

import torch

from shardsim.errors import ConfigurationError, ShapeMismatchError
from shardsim.lowp import M169, M0610, FloatFormatSpec
from shardsim.tensor import Tensor, sequential_sum
from shardsim.utils import format_log

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    beta1: float = 0.9
    beta2: float = 0.96
    eps: float = 1e-8
    weight_decay: float = 4.5e-2
    clip_threshold: float = 4.0
    variance_clamp: float = 5.0
    ewia_decay: float = 0.99
    ewia_interval: int = 25

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        for name in ("eps", "clip_threshold", "variance_clamp", "ewia_decay"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.weight_decay < 0 or self.ewia_interval < 1:
            raise ConfigurationError("weight_decay must be >= 0 and ewia_interval >= 1")


TRANSFORMER_HPARAMS = HyperParams()
DVAE_HPARAMS = HyperParams(beta2=0.999, weight_decay=1e-4, ewia_decay=0.999)


@dataclass(frozen=True)
class AdamWState:
    """一阶/二阶动量及其存储格式；格式为 None 时宽精度"""
    mean: Tensor
    variance: Tensor
    step: int = 0

    @property
    def mean_format(self) -> Optional[FloatFormatSpec]:
        return self.mean.format_tag

    @property
    def variance_format(self) -> Optional[FloatFormatSpec]:
        return self.variance.format_tag


def init_adamw(shape: Sequence[int], mean_format: Optional[FloatFormatSpec] = M169,
               variance_format: Optional[FloatFormatSpec] = M0610) -> AdamWState:
    return AdamWState(Tensor.zeros(shape, mean_format), Tensor.zeros(shape, variance_format), 0)


def adamw_step(param: Tensor, grad: Tensor, state: AdamWState, hp: HyperParams,
               lr: float) -> Tuple[Tensor, AdamWState]:
    """
    一次解耦权重衰减的 Adam 更新（带偏差修正）

    二阶动量在读取和写回时都截断到 variance_clamp；
    动量更新后按各自格式写回，参数更新使用写回后的值。
    """
    if param.shape != grad.shape or param.shape != state.mean.shape:
        raise ShapeMismatchError(f"param {param.shape}, grad {grad.shape}, moments {state.mean.shape} differ")

    step = state.step + 1
    g = grad.data
    clamp = hp.variance_clamp
    mean = Tensor(hp.beta1 * state.mean.data + (1 - hp.beta1) * g, state.mean_format)
    previous = torch.clamp(state.variance.data, max=clamp)
    variance_raw = hp.beta2 * previous + (1 - hp.beta2) * g * g
    variance = Tensor(torch.clamp(variance_raw, max=clamp), state.variance_format)

    mean_hat = mean.data / (1 - hp.beta1 ** step)
    variance_hat = torch.clamp(variance.data, max=clamp) / (1 - hp.beta2 ** step)
    decayed = param.data * (1 - lr * hp.weight_decay)
    updated = decayed - lr * mean_hat / (torch.sqrt(variance_hat) + hp.eps)
    return Tensor(updated, param.format_tag), AdamWState(mean, variance, step)


# ---- 全局范数与裁剪 ----

def global_norm(q_norms_sq: Sequence[float], uncompressed_norms_sq: Sequence[float] = (),
                any_nonfinite: bool = False) -> float:
    """
    Q 的 Frobenius 范数平方和（P 正交时等于解压梯度的范数）加上未压缩参数的范数平方和

    有非有限值时返回 +inf。
    """
    if any_nonfinite:
        return math.inf
    total = sequential_sum(torch.tensor(list(q_norms_sq) + list(uncompressed_norms_sq), dtype=torch.float64))
    if not math.isfinite(total):
        return math.inf
    return math.sqrt(total)


def clip_by_global_norm(grads: Sequence[Tensor], norm: float, threshold: float = 4.0) -> List[Tensor]:
    """norm 有限且超过阈值时统一乘以 threshold/norm"""
    if math.isfinite(norm) and norm > threshold:
        factor = threshold / norm
        return [Tensor(g.data * factor, g.format_tag) for g in grads]
    return list(grads)


def ewia_update(avg_params: Sequence[Tensor], params: Sequence[Tensor], decay: float, step: int,
                interval: int = 25) -> List[Tensor]:
    """step 为 interval 的倍数时 avg ← decay·avg + (1−decay)·params"""
    if step % interval != 0:
        return list(avg_params)
    return [Tensor(decay * a.data + (1 - decay) * p.data) for a, p in zip(avg_params, params)]


# ---- 调度 ----

class ScheduleKind(str, Enum):
    COSINE = "cosine"
    LINEAR_WARMUP = "linear_warmup"
    HALVE_ON_PLATEAU = "halve_on_plateau"


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind
    start_value: float
    end_value: float
    duration: int

    def __post_init__(self):
        if self.duration < 1:
            raise ConfigurationError(f"schedule duration must be >= 1, got {self.duration}")
        object.__setattr__(self, "kind", ScheduleKind(self.kind))


def cosine_value(sched: Schedule, t: float) -> float:
    """end + (start − end)·(1 + cos(π·min(t,T)/T))/2"""
    if t < 0:
        raise ConfigurationError(f"schedule time must be >= 0, got {t}")
    progress = min(t, sched.duration) / sched.duration
    return sched.end_value + (sched.start_value - sched.end_value) * (1 + math.cos(math.pi * progress)) / 2


def linear_value(sched: Schedule, t: float) -> float:
    if t < 0:
        raise ConfigurationError(f"schedule time must be >= 0, got {t}")
    progress = min(t, sched.duration) / sched.duration
    return sched.start_value + (sched.end_value - sched.start_value) * progress


def schedule_value(sched: Schedule, t: float) -> float:
    if sched.kind == ScheduleKind.COSINE:
        return cosine_value(sched, t)
    if sched.kind == ScheduleKind.LINEAR_WARMUP:
        return linear_value(sched, t)
    # 平台减半是有状态的，由 PlateauHalver 负责；这里给出初始值
    return sched.start_value


KL_WEIGHT_SCHEDULE = Schedule(ScheduleKind.COSINE, 0.0, 6.6, 5000)
TEMPERATURE_SCHEDULE = Schedule(ScheduleKind.COSINE, 1.0, 1.0 / 16.0, 150_000)
DVAE_LR_SCHEDULE = Schedule(ScheduleKind.COSINE, 1e-4, 1.25e-6, 1_200_000)
TRANSFORMER_WARMUP = Schedule(ScheduleKind.LINEAR_WARMUP, 0.0, 4.5e-4, 5000)

PRESET_SCHEDULES: Dict[str, Schedule] = {
    "kl_weight": KL_WEIGHT_SCHEDULE,
    "temperature": TEMPERATURE_SCHEDULE,
    "dvae_lr": DVAE_LR_SCHEDULE,
    "transformer_warmup": TRANSFORMER_WARMUP,
}


def scaled_schedule(sched: Schedule, duration: int) -> Schedule:
    """同样的端点压缩到 duration 步（桌面规模实验用）"""
    return replace(sched, duration=duration)


def schedule_table(schedules: Dict[str, Schedule], steps: Sequence[int]) -> List[Dict]:
    return [
        {"step": t, **{name: schedule_value(s, t) for name, s in schedules.items()}}
        for t in steps
    ]


@dataclass
class PlateauHalver:
    """
    训练损失的滑动平均在 window 步内改进小于 epsilon（相对）时，步长减半
    """
    value: float
    window: int = 50
    epsilon: float = 1e-3
    halvings: int = 0
    losses: Deque[float] = field(default_factory=deque)
    initial: float = field(init=False)

    def __post_init__(self):
        if self.window < 1 or self.value <= 0:
            raise ConfigurationError("plateau window must be >= 1 and the initial value positive")
        self.initial = self.value
        self.load_losses(self.losses)

    def load_losses(self, values: Iterable[float]):
        """只保留最近 2·window 个损失（比较相邻两个窗口）"""
        self.losses = deque(values, maxlen=2 * self.window)

    def halve(self) -> float:
        self.value /= 2.0
        self.halvings += 1
        self.losses.clear()
        logger.info(format_log("INFO", "step size halved on plateau", halvings=self.halvings, value=self.value))
        return self.value

    def observe(self, loss: float) -> float:
        self.losses.append(loss)
        if len(self.losses) < 2 * self.window:
            return self.value
        recent = list(self.losses)
        previous = sum(recent[:self.window]) / self.window
        current = sum(recent[self.window:]) / self.window
        if previous - current < self.epsilon * abs(previous):
            return self.halve()
        return self.value
