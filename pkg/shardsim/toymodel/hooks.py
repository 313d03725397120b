"""
残差分支上的逐块梯度缩放钩子（autograd Function）

反向传播时梯度从分支输出端进入（乘以该块的缩放并按 fp16 存储），
在分支输入端离开（检查有限性、把 Inf/NaN 置零、宽精度下除以缩放）后汇入恒等路径。
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set

import torch
from torch import autograd

from shardsim.gradscale import filter_nonfinite_data, scale_incoming_data
from shardsim.lowp import FP16, FloatFormatSpec, quantize_tensor
from shardsim.utils import format_log

logger = logging.getLogger(__name__)


@dataclass
class BlockProbe:
    """一次反向传播中每个残差块分支梯度的有限性"""
    finite: List[bool] = field(default_factory=list)

    def reset(self, resblocks: int):
        self.finite = [True] * resblocks

    def mark(self, k: int, finite: bool):
        self.finite[k] = self.finite[k] and finite


class _GradEntry(autograd.Function):
    @staticmethod
    def forward(ctx, x, hooks, k):
        ctx.hooks, ctx.k = hooks, k
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        hooks, k = ctx.hooks, ctx.k
        grad = scale_incoming_data(grad_output, hooks.scales[k], hooks.branch_format)
        if k in hooks.inject:
            grad = grad.clone()
            grad.view(-1)[0] = float("inf")
            logger.debug(format_log("DEBUG", "injected inf into branch gradient", resblock=k))
        return grad, None, None


class _GradExit(autograd.Function):
    @staticmethod
    def forward(ctx, x, hooks, k):
        ctx.hooks, ctx.k = hooks, k
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        hooks, k = ctx.hooks, ctx.k
        hooks.probe.mark(k, bool(torch.isfinite(grad_output).all()))
        return filter_nonfinite_data(grad_output) / hooks.scales[k], None, None


class _BranchCast(autograd.Function):
    @staticmethod
    def forward(ctx, x, fmt):
        ctx.fmt = fmt
        return quantize_tensor(x, fmt)

    @staticmethod
    def backward(ctx, grad_output):
        return quantize_tensor(grad_output, ctx.fmt), None


class ScaleHooks:
    """
    一个模型副本的钩子集合

    enabled=False（宽精度模式）时所有钩子都是恒等映射。
    """

    def __init__(self, resblocks: int, scales: Optional[Sequence[float]] = None, enabled: bool = True,
                 branch_format: Optional[FloatFormatSpec] = FP16):
        self.resblocks = resblocks
        self.scales = list(scales) if scales is not None else [1.0] * resblocks
        self.enabled = enabled
        self.branch_format = branch_format if enabled else None
        self.inject: Set[int] = set()
        self.probe = BlockProbe()
        self.probe.reset(resblocks)

    def begin(self, scales: Sequence[float], inject: Sequence[int] = ()):
        """每次反向传播前调用"""
        self.scales = list(scales)
        self.inject = set(inject)
        self.probe.reset(self.resblocks)

    def entry(self, x: torch.Tensor, k: int) -> torch.Tensor:
        """分支输出端（反向时梯度进入分支）"""
        if not self.enabled:
            return x
        return _GradEntry.apply(x, self, k)

    def exit(self, x: torch.Tensor, k: int) -> torch.Tensor:
        """分支输入端（反向时梯度离开分支）"""
        if not self.enabled:
            return x
        return _GradExit.apply(x, self, k)

    def cast(self, x: torch.Tensor) -> torch.Tensor:
        """分支内部的 fp16 存储点"""
        if not self.enabled:
            return x
        return _BranchCast.apply(x, self.branch_format)

    @property
    def finite(self) -> List[bool]:
        return list(self.probe.finite)
