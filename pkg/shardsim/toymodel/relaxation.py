"""
gumbel-softmax 松弛与 argmax 编码
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch

from shardsim.errors import ConfigurationError

EPS = 1e-20


@dataclass(frozen=True)
class RelaxationConfig:
    temperature: float = 1.0
    kl_weight: float = 0.0
    vocab: int = 8192
    argmax_mode: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.kl_weight < 0:
            raise ConfigurationError(f"KL weight must be >= 0, got {self.kl_weight}")


def gumbel_noise(shape, generator: torch.Generator) -> torch.Tensor:
    uniform = torch.rand(shape, generator=generator, dtype=torch.float64)
    return -torch.log(-torch.log(uniform + EPS) + EPS)


def gumbel_softmax(logits: torch.Tensor, tau: float, generator: Optional[torch.Generator] = None,
                   noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """softmax((logits + g) / τ)，沿最后一维；可传入固定噪声"""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if noise is None:
        if generator is None:
            raise ConfigurationError("gumbel_softmax needs a generator or a noise draw")
        noise = gumbel_noise(logits.shape, generator)
    return torch.softmax((logits + noise) / tau, dim=-1)


def hard_sample(logits: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """同一噪声下的离散样本（one-hot），即 τ → 0 的极限"""
    index = torch.argmax(logits + noise, dim=-1, keepdim=True)
    return torch.zeros_like(logits).scatter_(-1, index, 1.0)


def tokenize_argmax(logits) -> int:
    """编码时不加噪声，直接取 argmax"""
    return int(torch.argmax(torch.as_tensor(logits, dtype=torch.float64)))


def kl_to_uniform(logits: torch.Tensor) -> torch.Tensor:
    """每个位置的分类后验到均匀先验的 KL：Σ q log q + log K，返回逐位置之和"""
    log_q = torch.log_softmax(logits, dim=-1)
    kl = (log_q.exp() * log_q).sum(dim=-1) + math.log(logits.shape[-1])
    return kl.sum()
