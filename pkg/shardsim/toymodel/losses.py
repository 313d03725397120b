"""
损失函数及其解析梯度

- logit-Laplace：支撑在 (0, 1) 上的重建似然，像素先经 φ 映射到 (ε, 1−ε)
- elb：最小化的负 ELB 代理，按像素数归一化
- weighted_ce：文本 1/8、图像 7/8 的交叉熵加权
"""

import math
from typing import Tuple

import torch

from shardsim.errors import ConfigurationError

LOGIT_LAPLACE_EPS = 0.1
TEXT_WEIGHT = 1.0 / 8.0
IMAGE_WEIGHT = 7.0 / 8.0


def _check_eps(eps: float):
    if not 0 < eps < 0.5:
        raise ConfigurationError(f"epsilon must lie in (0, 0.5), got {eps}")


def _check_pixels(x: torch.Tensor):
    if bool((x < 0).any()) or bool((x > 255).any()):
        raise ConfigurationError("pixel values must lie in [0, 255]")


def logit(y: torch.Tensor) -> torch.Tensor:
    return torch.log(y) - torch.log1p(-y)


def phi(x, eps: float = LOGIT_LAPLACE_EPS) -> torch.Tensor:
    """[0, 255] → [ε, 1−ε]"""
    _check_eps(eps)
    x = torch.as_tensor(x, dtype=torch.float64)
    return (1 - 2 * eps) * x / 255 + eps


def phi_inv(y, eps: float = LOGIT_LAPLACE_EPS) -> torch.Tensor:
    _check_eps(eps)
    y = torch.as_tensor(y, dtype=torch.float64)
    return (y - eps) * 255 / (1 - 2 * eps)


def logit_laplace_pdf(y, mu, b) -> torch.Tensor:
    """f(y | μ, b) = exp(−|logit y − μ| / b) / (2b·y(1−y))"""
    y = torch.as_tensor(y, dtype=torch.float64)
    return torch.exp(-torch.abs(logit(y) - mu) / b) / (2 * b * y * (1 - y))


def logit_laplace_nll(x, mu, ln_b, eps: float = LOGIT_LAPLACE_EPS) -> torch.Tensor:
    """Σ −ln f(φ(x) | μ, e^{ln b})"""
    x = torch.as_tensor(x, dtype=torch.float64)
    _check_pixels(x)
    y = phi(x, eps)
    ln_b = torch.as_tensor(ln_b, dtype=torch.float64)
    b = torch.exp(ln_b)
    nll = math.log(2.0) + ln_b + torch.log(y) + torch.log1p(-y) + torch.abs(logit(y) - mu) / b
    return nll.sum()


def logit_laplace_nll_grad(x, mu, ln_b, eps: float = LOGIT_LAPLACE_EPS) -> Tuple[torch.Tensor, torch.Tensor]:
    """(∂/∂μ, ∂/∂ln b)，在 logit φ(x) == μ 处取次梯度 0"""
    x = torch.as_tensor(x, dtype=torch.float64)
    _check_pixels(x)
    residual = logit(phi(x, eps)) - mu
    b = torch.exp(torch.as_tensor(ln_b, dtype=torch.float64))
    return -torch.sign(residual) / b, 1 - torch.abs(residual) / b


def reconstruct(mu, eps: float = LOGIT_LAPLACE_EPS) -> torch.Tensor:
    """x̂ = φ⁻¹(sigmoid(μ))，忽略 ln b，截断到像素范围"""
    mu = torch.as_tensor(mu, dtype=torch.float64)
    return torch.clamp(phi_inv(torch.sigmoid(mu), eps), 0, 255)


# ---- ELB ----

def effective_kl_weight(beta: float, pixel_count: int, grid_positions: int) -> float:
    """归一化后 KL 项的系数 β·grid/pixels（全尺寸下为 β/192）"""
    if pixel_count <= 0 or grid_positions <= 0:
        raise ConfigurationError("pixel and grid counts must be positive")
    return beta * grid_positions / pixel_count


def elb(recon_nll_sum, kl_sum, beta: float, pixel_count: int, grid_positions: int):
    """(重建 NLL + β·KL) / 像素数"""
    if pixel_count <= 0 or grid_positions <= 0:
        raise ConfigurationError("pixel and grid counts must be positive")
    return (recon_nll_sum + beta * kl_sum) / pixel_count


def elb_grad(beta: float, pixel_count: int) -> Tuple[float, float]:
    return 1.0 / pixel_count, beta / pixel_count


# ---- 交叉熵 ----

def weighted_ce(text_ce_mean, image_ce_mean):
    return text_ce_mean * TEXT_WEIGHT + image_ce_mean * IMAGE_WEIGHT


def weighted_ce_grad() -> Tuple[float, float]:
    return TEXT_WEIGHT, IMAGE_WEIGHT


def softmax_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """逐行 softmax 交叉熵的均值"""
    if logits.shape[0] == 0:
        return logits.sum() * 0
    log_probs = torch.log_softmax(logits, dim=-1)
    return -log_probs.gather(-1, targets.view(-1, 1)).mean()


def softmax_cross_entropy_grad(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(softmax − onehot) / N"""
    probs = torch.softmax(logits, dim=-1)
    onehot = torch.zeros_like(probs).scatter_(-1, targets.view(-1, 1), 1.0)
    return (probs - onehot) / logits.shape[0]
