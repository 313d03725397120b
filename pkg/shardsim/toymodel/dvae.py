"""
8×8 灰度图上的玩具离散 VAE

稠密编码器输出 grid×grid 个位置上 K 类的 logits，解码器从（松弛或离散的）码本 one-hot
重建每个像素的 logit-Laplace 参数 (μ, ln b)。
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import torch

from shardsim.errors import ConfigurationError
from shardsim.optim import (DVAE_HPARAMS, HyperParams, KL_WEIGHT_SCHEDULE, TEMPERATURE_SCHEDULE, Schedule,
                            adamw_step, cosine_value, init_adamw, scaled_schedule)
from shardsim.tensor import Tensor
from shardsim.toymodel.hooks import ScaleHooks
from shardsim.toymodel.losses import effective_kl_weight, elb, logit_laplace_nll
from shardsim.toymodel.relaxation import gumbel_noise, gumbel_softmax, hard_sample, kl_to_uniform
from shardsim.toymodel.transformer import ParamSpec
from shardsim.utils import format_log

logger = logging.getLogger(__name__)

PATTERN_KINDS = ("stripes", "checker", "gradient", "block")

# 全尺寸 dVAE：256×256×3 像素，32×32 个码位置
FULL_SCALE_PIXELS = 256 * 256 * 3
FULL_SCALE_POSITIONS = 32 * 32


@dataclass(frozen=True)
class DVAEConfig:
    image_size: int = 8
    grid: int = 4
    codebook: int = 16
    hidden: int = 64

    def __post_init__(self):
        if self.image_size % self.grid != 0:
            raise ConfigurationError(f"image size {self.image_size} not divisible by grid {self.grid}")

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size

    @property
    def positions(self) -> int:
        return self.grid * self.grid

    def matched_kl_weight(self) -> float:
        """
        让归一化后的 KL 系数 β·positions/pixels 与全尺寸配置相同的 β 终值

        8×8 图像、4×4 网格下为 6.6/192·4 = 0.1375。
        """
        full_coefficient = effective_kl_weight(KL_WEIGHT_SCHEDULE.end_value, FULL_SCALE_PIXELS,
                                               FULL_SCALE_POSITIONS)
        return full_coefficient * self.pixels / self.positions


def kl_weight_schedule(config: DVAEConfig, anneal_steps: int, kl_weight: Optional[float] = None) -> Schedule:
    """KL 权重的余弦调度：0 到终值，时长为退火步数的三分之一"""
    end = config.matched_kl_weight() if kl_weight is None else kl_weight
    if end < 0:
        raise ConfigurationError(f"KL weight must be >= 0, got {end}")
    return replace(scaled_schedule(KL_WEIGHT_SCHEDULE, max(1, anneal_steps // 3)), end_value=end)


def make_patterns(count: int, generator: torch.Generator, size: int = 8) -> torch.Tensor:
    """程序生成的灰度图案（条纹、棋盘、渐变、方块），像素在 [0, 255]"""
    rows = torch.arange(size, dtype=torch.float64).view(-1, 1).expand(size, size)
    cols = torch.arange(size, dtype=torch.float64).view(1, -1).expand(size, size)
    images = []
    for _ in range(count):
        kind = PATTERN_KINDS[int(torch.randint(len(PATTERN_KINDS), (1,), generator=generator))]
        period = int(torch.randint(1, 4, (1,), generator=generator))
        phase = int(torch.randint(0, size, (1,), generator=generator))
        if kind == "stripes":
            axis = rows if bool(torch.rand(1, generator=generator) < 0.5) else cols
            image = (((axis + phase) // period) % 2) * 255
        elif kind == "checker":
            image = ((((rows + phase) // period) + (cols // period)) % 2) * 255
        elif kind == "gradient":
            axis = rows if bool(torch.rand(1, generator=generator) < 0.5) else cols
            image = axis * 255 / (size - 1)
        else:
            top, left = int(torch.randint(0, size - 2, (1,), generator=generator)), phase % (size - 2)
            image = torch.zeros(size, size, dtype=torch.float64)
            image[top:top + 3, left:left + 3] = 255
        noise = torch.randn(size, size, generator=generator, dtype=torch.float64) * 8
        images.append(torch.clamp(image + noise, 0, 255))
    return torch.stack(images)


@dataclass
class DVAEBatch:
    images: torch.Tensor
    noise: torch.Tensor
    tau: float
    beta: float

    def __len__(self) -> int:
        return self.images.shape[0]


class ToyDVAE:
    """残差块 0 = 编码器，残差块 1 = 解码器"""

    resblocks = 2

    def __init__(self, config: DVAEConfig = DVAEConfig()):
        self.config = config

    def parameter_specs(self) -> List[ParamSpec]:
        c = self.config
        codes = c.positions * c.codebook
        return [
            ParamSpec("enc.w1", (c.pixels, c.hidden), True, 0, 1, 1 / math.sqrt(c.pixels)),
            ParamSpec("enc.b1", (c.hidden,), False, 0, 0, 0.0),
            ParamSpec("enc.w2", (c.hidden, codes), True, 0, 1, 1 / math.sqrt(c.hidden)),
            ParamSpec("dec.w1", (codes, c.hidden), True, 1, 1, 1 / math.sqrt(c.positions)),
            ParamSpec("dec.b1", (c.hidden,), False, 1, 0, 0.0),
            ParamSpec("dec.w2", (c.hidden, 2 * c.pixels), True, 1, 1, 1 / math.sqrt(c.hidden)),
            ParamSpec("dec.b2", (2 * c.pixels,), False, 1, 0, 0.0),
        ]

    def init_params(self, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        return {
            spec.name: torch.randn(spec.shape, generator=generator, dtype=torch.float64) * spec.init_std
            for spec in self.parameter_specs()
        }

    def encode(self, params, images: torch.Tensor, hooks: Optional[ScaleHooks] = None) -> torch.Tensor:
        hooks = hooks or ScaleHooks(self.resblocks, enabled=False)
        c = self.config
        x = hooks.exit(images.reshape(images.shape[0], -1) / 127.5 - 1, 0)
        h = hooks.cast(torch.relu(x @ params["enc.w1"] + params["enc.b1"]))
        logits = hooks.cast(h @ params["enc.w2"])
        return hooks.entry(logits, 0).reshape(-1, c.positions, c.codebook)

    def decode(self, params, codes: torch.Tensor, hooks: Optional[ScaleHooks] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        hooks = hooks or ScaleHooks(self.resblocks, enabled=False)
        c = self.config
        z = hooks.exit(codes.reshape(codes.shape[0], -1), 1)
        h = hooks.cast(torch.relu(z @ params["dec.w1"] + params["dec.b1"]))
        out = hooks.entry(hooks.cast(h @ params["dec.w2"] + params["dec.b2"]), 1)
        return out[:, :c.pixels], out[:, c.pixels:]

    def objective(self, params, images: torch.Tensor, tau: float, beta: float, noise: torch.Tensor,
                  hard: bool = False, hooks: Optional[ScaleHooks] = None) -> torch.Tensor:
        """批均值的负 ELB（按像素归一化）；hard 时用同一噪声下的离散样本解码"""
        c = self.config
        logits = self.encode(params, images, hooks)
        codes = hard_sample(logits, noise) if hard else gumbel_softmax(logits, tau, noise=noise)
        mu, ln_b = self.decode(params, codes, hooks)
        pixels = images.reshape(images.shape[0], -1)
        recon = logit_laplace_nll(pixels, mu, ln_b)
        kl = kl_to_uniform(logits)
        return elb(recon, kl, beta, c.pixels, c.positions) / images.shape[0]

    def sample_batch(self, count: int, generator: torch.Generator, tau: float, beta: float) -> "DVAEBatch":
        c = self.config
        images = make_patterns(count, generator, c.image_size)
        noise = gumbel_noise((count, c.positions, c.codebook), generator)
        return DVAEBatch(images, noise, tau, beta)

    def loss(self, params, batch: "DVAEBatch", hooks: ScaleHooks) -> torch.Tensor:
        return self.objective(params, batch.images, batch.tau, batch.beta, batch.noise, hooks=hooks)

    def elb_gap(self, params, images: torch.Tensor, tau: float, beta: float,
                generator: torch.Generator) -> Dict[str, float]:
        """同一噪声下松弛 ELB 与离散 ELB 的差"""
        c = self.config
        noise = gumbel_noise((images.shape[0], c.positions, c.codebook), generator)
        with torch.no_grad():
            relaxed = float(self.objective(params, images, tau, beta, noise))
            true = float(self.objective(params, images, tau, beta, noise, hard=True))
        return {"tau": tau, "relaxed": relaxed, "true": true, "gap": abs(relaxed - true)}


def train_dvae(model: ToyDVAE, steps: int, seed: int = 0, batch_size: int = 32,
               hp: HyperParams = DVAE_HPARAMS, lr: float = 3e-3, anneal_steps: Optional[int] = None,
               kl_weight: Optional[float] = None) -> Tuple[Dict[str, torch.Tensor], List[Dict]]:
    """
    宽精度训练：KL 权重与温度按余弦调度（时长压缩到 anneal_steps）

    温度端点同全尺寸配置；KL 权重终值默认取 matched_kl_weight，kl_weight 可覆盖。

    Returns:
        (参数, 逐步记录)
    """
    anneal = anneal_steps or steps
    kl_schedule = kl_weight_schedule(model.config, anneal, kl_weight)
    tau_schedule = scaled_schedule(TEMPERATURE_SCHEDULE, anneal)
    generator = torch.Generator().manual_seed(seed)
    params = model.init_params(generator)
    states = {name: init_adamw(value.shape, None, None) for name, value in params.items()}
    history = []
    hooks = ScaleHooks(model.resblocks, enabled=False)
    for step in range(steps):
        batch = model.sample_batch(batch_size, generator, cosine_value(tau_schedule, step),
                                   cosine_value(kl_schedule, step))
        leaves = {n: p.clone().requires_grad_(True) for n, p in params.items()}
        loss = model.loss(leaves, batch, hooks)
        grads = torch.autograd.grad(loss, list(leaves.values()))
        for (name, value), grad in zip(params.items(), grads):
            updated, states[name] = adamw_step(Tensor(value), Tensor(grad), states[name], hp, lr)
            params[name] = updated.data
        history.append({"step": step, "loss": float(loss.detach()), "tau": batch.tau, "kl_weight": batch.beta})
        if step % 100 == 0:
            logger.debug(format_log("DEBUG", "dvae step", step=step, loss=float(loss.detach()), tau=batch.tau))
    return params, history

