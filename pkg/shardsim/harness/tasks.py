"""
合成训练任务

每个任务给出模型（参数规格、初始化、带钩子的损失）、按副本取数据的方法与留出集评估。
"""

import math
from typing import Dict, List

import torch

from shardsim.errors import ConfigurationError
from shardsim.harness.runconfig import RunConfig
from shardsim.optim import TEMPERATURE_SCHEDULE, cosine_value, scaled_schedule
from shardsim.toymodel.dvae import DVAEConfig, ToyDVAE, kl_weight_schedule
from shardsim.toymodel.hooks import ScaleHooks
from shardsim.toymodel.transformer import ParamSpec, SequenceBatch, ToyModelConfig, ToyTransformer

DATA_SEED_STRIDE = 1_000_003


def replica_generator(seed: int, step: int, replica: int) -> torch.Generator:
    """(seed, step, replica) 决定一个副本在一步中看到的数据"""
    return torch.Generator().manual_seed((seed * DATA_SEED_STRIDE + step) * 4099 + replica)


class LinearModel:
    """y = x·W + b；W 可压缩，b 不压缩，整个模型是一个残差分支"""

    resblocks = 1

    def __init__(self, features: int, outputs: int):
        self.features, self.outputs = features, outputs

    def parameter_specs(self) -> List[ParamSpec]:
        return [
            ParamSpec("W", (self.features, self.outputs), True, 0, 1, 0.0),
            ParamSpec("b", (self.outputs,), False, 0, 0, 0.0),
        ]

    def init_params(self, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        return {spec.name: torch.zeros(spec.shape, dtype=torch.float64) for spec in self.parameter_specs()}

    def predict(self, params, x: torch.Tensor, hooks: ScaleHooks) -> torch.Tensor:
        out = hooks.cast(hooks.exit(x, 0) @ params["W"] + params["b"])
        return hooks.entry(out, 0)

    def loss(self, params, batch, hooks: ScaleHooks) -> torch.Tensor:
        x, y = batch
        residual = self.predict(params, x, hooks) - y
        return (residual * residual).mean()


class Task:
    name = "task"

    def __init__(self, run_config: RunConfig, seed: int):
        self.run_config = run_config
        self.seed = seed
        self.model = None

    def sample_batch(self, generator: torch.Generator, size: int, step: int):
        raise NotImplementedError

    def evaluate(self, params: Dict[str, torch.Tensor], step: int) -> float:
        raise NotImplementedError


class LinearRegressionTask(Task):
    """带噪线性回归；评估为留出集上的含噪 MSE"""

    name = "linear_regression"

    def __init__(self, run_config: RunConfig, seed: int):
        super().__init__(run_config, seed)
        task = run_config.task
        self.model = LinearModel(task.features, task.outputs)
        truth = torch.Generator().manual_seed(seed + 17)
        self.true_W = torch.randn(task.features, task.outputs, generator=truth, dtype=torch.float64)
        self.true_b = torch.randn(task.outputs, generator=truth, dtype=torch.float64)
        self.noise = task.noise
        held_out = torch.Generator().manual_seed(seed + 29)
        self.eval_batch = self._draw(held_out, task.eval_size)

    def _draw(self, generator: torch.Generator, size: int):
        x = torch.randn(size, self.model.features, generator=generator, dtype=torch.float64)
        noise = torch.randn(size, self.model.outputs, generator=generator, dtype=torch.float64) * self.noise
        return x, x @ self.true_W + self.true_b + noise

    def sample_batch(self, generator: torch.Generator, size: int, step: int):
        return self._draw(generator, size)

    def evaluate(self, params, step: int) -> float:
        x, y = self.eval_batch
        with torch.no_grad():
            residual = x @ params["W"] + params["b"] - y
        return float((residual * residual).mean())


class QuadraticBowlTask(LinearRegressionTask):
    """无噪声、各向异性输入的二次碗：E[‖(W−W*)ᵀx‖²]"""

    name = "quadratic_bowl"

    def __init__(self, run_config: RunConfig, seed: int):
        super().__init__(run_config, seed)
        self.noise = 0.0
        features = self.model.features
        self.curvature = torch.logspace(0, -1, features, dtype=torch.float64)
        held_out = torch.Generator().manual_seed(seed + 29)
        self.eval_batch = self._draw(held_out, run_config.task.eval_size)

    def _draw(self, generator: torch.Generator, size: int):
        x = torch.randn(size, self.model.features, generator=generator, dtype=torch.float64)
        if hasattr(self, "curvature"):
            x = x * torch.sqrt(self.curvature)
        return x, x @ self.true_W + self.true_b


class SequenceTask(Task):
    """
    合成的文本 + 图像 token 流

    文本是随机起点、随机步长的等差序列（模文本词表）；图像 token 由文本前两个 token 决定：
    image[r][c] = (a + r·b + c) mod image_vocab。
    """

    name = "sequence"

    def __init__(self, run_config: RunConfig, seed: int):
        super().__init__(run_config, seed)
        m = run_config.model
        self.model_config = ToyModelConfig(m.text_len, m.grid_h, m.grid_w, m.d_model, m.n_layers, m.n_heads,
                                           m.text_vocab, m.image_vocab, m.conv_kernel)
        self.model = ToyTransformer(self.model_config)
        self.eval_batch = self.sample_batch(torch.Generator().manual_seed(seed + 29),
                                            run_config.task.eval_size, 0)

    def _example(self, generator: torch.Generator):
        cfg = self.model_config
        length = int(torch.randint(2, cfg.text_len + 1, (1,), generator=generator))
        start = int(torch.randint(cfg.text_vocab, (1,), generator=generator))
        stride = int(torch.randint(1, 4, (1,), generator=generator))
        text = [(start + i * stride) % cfg.text_vocab for i in range(length)]
        a, b = text[0], text[1]
        image = [(a + r * b + c) % cfg.image_vocab for r in range(cfg.grid_h) for c in range(cfg.grid_w)]
        return text, image

    def sample_batch(self, generator: torch.Generator, size: int, step: int) -> SequenceBatch:
        examples = [self._example(generator) for _ in range(size)]
        return SequenceBatch([e[0] for e in examples], [e[1] for e in examples])

    def evaluate(self, params, step: int) -> float:
        with torch.no_grad():
            hooks = ScaleHooks(self.model.resblocks, enabled=False)
            return float(self.model.loss(params, self.eval_batch, hooks))


class DVAETask(Task):
    """玩具 dVAE；温度与 KL 权重按压缩后的余弦调度随步数变化"""

    name = "dvae"

    def __init__(self, run_config: RunConfig, seed: int):
        super().__init__(run_config, seed)
        d = run_config.dvae
        self.model = ToyDVAE(DVAEConfig(d.image_size, d.grid, d.codebook, d.hidden))
        anneal = d.anneal_steps or run_config.task.steps
        self.tau_schedule = scaled_schedule(TEMPERATURE_SCHEDULE, anneal)
        self.kl_schedule = kl_weight_schedule(self.model.config, anneal, d.kl_weight)
        self.eval_generator_seed = seed + 29

    def sample_batch(self, generator: torch.Generator, size: int, step: int):
        return self.model.sample_batch(size, generator, cosine_value(self.tau_schedule, step),
                                       cosine_value(self.kl_schedule, step))

    def evaluate(self, params, step: int) -> float:
        batch = self.sample_batch(torch.Generator().manual_seed(self.eval_generator_seed),
                                  self.run_config.task.eval_size, step)
        with torch.no_grad():
            return float(self.model.loss(params, batch, ScaleHooks(self.model.resblocks, enabled=False)))


TASKS = {
    cls.name: cls for cls in (LinearRegressionTask, QuadraticBowlTask, SequenceTask, DVAETask)
}


def create_task(run_config: RunConfig, seed: int) -> Task:
    name = run_config.task.name
    if name not in TASKS:
        raise ConfigurationError(f"unknown task: {name}")
    return TASKS[name](run_config, seed)


def bowl_optimum_gap(task: QuadraticBowlTask, params) -> float:
    """‖W − W*‖_F，二次碗的解析距离"""
    diff = params["W"] - task.true_W
    return math.sqrt(float((diff * diff).sum()))
