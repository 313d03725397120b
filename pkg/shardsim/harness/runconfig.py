"""
运行配置（--config 指定的 JSON 文档）

所有字段都有默认值，`{}` 即合法配置。跨字段的整除性检查在加载时完成。
字段说明见 tutorial/RUN_CONFIG.md。
"""

import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from shardsim.config import config
from shardsim.errors import ConfigurationError
from shardsim.lowp import FloatFormatSpec, get_format
from shardsim.utils import format_log

logger = logging.getLogger(__name__)

TaskName = Literal["linear_regression", "quadratic_bowl", "sequence", "dvae"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologySection(_Section):
    n_machines: int = Field(1, ge=1)
    gpus_per_machine: int = Field(1, ge=1)


class TaskSection(_Section):
    name: TaskName = "linear_regression"
    steps: int = Field(500, ge=1)
    batch_size: int = Field(16, ge=1)
    features: int = Field(32, ge=1)
    outputs: int = Field(4, ge=1)
    noise: float = Field(0.5, ge=0)
    eval_size: int = Field(512, ge=1)
    identical_shards: bool = False


class ModelSection(_Section):
    text_len: int = Field(6, ge=1)
    grid_h: int = Field(4, ge=1)
    grid_w: int = Field(4, ge=1)
    d_model: int = Field(32, ge=1)
    n_layers: int = Field(8, ge=1)
    n_heads: int = Field(2, ge=1)
    text_vocab: int = Field(32, ge=2)
    image_vocab: int = Field(64, ge=2)
    conv_kernel: int = Field(3, ge=1)


class DVAESection(_Section):
    image_size: int = Field(8, ge=2)
    grid: int = Field(4, ge=1)
    codebook: int = Field(16, ge=2)
    hidden: int = Field(64, ge=1)
    anneal_steps: Optional[int] = Field(None, ge=1)
    kl_weight: Optional[float] = Field(None, ge=0)


class CompressionSection(_Section):
    enabled: bool = False
    rank: int = Field(2, ge=1)
    epsilon: float = Field(1e-6, gt=0)
    q_policy: Literal["fixed", "warm_start", "resample"] = "fixed"
    q_seed: int = 0


class PrecisionSection(_Section):
    mode: Literal["wide", "mixed"] = "wide"
    branch_format: str = "fp16"
    buffer_format: str = "m169"
    mean_format: str = "m169"
    variance_format: str = "m0610"
    uncompressed_format: str = "fp32"

    def fmt(self, name: str) -> Optional[FloatFormatSpec]:
        """宽精度模式下所有格式都为 None"""
        if self.mode == "wide":
            return None
        return get_format(getattr(self, name))


class OptimizerSection(_Section):
    lr: float = Field(1e-2, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.96, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    clip_threshold: float = Field(4.0, gt=0)
    variance_clamp: float = Field(5.0, gt=0)
    ewia_decay: float = Field(0.99, gt=0, lt=1)
    ewia_interval: int = Field(25, ge=1)
    schedule: Literal["constant", "cosine", "linear_warmup", "halve_on_plateau"] = "constant"
    final_lr: float = Field(0.0, ge=0)
    warmup_steps: int = Field(1, ge=1)
    plateau_window: int = Field(50, ge=1)
    plateau_epsilon: float = Field(1e-3, ge=0)


class FaultSection(_Section):
    """在第 step 步把第 resblock 块的分支梯度置为 Inf（只作用于混合精度模式）"""
    step: int = Field(..., ge=1)
    resblock: int = Field(..., ge=0)
    replica: int = Field(0, ge=0)


class ExperimentSection(_Section):
    qpolicy_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    ranks: List[int] = Field(default_factory=lambda: [1, 2, 4])
    table: List[Tuple[int, int, int]] = Field(
        default_factory=lambda: [(1920, 512, 8), (2688, 640, 8), (3968, 896, 8)])
    bandwidth: Tuple[int, int, int] = (64, 8, 8)
    resume_at: int = Field(20, ge=1)
    resume_steps: int = Field(10, ge=1)
    underflow_resblocks: int = Field(24, ge=1)
    underflow_decay: float = Field(0.5, gt=0, lt=1)
    underflow_elements: int = Field(4096, ge=1)
    underflow_spread: float = Field(39.0, gt=0)
    dvae_steps: int = Field(600, ge=1)
    dvae_eval_batch: int = Field(64, ge=1)
    mask_kernel: int = Field(3, ge=1)


class RunConfig(_Section):
    name: str = "run"
    seed: Optional[int] = None
    output_dir: Optional[str] = None
    threads: Optional[int] = Field(None, ge=1)
    topology: TopologySection = Field(default_factory=TopologySection)
    task: TaskSection = Field(default_factory=TaskSection)
    model: ModelSection = Field(default_factory=ModelSection)
    dvae: DVAESection = Field(default_factory=DVAESection)
    compression: CompressionSection = Field(default_factory=CompressionSection)
    precision: PrecisionSection = Field(default_factory=PrecisionSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    faults: List[FaultSection] = Field(default_factory=list)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        m = self.topology.gpus_per_machine
        for name in ("branch_format", "buffer_format", "mean_format", "variance_format", "uncompressed_format"):
            get_format(getattr(self.precision, name))
        if self.model.d_model % self.model.n_heads != 0:
            raise ValueError(f"d_model {self.model.d_model} is not divisible by n_heads {self.model.n_heads}")
        if self.compression.enabled and self.compression.rank % m != 0:
            raise ValueError(f"rank {self.compression.rank} is not divisible by gpus_per_machine {m}")
        if self.task.name == "linear_regression" and self.task.outputs % m != 0:
            raise ValueError(f"outputs {self.task.outputs} are not divisible by gpus_per_machine {m}")
        if self.task.name == "sequence" and self.model.d_model % m != 0:
            raise ValueError(f"d_model {self.model.d_model} is not divisible by gpus_per_machine {m}")
        if self.task.name == "dvae" and self.dvae.image_size % self.dvae.grid != 0:
            raise ValueError("dvae image_size must be a multiple of grid")
        for fault in self.faults:
            if fault.replica >= self.topology.n_machines * m:
                raise ValueError(f"fault replica {fault.replica} outside the topology")
        return self

    @property
    def gpu_rank(self) -> int:
        return self.compression.rank // self.topology.gpus_per_machine

    def resolved_seed(self, override: Optional[int] = None) -> int:
        """--seed > 文档中的 seed > SHARDSIM_SEED"""
        if override is not None:
            return override
        if self.seed is not None:
            return self.seed
        return config.runtime.default_seed


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run config: {e}") from e


def load_run_config(path: Union[str, Path, None] = None) -> RunConfig:
    """读取 JSON 配置；path 为 None 时使用默认配置"""
    if path is None:
        return RunConfig()
    target = Path(path)
    if not target.exists():
        raise ConfigurationError(f"config file not found: {target}")
    try:
        data = json.loads(target.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {target} is not valid JSON: {e}") from e
    run_config = parse_run_config(data)
    logger.info(format_log("INFO", "run config loaded", path=target, task=run_config.task.name,
                           mode=run_config.precision.mode, compression=run_config.compression.enabled))
    return run_config
