import os
from typing import Dict
from dataclasses import dataclass
from dotenv import load_dotenv

# 加载 .env 文件
load_dotenv()


def _env_flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class LoggingConfig:
    """日志配置"""
    level: str = "INFO"
    log_dir: str = "./logs"
    console: bool = False  # 默认只写文件，不输出到控制台

    def is_complete(self) -> bool:
        """检查配置是否完整"""
        return bool(self.level and self.log_dir)


@dataclass
class RuntimeConfig:
    """运行时配置"""
    threads: int = 1  # 模拟 worker 线程数，1 表示单线程参考模式
    default_seed: int = 0
    torch_threads: int = 1  # torch 算子内并行线程数
    checkpoint_dir: str = "./checkpoints"

    def is_complete(self) -> bool:
        """检查配置是否完整"""
        return self.threads >= 1 and self.torch_threads >= 1 and bool(self.checkpoint_dir)


@dataclass
class ReportConfig:
    """报告输出配置"""
    float_format: str = "%.10g"  # CSV 浮点格式
    json_indent: int = 2

    def is_complete(self) -> bool:
        """检查配置是否完整"""
        try:
            self.float_format % 1.0
        except (TypeError, ValueError):
            return False
        return self.json_indent >= 0


class Config:
    """统一配置管理器（环境变量层）"""

    def __init__(self):
        # 日志配置
        self.logging = LoggingConfig(
            level=os.getenv("SHARDSIM_LOG_LEVEL", "INFO"),
            log_dir=os.getenv("SHARDSIM_LOG_DIR", "./logs"),
            console=_env_flag("SHARDSIM_LOG_CONSOLE"),
        )

        # 运行时配置
        self.runtime = RuntimeConfig(
            threads=int(os.getenv("SHARDSIM_THREADS", "1")),
            default_seed=int(os.getenv("SHARDSIM_SEED", "0")),
            torch_threads=int(os.getenv("SHARDSIM_TORCH_THREADS", "1")),
            checkpoint_dir=os.getenv("SHARDSIM_CHECKPOINT_DIR", "./checkpoints"),
        )

        # 报告配置
        self.report = ReportConfig(
            float_format=os.getenv("SHARDSIM_FLOAT_FORMAT", "%.10g"),
        )

    def validate(self, verbose: bool = True) -> Dict[str, bool]:
        """验证配置，返回各部分的验证结果"""
        results = {}

        for name, section, label in (
            ("logging", self.logging, "日志"),
            ("runtime", self.runtime, "运行时"),
            ("report", self.report, "报告"),
        ):
            ok = section.is_complete()
            if verbose:
                print(f"✅ {label}配置正常" if ok else f"❌ {label}配置不完整")
            results[name] = ok

        return results


# 全局配置实例
config = Config()
