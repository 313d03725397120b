"""
训练框架：运行配置、合成任务、训练循环、检查点与实验配方
"""

from shardsim.harness.runconfig import RunConfig, load_run_config, parse_run_config

__all__ = ["RunConfig", "load_run_config", "parse_run_config"]
