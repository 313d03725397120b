"""
统一命令处理器
负责子命令解析和路由，具体工作委托给 harness
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from shardsim import messages
from shardsim.errors import ConfigurationError, ShardsimError
from shardsim.harness.experiments import ExperimentResult, run_experiment
from shardsim.harness.runconfig import RunConfig, load_run_config
from shardsim.harness.tools import bandwidth_report_tool, format_inspect_tool, mask_dump_tool, train_tool
from shardsim.utils import ensure_dir, format_log, write_json

logger = logging.getLogger(__name__)


class CommandType(Enum):
    """子命令"""
    TRAIN = "train"
    COMPRESSION_TABLE = "compression-table"
    QPOLICY_AB = "qpolicy-ab"
    UNDERFLOW_DEMO = "underflow-demo"
    RANK_GAP = "rank-gap"
    DVAE_ANNEAL = "dvae-anneal"
    RESUME_CHECK = "resume-check"
    MASK_DUMP = "mask-dump"
    FORMAT_INSPECT = "format-inspect"
    BANDWIDTH_REPORT = "bandwidth-report"


RECIPE_COMMANDS = {
    CommandType.COMPRESSION_TABLE, CommandType.QPOLICY_AB, CommandType.UNDERFLOW_DEMO,
    CommandType.RANK_GAP, CommandType.DVAE_ANNEAL, CommandType.RESUME_CHECK,
}


@dataclass
class CommandRequest:
    """一次命令调用的参数"""
    config_path: Optional[str] = None
    out: Optional[str] = None
    seed: Optional[int] = None
    threads: Optional[int] = None


@dataclass
class CommandResult:
    """命令执行结果"""
    success: bool
    message: str = ""
    data: Any = None  # ExperimentResult
    checks_passed: bool = True


def parse_command(name: str) -> CommandType:
    """子命令名 -> CommandType"""
    try:
        command = CommandType(name.strip())
    except ValueError:
        raise ConfigurationError(f"unknown command: {name}") from None
    logger.debug(format_log("DEBUG", "command parsed", command=command.value))
    return command


def _prepare(command: CommandType, request: CommandRequest):
    run_config: RunConfig = load_run_config(request.config_path)
    if request.threads is not None:
        run_config = run_config.model_copy(update={"threads": request.threads})
    out = Path(request.out or run_config.output_dir or f"./out/{command.value}")
    return run_config, ensure_dir(out), run_config.resolved_seed(request.seed)


def _finish(command: CommandType, result: ExperimentResult, out: Path) -> CommandResult:
    lines = [messages.format_check(c.name, c.passed, c.detail) for c in result.checks]
    lines.append(messages.format_files(len(result.files), str(out)))
    lines.append(messages.MSG_DONE if result.passed else messages.MSG_CHECKS_FAILED)
    return CommandResult(success=True, message="\n".join(lines), data=result, checks_passed=result.passed)


def handle_train(request: CommandRequest) -> CommandResult:
    run_config, out, seed = _prepare(CommandType.TRAIN, request)
    write_json(run_config.model_dump(), out / "run_config.json")
    return _finish(CommandType.TRAIN, train_tool(run_config, out, seed), out)


def handle_recipe(command: CommandType, request: CommandRequest) -> CommandResult:
    """六个实验配方共用"""
    run_config, out, seed = _prepare(command, request)
    return _finish(command, run_experiment(command.value, run_config, out, seed), out)


def handle_mask_dump(request: CommandRequest) -> CommandResult:
    run_config, out, seed = _prepare(CommandType.MASK_DUMP, request)
    return _finish(CommandType.MASK_DUMP, mask_dump_tool(run_config, out, seed), out)


def handle_format_inspect(request: CommandRequest) -> CommandResult:
    run_config, out, seed = _prepare(CommandType.FORMAT_INSPECT, request)
    return _finish(CommandType.FORMAT_INSPECT, format_inspect_tool(run_config, out, seed), out)


def handle_bandwidth_report(request: CommandRequest) -> CommandResult:
    run_config, out, seed = _prepare(CommandType.BANDWIDTH_REPORT, request)
    return _finish(CommandType.BANDWIDTH_REPORT, bandwidth_report_tool(run_config, out, seed), out)


def execute_command(command_type: CommandType, request: Optional[CommandRequest] = None) -> CommandResult:
    """
    执行命令的统一入口

    库代码抛出的异常在这里捕获并转成失败的 CommandResult。
    """
    request = request or CommandRequest()
    logger.info(format_log("INFO", "command started", command=command_type.value, config=request.config_path,
                           out=request.out, seed=request.seed))
    try:
        if command_type == CommandType.TRAIN:
            return handle_train(request)
        elif command_type in RECIPE_COMMANDS:
            return handle_recipe(command_type, request)
        elif command_type == CommandType.MASK_DUMP:
            return handle_mask_dump(request)
        elif command_type == CommandType.FORMAT_INSPECT:
            return handle_format_inspect(request)
        elif command_type == CommandType.BANDWIDTH_REPORT:
            return handle_bandwidth_report(request)
        return CommandResult(success=False, message=messages.MSG_UNKNOWN_COMMAND)
    except (ShardsimError, OSError) as e:
        logger.error(format_log("ERROR", "command failed", command=command_type.value, error=e), exc_info=True)
        return CommandResult(success=False, message=messages.format_error(str(e)))
