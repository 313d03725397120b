"""
命令行入口

    shardsim <subcommand> [--config FILE] [--out DIR] [--seed N] [--check]

退出码：0 成功；1 --check 下有检查未通过；2 出错。
"""

import argparse
import logging
import sys
from typing import List, Optional

import torch

from shardsim import messages
from shardsim.commands import CommandRequest, CommandType, execute_command, parse_command
from shardsim.config import config
from shardsim.logging_config import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shardsim",
        description=messages.DESCRIPTION,
        epilog=messages.EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="<subcommand>")
    for command in CommandType:
        sub = subparsers.add_parser(command.value, help=messages.SUBCOMMAND_HELP[command.value])
        sub.add_argument("--config", default=None, help="run config JSON (defaults when omitted)")
        sub.add_argument("--out", default=None, help="output directory (default ./out/<subcommand>)")
        sub.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sub.add_argument("--check", action="store_true", help="exit 1 when any check fails")
        sub.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
        sub.add_argument("--threads", type=int, default=None, help="worker threads for simulated replicas")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    # 日志在任何输出之前初始化
    setup_logging(log_level=args.log_level or config.logging.level, log_dir=config.logging.log_dir,
                  console=config.logging.console)
    torch.set_num_threads(config.runtime.torch_threads)

    validation = config.validate(verbose=False)
    if not all(validation.values()):
        logger.error(f"environment config incomplete: {validation}")
        print(messages.format_error(f"environment config incomplete: {validation}"))
        return EXIT_ERROR

    command = parse_command(args.command)
    request = CommandRequest(config_path=args.config, out=args.out, seed=args.seed, threads=args.threads)
    print(messages.format_start(command.value, args.out or f"./out/{command.value}",
                                args.seed if args.seed is not None else "from config"))
    result = execute_command(command, request)
    print(result.message)
    if not result.success:
        return EXIT_ERROR
    if args.check and not result.checks_passed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
