"""
命令行与命令路由测试
"""

import json
import os
import sys

import pytest

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.cli import EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK, build_parser, main
from shardsim.commands import CommandRequest, CommandType, execute_command, parse_command
from shardsim.config import config
from shardsim.errors import ConfigurationError


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    """日志写到临时目录"""
    monkeypatch.setattr(config.logging, "log_dir", str(tmp_path / "logs"))


def _write_config(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_parser_knows_every_subcommand():
    """测试十个子命令都能解析"""
    parser = build_parser()
    for command in CommandType:
        args = parser.parse_args([command.value, "--seed", "3", "--check"])
        assert args.command == command.value
        assert args.seed == 3
        assert args.check is True
    assert len(CommandType) == 10


def test_parse_command():
    """测试子命令名解析"""
    assert parse_command("mask-dump") == CommandType.MASK_DUMP
    with pytest.raises(ConfigurationError):
        parse_command("unknown")


def test_exit_ok(tmp_path):
    """测试成功时返回 0"""
    out = tmp_path / "out"
    assert main(["format-inspect", "--out", str(out)]) == EXIT_OK
    assert (out / "formats.csv").exists()
    assert main(["bandwidth-report", "--out", str(out), "--check"]) == EXIT_OK


def test_exit_on_failed_check(tmp_path):
    """测试 --check 下检查失败返回 1，不加 --check 返回 0"""
    config_path = _write_config(tmp_path / "one_block.json", {"experiment": {"underflow_resblocks": 1}})
    out = str(tmp_path / "out")
    assert main(["underflow-demo", "--config", config_path, "--out", out, "--check"]) == EXIT_CHECK_FAILED
    assert main(["underflow-demo", "--config", config_path, "--out", out]) == EXIT_OK


def test_exit_on_error(tmp_path):
    """测试缺失或非法的配置返回 2"""
    out = str(tmp_path / "out")
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", out]) == EXIT_ERROR
    bad = _write_config(tmp_path / "bad.json", {"topology": {"n_machines": 0}})
    assert main(["compression-table", "--config", bad, "--out", out]) == EXIT_ERROR


def test_execute_train_command(tmp_path):
    """测试 train 命令写出生效的配置与报告"""
    config_path = _write_config(tmp_path / "train.json",
                                {"task": {"steps": 3, "features": 4, "outputs": 2, "batch_size": 4}})
    result = execute_command(CommandType.TRAIN, CommandRequest(config_path=config_path, out=str(tmp_path / "run"),
                                                               seed=2))
    assert result.success
    assert result.checks_passed
    assert (tmp_path / "run" / "run_config.json").exists()
    assert (tmp_path / "run" / "loss_history.csv").exists()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
