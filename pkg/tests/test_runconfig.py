"""
运行配置测试
"""

import json
import os
import sys

import pytest

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.config import config
from shardsim.errors import ConfigurationError
from shardsim.harness.runconfig import RunConfig, load_run_config, parse_run_config
from shardsim.lowp import FP16, M169, M0610


def test_empty_document_is_valid():
    """测试 {} 是合法配置并得到默认值"""
    rc = parse_run_config({})
    assert rc.topology.n_machines == 1
    assert rc.task.name == "linear_regression"
    assert rc.precision.mode == "wide"
    assert rc.compression.enabled is False
    assert rc.optimizer.clip_threshold == 4.0
    assert rc.experiment.table[0] == (1920, 512, 8)


def test_wide_mode_has_no_formats():
    """测试宽精度模式下格式一律为 None，混合模式下按名称解析"""
    assert RunConfig().precision.fmt("branch_format") is None
    mixed = parse_run_config({"precision": {"mode": "mixed", "buffer_format": "1-6-9"}})
    assert mixed.precision.fmt("branch_format") is FP16
    assert mixed.precision.fmt("buffer_format") is M169
    assert mixed.precision.fmt("variance_format") is M0610


def test_rank_must_divide_across_gpus():
    """测试总秩必须能被每台机器的 GPU 数整除"""
    with pytest.raises(ConfigurationError):
        parse_run_config({"topology": {"gpus_per_machine": 4}, "compression": {"enabled": True, "rank": 6}})
    rc = parse_run_config({"topology": {"gpus_per_machine": 2}, "compression": {"enabled": True, "rank": 4}})
    assert rc.gpu_rank == 2


def test_other_consistency_errors():
    """测试字段越界、未知字段、未知格式与越界故障副本"""
    bad = [
        {"topology": {"n_machines": 0}},
        {"bogus": 1},
        {"precision": {"branch_format": "bf16"}},
        {"task": {"outputs": 3}, "topology": {"gpus_per_machine": 2}},
        {"model": {"d_model": 10, "n_heads": 3}},
        {"faults": [{"step": 1, "resblock": 0, "replica": 2}]},
    ]
    for data in bad:
        with pytest.raises(ConfigurationError):
            parse_run_config(data)


def test_seed_precedence():
    """测试 --seed 优先于文档中的 seed，再其次是环境变量"""
    assert parse_run_config({"seed": 5}).resolved_seed(9) == 9
    assert parse_run_config({"seed": 5}).resolved_seed() == 5
    assert RunConfig().resolved_seed() == config.runtime.default_seed


def test_load_from_file(tmp_path):
    """测试从 JSON 文件读取配置"""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"name": "demo", "task": {"steps": 7}}), encoding="utf-8")
    rc = load_run_config(path)
    assert rc.name == "demo"
    assert rc.task.steps == 7
    assert load_run_config(None) == RunConfig()


def test_load_errors(tmp_path):
    """测试缺失文件与非法 JSON"""
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_run_config(broken)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
