"""
实验配方测试
"""

import json
import math
import os
import sys
from pathlib import Path

import pytest
import torch

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.errors import ConfigurationError
from shardsim.harness.experiments import (ExperimentResult, compression_table_recipe, dvae_anneal_recipe,
                                          max_ulp_deviation, qpolicy_ab_recipe, rank_gap_recipe,
                                          resume_check_recipe, run_experiment, underflow_demo_recipe, variant)
from shardsim.harness.runconfig import RunConfig, load_run_config, parse_run_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_variant_overrides_one_section():
    """测试 variant 只覆盖给出的字段"""
    rc = parse_run_config({"compression": {"epsilon": 1e-5}})
    changed = variant(rc, compression={"rank": 4})
    assert changed.compression.rank == 4
    assert changed.compression.epsilon == 1e-5
    assert rc.compression.rank == 2


def test_result_passes_only_when_all_checks_pass():
    """测试检查项汇总"""
    result = ExperimentResult("demo")
    assert result.passed
    result.check("one", True)
    result.check("two", False, "detail")
    assert not result.passed
    assert result.checks[1].detail == "detail"


def test_compression_table(tmp_path):
    """测试默认三组参数的压缩率与已知值一致"""
    result = compression_table_recipe(RunConfig(), tmp_path, 0)
    assert result.passed
    assert len(result.checks) == 3
    assert (tmp_path / "compression_table.csv").exists()
    rates = [round(row["compression_rate"], 4) for row in result.summary["rows"]]
    assert rates == [0.8333, 0.8512, 0.8589]


def test_underflow_demo(tmp_path):
    """测试全局缩放让最后一块大部分下溢，而逐块缩放没有下溢"""
    result = underflow_demo_recipe(RunConfig(), tmp_path, 0)
    assert result.passed
    assert result.summary["resblock_underflow_total"] == 0
    assert result.summary["last_block"]["global_underflow_fraction"] > 0.5


def test_resume_check_small_run(tmp_path):
    """测试混合精度下的保存/恢复比较：各机器数据相同，Q 每步重采样"""
    rc = parse_run_config({"topology": {"n_machines": 2},
                           "task": {"features": 6, "outputs": 2, "batch_size": 8, "identical_shards": True},
                           "compression": {"q_policy": "resample"},
                           "precision": {"mode": "mixed"},
                           "experiment": {"resume_at": 4, "resume_steps": 3}})
    result = resume_check_recipe(rc, tmp_path, 1)
    assert result.passed
    assert result.summary["max_ulp_deviation"] <= 1.0
    assert (tmp_path / "resume_check.csv").exists()


def test_resume_check_wide_with_distinct_shards(tmp_path):
    """测试宽精度下各机器缓冲不同时，恢复成平均缓冲不改变之后的解压梯度"""
    rc = parse_run_config({"topology": {"n_machines": 2},
                           "task": {"features": 6, "outputs": 2, "batch_size": 8},
                           "experiment": {"resume_at": 4, "resume_steps": 3}})
    result = resume_check_recipe(rc, tmp_path, 1)
    assert result.passed
    assert result.summary["max_ulp_deviation"] <= 1.0


def test_resume_check_shipped_config(tmp_path):
    """测试 configs/resume_check.json 在混合精度下通过"""
    rc = load_run_config(CONFIGS / "resume_check.json")
    assert rc.precision.mode == "mixed"
    result = resume_check_recipe(rc, tmp_path, 0)
    assert result.passed, result.checks


def test_rank_gap_writes_rows(tmp_path):
    """测试 rank-gap 按秩输出与基线的相对差"""
    rc = parse_run_config({"topology": {"n_machines": 2},
                           "task": {"steps": 10, "features": 6, "outputs": 2, "batch_size": 8},
                           "experiment": {"ranks": [1, 2]}})
    result = rank_gap_recipe(rc, tmp_path, 0)
    assert [row["rank"] for row in result.summary["rows"]] == [1, 2]
    assert (tmp_path / "rank_gap.csv").exists()


def _trace(*values):
    return [{"W": [torch.tensor(values, dtype=torch.float64)]}]


def test_max_ulp_deviation():
    """测试偏差以各元素自身的 1-6-9 ulp 为单位"""
    ref = _trace(1.0, 0.5, 0.0)
    assert max_ulp_deviation(ref, _trace(1.0, 0.5, 0.0)) == 0.0
    assert max_ulp_deviation(ref, _trace(1.0, 0.5 + 2.0 ** -10, 0.0)) == pytest.approx(1.0)
    assert max_ulp_deviation(ref, _trace(1.0 + 2.0 ** -9, 0.5, 0.0)) == pytest.approx(1.0)
    assert max_ulp_deviation(ref, _trace(1.0, 0.5, 2.0 ** -67)) == pytest.approx(2.0)


def test_max_ulp_deviation_small_elements_use_their_own_ulp():
    """测试小幅值元素的偏差不会被同一张量里的大值掩盖"""
    ref = _trace(8.0, 2.0 ** -20)
    res = _trace(8.0, 2.0 ** -20 + 2.0 ** -27)
    assert max_ulp_deviation(ref, res) == pytest.approx(4.0)


def test_qpolicy_ab_fixed_matches_warm_start(tmp_path):
    """测试 2 台机器、秩 2 的线性回归上固定 Q 不比热启动差，三种策略都接近噪声下限"""
    rc = variant(load_run_config(CONFIGS / "qpolicy_ab.json"), experiment={"qpolicy_seeds": [0]})
    result = qpolicy_ab_recipe(rc, tmp_path, 0)
    checks = {c.name: c for c in result.checks}
    assert checks["fixed <= 1.05 x warm_start"].passed
    assert "resample >= 1.5 x fixed" in checks
    means = result.summary["mean_final_eval"]
    assert set(means) == {"fixed", "warm_start", "resample"}
    assert all(value < 0.3 for value in means.values())
    assert (tmp_path / "qpolicy_ab.csv").exists()


def test_dvae_anneal_gap_shrinks(tmp_path):
    """测试退火后的玩具 dVAE 在 tau=1/16 的 ELB 差小于 tau=1"""
    rc = parse_run_config({"experiment": {"dvae_steps": 400, "dvae_eval_batch": 32}})
    result = dvae_anneal_recipe(rc, tmp_path, 0)
    assert result.passed, result.checks
    gaps = result.summary["gaps"]
    assert [row["tau"] for row in gaps] == [1.0, 0.5, 0.25, 0.125, 1.0 / 16.0]
    assert gaps[-1]["gap"] < gaps[0]["gap"]
    assert (tmp_path / "dvae_anneal.csv").exists()


def test_max_ulp_deviation_nonfinite():
    """测试同为非有限记 0，一方非有限记 inf"""
    ref = _trace(math.inf, math.nan, 1.0)
    assert max_ulp_deviation(ref, _trace(math.inf, math.nan, 1.0)) == 0.0
    assert max_ulp_deviation(ref, _trace(math.inf, math.nan, math.inf)) == math.inf
    assert max_ulp_deviation(_trace(1.0), _trace(math.nan)) == math.inf


def test_run_experiment_writes_summary(tmp_path):
    """测试统一入口写出 summary.json，未知配方报错"""
    result = run_experiment("compression-table", RunConfig(), tmp_path, seed=4)
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert summary["experiment"] == "compression-table"
    assert summary["seed"] == 4
    assert summary["passed"] is result.passed
    with pytest.raises(ConfigurationError):
        run_experiment("nope", RunConfig(), tmp_path)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
