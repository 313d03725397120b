"""
合成任务测试
"""

import math
import os
import sys

import pytest
import torch

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.harness.runconfig import parse_run_config
from shardsim.harness.tasks import (LinearRegressionTask, QuadraticBowlTask, SequenceTask, bowl_optimum_gap,
                                    create_task, replica_generator)
from shardsim.toymodel.hooks import ScaleHooks


def test_replica_data_is_deterministic():
    """测试 (seed, step, replica) 决定数据，不同副本看到不同数据"""
    a = torch.rand(3, generator=replica_generator(1, 2, 0))
    b = torch.rand(3, generator=replica_generator(1, 2, 0))
    c = torch.rand(3, generator=replica_generator(1, 2, 1))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_linear_regression_task():
    """测试线性回归任务的参数规格、零初始化与评估"""
    task = create_task(parse_run_config({"task": {"features": 6, "outputs": 2}}), 3)
    assert isinstance(task, LinearRegressionTask)
    specs = {s.name: s for s in task.model.parameter_specs()}
    assert specs["W"].compressed and specs["W"].resblock == 0
    assert not specs["b"].compressed
    params = task.model.init_params(torch.Generator().manual_seed(0))
    assert float(params["W"].abs().sum()) == 0.0
    zero_eval = task.evaluate(params, 0)
    truth_eval = task.evaluate({"W": task.true_W, "b": task.true_b}, 0)
    assert truth_eval < zero_eval
    assert truth_eval == pytest.approx(0.25, rel=0.3)


def test_linear_model_loss_matches_closed_form():
    """测试模型损失等于批内均方误差"""
    task = create_task(parse_run_config({"task": {"features": 5, "outputs": 2}}), 0)
    x, y = task.sample_batch(torch.Generator().manual_seed(1), 8, 1)
    params = {"W": torch.ones(5, 2, dtype=torch.float64), "b": torch.zeros(2, dtype=torch.float64)}
    loss = task.model.loss(params, (x, y), ScaleHooks(1, enabled=False))
    assert float(loss) == pytest.approx(float(((x @ params["W"] - y) ** 2).mean()))


def test_quadratic_bowl_optimum():
    """测试二次碗在最优点处评估为 0、距离为 0"""
    task = create_task(parse_run_config({"task": {"name": "quadratic_bowl", "features": 8, "outputs": 2}}), 4)
    assert isinstance(task, QuadraticBowlTask)
    optimum = {"W": task.true_W, "b": task.true_b}
    assert task.evaluate(optimum, 0) == 0.0
    assert bowl_optimum_gap(task, optimum) == 0.0


def test_sequence_task_batches():
    """测试序列任务的文本为等差序列、图像由前两个文本 token 决定"""
    rc = parse_run_config({"task": {"name": "sequence", "eval_size": 4},
                           "model": {"text_len": 4, "grid_h": 2, "grid_w": 3, "d_model": 8, "n_layers": 4}})
    task = create_task(rc, 0)
    assert isinstance(task, SequenceTask)
    batch = task.sample_batch(torch.Generator().manual_seed(2), 5, 1)
    assert len(batch.text) == 5
    for text, image in zip(batch.text, batch.image):
        assert 2 <= len(text) <= 4
        a, b = text[0], text[1]
        assert image == [(a + r * b + c) % 64 for r in range(2) for c in range(3)]
    assert math.isfinite(task.evaluate(task.model.init_params(torch.Generator().manual_seed(0)), 0))


def test_dvae_task_evaluates():
    """测试 dVAE 任务的批次与评估"""
    rc = parse_run_config({"task": {"name": "dvae", "steps": 10, "eval_size": 4, "batch_size": 2}})
    task = create_task(rc, 1)
    params = task.model.init_params(torch.Generator().manual_seed(1))
    assert math.isfinite(task.evaluate(params, 5))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
