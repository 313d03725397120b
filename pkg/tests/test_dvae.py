"""
玩具 dVAE 测试
"""

import math
import os
import sys

import pytest
import torch

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.errors import ConfigurationError
from shardsim.toymodel.dvae import DVAEConfig, ToyDVAE, kl_weight_schedule, make_patterns, train_dvae
from shardsim.toymodel.losses import effective_kl_weight
from shardsim.toymodel.hooks import ScaleHooks
from shardsim.toymodel.transformer import resblock_forward_backward


def test_patterns_are_valid_pixels():
    """测试程序生成的图案形状与像素范围"""
    images = make_patterns(12, torch.Generator().manual_seed(0))
    assert images.shape == (12, 8, 8)
    assert float(images.min()) >= 0.0
    assert float(images.max()) <= 255.0


def test_config_validation():
    """测试图像尺寸必须能被网格整除"""
    with pytest.raises(ConfigurationError):
        DVAEConfig(image_size=8, grid=3)
    assert DVAEConfig().positions == 16


def test_objective_and_gradients():
    """测试负 ELB 有限且编码器/解码器都有梯度"""
    model = ToyDVAE()
    generator = torch.Generator().manual_seed(1)
    params = model.init_params(generator)
    batch = model.sample_batch(4, generator, tau=1.0, beta=0.5)
    loss, grads, finite = resblock_forward_backward(model, params, batch, ScaleHooks(2, enabled=False))
    assert math.isfinite(loss)
    assert finite == [True, True]
    assert float(grads["enc.w1"].abs().sum()) > 0
    assert float(grads["dec.w2"].abs().sum()) > 0


def test_elb_gap_shrinks_with_temperature():
    """测试同一噪声下温度越低松弛 ELB 越接近离散 ELB"""
    model = ToyDVAE()
    params = model.init_params(torch.Generator().manual_seed(2))
    images = make_patterns(16, torch.Generator().manual_seed(3))
    warm = model.elb_gap(params, images, 1.0, 1.0, torch.Generator().manual_seed(4))
    cold = model.elb_gap(params, images, 1e-7, 1.0, torch.Generator().manual_seed(4))
    assert set(warm) == {"tau", "relaxed", "true", "gap"}
    assert warm["true"] == pytest.approx(cold["true"])
    assert cold["gap"] < warm["gap"]
    assert cold["gap"] == pytest.approx(0.0, abs=1e-3)


def test_train_dvae_records_schedules():
    """测试短训练的记录与退火调度"""
    params, history = train_dvae(ToyDVAE(), steps=20, seed=0, batch_size=4, anneal_steps=20)
    assert len(history) == 20
    assert history[0]["tau"] == 1.0
    assert history[0]["kl_weight"] == 0.0
    assert history[-1]["tau"] < 0.1
    assert history[-1]["kl_weight"] == pytest.approx(0.1375)
    assert all(math.isfinite(row["loss"]) for row in history)
    assert set(params) == {spec.name for spec in ToyDVAE().parameter_specs()}


def test_kl_weight_matches_full_scale_coefficient():
    """测试默认 KL 终值让归一化后的系数与全尺寸配置相同"""
    config = DVAEConfig()
    assert config.matched_kl_weight() == pytest.approx(0.1375)
    coefficient = effective_kl_weight(config.matched_kl_weight(), config.pixels, config.positions)
    assert coefficient == pytest.approx(6.6 / 192)
    schedule = kl_weight_schedule(config, anneal_steps=90)
    assert schedule.start_value == 0.0
    assert schedule.end_value == pytest.approx(0.1375)
    assert schedule.duration == 30
    assert kl_weight_schedule(config, 90, kl_weight=1.5).end_value == 1.5
    with pytest.raises(ConfigurationError):
        kl_weight_schedule(config, 90, kl_weight=-1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
