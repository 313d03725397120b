"""
PowerSGD 压缩测试

覆盖定向、Householder 正交化、满秩精确重构、误差缓冲决策表、Q 策略与分组流水线
"""

import math
import os
import sys
from dataclasses import replace

import pytest
import torch

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shardsim.cluster import SimCluster, Topology
from shardsim.errors import ConfigurationError, ShapeMismatchError
from shardsim.lowp import M169
from shardsim.powersgd import (CompressionConfig, CompressionDiagnostics, QPolicy, accumulate_error, compress,
                               decompress, fold_error_buffers, gaussian_q, grouped_compress,
                               householder_orthogonalize, init_state, next_q, orient, shard_seed,
                               unfold_error_buffer, update_error)
from shardsim.tensor import Tensor


def _wide(rank, **kwargs):
    return CompressionConfig(rank_r=rank, factor_format=None, basis_format=None, **kwargs)


def _random(shape, seed):
    return Tensor.randn(shape, torch.Generator().manual_seed(seed))


def test_config_validation():
    """测试秩、ε 与缩放常数的校验"""
    with pytest.raises(ConfigurationError):
        CompressionConfig(rank_r=0)
    with pytest.raises(ConfigurationError):
        CompressionConfig(rank_r=1, p_scale=3.0)
    with pytest.raises(ConfigurationError):
        CompressionConfig(rank_r=1, epsilon=0.0)
    assert CompressionConfig(rank_r=1, q_policy="warm_start").q_policy is QPolicy.WARM_START


def test_orientation():
    """测试 m > n 时转置"""
    assert orient((8, 4))
    assert not orient((4, 8))
    state = init_state((8, 4), _wide(2), shard_key="w")
    assert state.transposed
    assert state.error_buffer.shape == (4, 8)
    assert state.Q.shape == (8, 2)
    with pytest.raises(ConfigurationError):
        init_state((3, 8), _wide(4))


def test_gaussian_q_is_deterministic():
    """测试 Q 初始化由种子与分片 id 决定"""
    a = gaussian_q(16, 2, shard_seed(5, "w#0"))
    b = gaussian_q(16, 2, shard_seed(5, "w#0"))
    c = gaussian_q(16, 2, shard_seed(5, "w#1"))
    assert torch.equal(a.data, b.data)
    assert not torch.equal(a.data, c.data)
    assert a.format_tag is M169


def test_householder_of_zero_is_standard_basis():
    """测试零矩阵正交化得到前 r 个标准基"""
    basis = householder_orthogonalize(Tensor.zeros((5, 2)))
    assert torch.equal(basis.data, torch.eye(5, 2, dtype=torch.float64))


def test_householder_columns_orthonormal():
    """测试正交化结果列正交且张成原列空间"""
    P = _random((9, 3), 1)
    basis = householder_orthogonalize(P, epsilon=1e-12).data
    assert torch.allclose(basis.T @ basis, torch.eye(3, dtype=torch.float64), atol=1e-12)
    projected = basis @ (basis.T @ P.data)
    assert torch.allclose(projected, P.data, atol=1e-9)
    with pytest.raises(ConfigurationError):
        householder_orthogonalize(Tensor.zeros((2, 3)))


def test_full_rank_compression_is_exact():
    """测试秩等于短边时解压精确重构误差缓冲"""
    cfg = _wide(4)
    state = init_state((4, 10), cfg, run_seed=2, shard_key="w")
    grad = _random((4, 10), 7)
    state = accumulate_error(state, grad, grad_scale=1.0, reduce_finite=True, fmt=None)
    new_state, P, Q = compress(state, cfg)
    restored = decompress(P, Q, cfg.q_scale, new_state.transposed)
    assert torch.allclose(restored.data, grad.data, atol=1e-10)
    after = update_error(state, restored, pq_finite=True, step2_buffer_finite=True, fmt=None)
    assert float(after.error_buffer.data.abs().max()) < 1e-10


def test_transposed_shard_restores_original_shape():
    """测试转置分片解压回原形状"""
    cfg = _wide(3)
    state = init_state((10, 3), cfg, shard_key="t")
    grad = _random((10, 3), 8)
    state = accumulate_error(state, grad, 1.0, True, fmt=None)
    new_state, P, Q = compress(state, cfg)
    restored = decompress(P, Q, cfg.q_scale, new_state.transposed)
    assert restored.shape == (10, 3)
    assert torch.allclose(restored.data, grad.data, atol=1e-10)


def test_scale_constants_cancel():
    """测试 p_scale / q_scale 在解压后抵消"""
    grad = _random((4, 6), 9)
    results = []
    for p_scale, q_scale in ((1.0, 1.0), (2.0 ** 5, 2.0 ** -3)):
        cfg = _wide(2, p_scale=p_scale, q_scale=q_scale, epsilon=1e-30)
        state = accumulate_error(init_state((4, 6), cfg, shard_key="s"), grad, 1.0, True, fmt=None)
        _, P, Q = compress(state, cfg)
        results.append(decompress(P, Q, q_scale).data)
    assert torch.allclose(results[0], results[1], atol=1e-12)


def test_accumulate_error():
    """测试误差累积按 grad_scale 还原并跳过非有限归约"""
    cfg = _wide(1)
    state = init_state((2, 2), cfg)
    grad = Tensor.of([[4.0, 8.0], [2.0, 0.0]])
    state = accumulate_error(state, grad, grad_scale=4.0, reduce_finite=True, fmt=M169)
    assert state.error_buffer.tolist() == [[1.0, 2.0], [0.5, 0.0]]
    unchanged = accumulate_error(state, grad, 4.0, reduce_finite=False)
    assert unchanged is state
    with pytest.raises(ShapeMismatchError):
        accumulate_error(state, Tensor.zeros((3, 2)), 1.0, True)


def test_update_error_decision_table():
    """测试误差缓冲决策表的三种情况"""
    cfg = _wide(1)
    state = accumulate_error(init_state((2, 2), cfg), Tensor.of([[1.0, 1.0], [1.0, 1.0]]), 1.0, True, fmt=None)
    delta = Tensor.of([[0.5, 0.5], [0.5, 0.5]])
    assert update_error(state, delta, True, True).error_buffer.tolist() == [[0.5, 0.5], [0.5, 0.5]]
    assert update_error(state, delta, False, True) is state
    reset = update_error(state, delta, False, False)
    assert reset.error_buffer.tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_q_policies():
    """测试三种 Q 策略"""
    state = init_state((4, 6), _wide(2), run_seed=1, shard_key="q")
    Q_reduced = Tensor.of([[3.0, 0.0]] * 6)
    fixed = next_q(state, Q_reduced, _wide(2, q_policy="fixed"))
    assert fixed is state.Q

    warm = next_q(state, Q_reduced, _wide(2, q_policy="warm_start"))
    assert torch.allclose(torch.linalg.vector_norm(warm.data[:, 0]), torch.tensor(1.0, dtype=torch.float64))
    assert torch.equal(warm.data[:, 1], state.Q.data[:, 1])

    cfg = _wide(2, q_policy="resample")
    first = next_q(state, Q_reduced, cfg, run_seed=1, step=0)
    again = next_q(state, Q_reduced, cfg, run_seed=1, step=0)
    later = next_q(state, Q_reduced, cfg, run_seed=1, step=1)
    assert torch.equal(first.data, again.data)
    assert not torch.equal(first.data, later.data)


def test_fold_and_unfold():
    """测试误差缓冲的跨机器求和与恢复"""
    buffers = [Tensor.of([[1.0, 2.0]]), Tensor.of([[3.0, 6.0]])]
    total = fold_error_buffers(buffers)
    assert total.tolist() == [[4.0, 8.0]]
    assert unfold_error_buffer(total, 2).tolist() == [[2.0, 4.0]]
    with pytest.raises(ShapeMismatchError):
        fold_error_buffers([])


def test_grouped_compress_matches_single_machine():
    """测试相同缓冲的分组流水线与单机压缩一致"""
    cfg = _wide(2)
    grads = [_random((4, 6), 11), _random((4, 6), 12)]
    states = [init_state((4, 6), cfg, run_seed=3, shard_key=f"w#{k}") for k in range(2)]
    states = [accumulate_error(s, g, 1.0, True, fmt=None) for s, g in zip(states, grads)]

    cluster = SimCluster(Topology(2, 1))
    result = grouped_compress([states, states], cfg, cluster, run_seed=3, resblock=0)
    assert result.pq_finite == [True, True]
    for k, state in enumerate(states):
        _, P, Q = compress(state, cfg, run_seed=3)
        assert torch.allclose(result.P[k].data, P.data, atol=1e-12)
        assert torch.allclose(result.Q[k].data, Q.data, atol=1e-12)
    assert [e.tag for e in cluster.ledger.entries] == ["P", "Q"]


def test_grouped_compress_flags_nonfinite_before_clamp():
    """测试分组 all-reduce 截断无穷后 pq_finite 仍为 False"""
    cfg = CompressionConfig(rank_r=1)
    state = init_state((2, 4), cfg, shard_key="x")
    poisoned = accumulate_error(state, Tensor.of([[100.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]), 1.0, True)
    assert not poisoned.error_buffer.is_finite()
    result = grouped_compress([[poisoned]], cfg, SimCluster(Topology(1, 1)))
    assert result.pq_finite == [False]
    assert result.P[0].is_finite()


def test_diagnostics_row():
    """测试压缩诊断记录"""
    cfg = _wide(1)
    state = accumulate_error(init_state((2, 2), cfg), Tensor.of([[3.0, 0.0], [0.0, 4.0]]), 1.0, True, fmt=None)
    diagnostics = CompressionDiagnostics()
    decompressed = Tensor.of([[3.0, 0.0], [0.0, 0.0]])
    after = update_error(state, decompressed, True, True, fmt=None)
    diagnostics.record(1, state, decompressed, after.error_buffer, True)
    row = diagnostics.rows[0]
    assert row["buffer_norm"] == 5.0
    assert row["reconstruction_error"] == pytest.approx(0.8)
    assert row["buffer_norm_after"] == 4.0
    assert math.isfinite(row["reconstruction_error"])


def _decaying_gradient(m, n, seed, ratio=0.5):
    """奇异值按 ratio 几何衰减的随机矩阵"""
    generator = torch.Generator().manual_seed(seed)
    k = min(m, n)
    U, _ = torch.linalg.qr(torch.randn(m, k, generator=generator, dtype=torch.float64))
    V, _ = torch.linalg.qr(torch.randn(n, k, generator=generator, dtype=torch.float64))
    sigma = ratio ** torch.arange(k, dtype=torch.float64)
    return Tensor((U * sigma) @ V.T)


def test_error_feedback_average_converges_to_constant_gradient():
    """测试恒定梯度下解压输出的累计平均收敛到梯度本身"""
    cfg = _wide(4, q_policy="warm_start")
    G = _decaying_gradient(32, 64, seed=21)
    state = init_state((32, 64), cfg, run_seed=5, shard_key="ef")
    total = torch.zeros(32, 64, dtype=torch.float64)
    steps = 50
    for step in range(steps):
        state = accumulate_error(state, G, 1.0, True, fmt=None)
        new_state, P, Q = compress(state, cfg, run_seed=5, step=step)
        decompressed = decompress(P, Q, cfg.q_scale, new_state.transposed)
        state = update_error(new_state, decompressed, True, True, fmt=None)
        total += decompressed.data
    relative = float(torch.linalg.norm(total / steps - G.data) / torch.linalg.norm(G.data))
    assert relative < 0.05


def test_decompressed_depends_only_on_buffer_mean():
    """测试把各机器误差缓冲换成其平均后，之后的解压梯度不变"""
    cfg = _wide(2, q_policy="warm_start")
    shape = (6, 10)
    buffers = [_random(shape, 31), _random(shape, 32)]
    mean = Tensor((buffers[0].data + buffers[1].data) / 2)

    def trace(initial):
        states = [[replace(init_state(shape, cfg, run_seed=4, shard_key="w"), error_buffer=b)] for b in initial]
        outputs = []
        for step in range(4):
            grad = _random(shape, 40 + step)
            states = [[accumulate_error(s, grad, 1.0, True, fmt=None) for s in machine] for machine in states]
            result = grouped_compress(states, cfg, SimCluster(Topology(2, 1)), run_seed=4, step=step)
            decompressed = decompress(result.P[0], result.Q[0], cfg.q_scale, result.states[0][0].transposed)
            states = [[update_error(s, decompressed, True, True, fmt=None) for s in machine]
                      for machine in result.states]
            outputs.append(decompressed.data)
        return outputs

    for separate, averaged in zip(trace(buffers), trace([mean, mean])):
        assert torch.allclose(separate, averaged, rtol=1e-10, atol=1e-12)


def test_norm_identity_with_orthonormal_basis():
    """测试 P 列正交时 ‖P·Qᵀ‖_F = ‖Q‖_F"""
    generator = torch.Generator().manual_seed(17)
    for _ in range(100):
        m = int(torch.randint(2, 40, (1,), generator=generator))
        n = int(torch.randint(2, 40, (1,), generator=generator))
        rank = int(torch.randint(1, min(m, n) + 1, (1,), generator=generator))
        P, _ = torch.linalg.qr(torch.randn(m, rank, generator=generator, dtype=torch.float64))
        Q = torch.randn(n, rank, generator=generator, dtype=torch.float64)
        product = decompress(Tensor(P), Tensor(Q), 1.0)
        expected = float(torch.linalg.norm(Q))
        assert abs(float(torch.linalg.norm(product.data)) - expected) / expected < 1e-5


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
