"""
残差块参数分片布局与带宽分析

每个 GPU 持有每个矩阵的 1/m；除第二个 MLP 矩阵沿 axis 0 切分外都沿 axis 1 切分。
每个 GPU 对自己的分片使用 r/m 的秩，整机总秩为 r。
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from shardsim.cluster import CollectiveLedger, SimCluster, Topology
from shardsim.errors import ConfigurationError
from shardsim.lowp import M169
from shardsim.powersgd import CompressionConfig, accumulate_error, grouped_compress, init_state
from shardsim.tensor import Tensor

logger = logging.getLogger(__name__)

ATTENTION_PARAMS = ("wq", "wk", "wv", "wpost")


@dataclass(frozen=True)
class ShardSpec:
    """单个参数矩阵在一个 GPU 上的分片"""
    param_name: str
    full_shape: Tuple[int, int]
    shard_axis: int
    per_gpu_shape: Tuple[int, int]
    compressed: bool = True

    @property
    def elements(self) -> int:
        return self.per_gpu_shape[0] * self.per_gpu_shape[1]

    def p_shape(self, gpu_rank: int) -> Tuple[int, int]:
        return (self.per_gpu_shape[0], gpu_rank)

    def q_shape(self, gpu_rank: int) -> Tuple[int, int]:
        return (gpu_rank, self.per_gpu_shape[1])


def shard_layout_for(name: str, shape: Sequence[int], axis: int, m: int, compressed: bool = True) -> ShardSpec:
    """任意二维参数沿 axis 均分到 m 个 GPU"""
    rows, cols = shape
    if axis not in (0, 1):
        raise ConfigurationError(f"shard axis must be 0 or 1, got {axis}")
    if m < 1 or shape[axis] % m != 0:
        raise ConfigurationError(f"{name}: axis {axis} of {tuple(shape)} is not divisible by m={m}")
    per_gpu = (rows // m, cols) if axis == 0 else (rows, cols // m)
    return ShardSpec(name, (rows, cols), axis, per_gpu, compressed)


def plan_resblock(d: int, m: int) -> List[ShardSpec]:
    """一个 transformer 层的 6 个可压缩矩阵的分片"""
    if d < 1 or m < 1:
        raise ConfigurationError(f"d and m must be positive, got d={d}, m={m}")
    if d % m != 0 or (4 * d) % m != 0:
        raise ConfigurationError(f"hidden size {d} is not divisible by gpus_per_machine {m}")
    specs = [shard_layout_for(name, (d, d), 1, m) for name in ATTENTION_PARAMS]
    specs.append(shard_layout_for("mlp1", (d, 4 * d), 1, m))
    specs.append(shard_layout_for("mlp2", (4 * d, d), 0, m))
    return specs


def gpu_rank(r: int, m: int) -> int:
    if r < 1 or r % m != 0:
        raise ConfigurationError(f"rank {r} must be a positive multiple of gpus_per_machine {m}")
    return r // m


def plan_totals(d: int, r: int, m: int) -> Dict[str, int]:
    """每个 GPU 每个残差块的 G / P / Q 元素总数"""
    specs = plan_resblock(d, m)
    rank = gpu_rank(r, m)
    totals = {
        "G": sum(s.elements for s in specs),
        "P": sum(s.p_shape(rank)[0] * s.p_shape(rank)[1] for s in specs),
        "Q": sum(s.q_shape(rank)[0] * s.q_shape(rank)[1] for s in specs),
    }
    return totals


def compression_rate(d: int, r: int, m: int) -> float:
    """1 − r(m+2)/(2dm)"""
    if r > d:
        raise ConfigurationError(f"rank {r} exceeds hidden size {d}")
    return float(exact_compression_rate(d, r, m))


def exact_compression_rate(d: int, r: int, m: int) -> Fraction:
    return 1 - Fraction(r * (m + 2), 2 * d * m)


def measured_rate(ledger: CollectiveLedger, plan: Sequence[ShardSpec] = ()) -> float:
    """1 − (P 字节 + Q 字节) / G 字节，只统计跨机器条目"""
    return float(exact_measured_rate(ledger, plan))


def exact_measured_rate(ledger: CollectiveLedger, plan: Sequence[ShardSpec] = ()) -> Fraction:
    p_bytes = ledger.total_bytes("inter", ["P"])
    q_bytes = ledger.total_bytes("inter", ["Q"])
    g_bytes = ledger.total_bytes("inter", ["G"])
    if g_bytes == 0 or p_bytes == 0 or q_bytes == 0:
        raise ConfigurationError("ledger lacks inter-machine P, Q or G entries for a full exchange")
    if plan:
        expected = sum(s.elements for s in plan if s.compressed)
        if ledger.total_elements("inter", ["G"]) % expected != 0:
            logger.warning("ledger G entries do not cover whole resblocks of the plan")
    return 1 - Fraction(p_bytes + q_bytes, g_bytes)


def simulate_exchange(d: int, r: int, m: int, n_machines: int = 2, seed: int = 0,
                      cluster: Optional[SimCluster] = None) -> SimCluster:
    """
    在模拟集群上跑一个残差块的两种梯度交换，账本用于 measured_rate

    每个 GPU 序号 k 在各机器上持有同一组分片，作为一个压缩组：
    一次分组 P、一次分组 Q（压缩），或一次分组 G（不压缩）。
    """
    plan = plan_resblock(d, m)
    rank = gpu_rank(r, m)
    cluster = cluster or SimCluster(Topology(n_machines, m, seed))
    cfg = CompressionConfig(rank_r=rank, q_seed=seed)
    generator = torch.Generator().manual_seed(seed)
    for gpu in range(m):
        grads = [[Tensor.randn(spec.per_gpu_shape, generator, M169) for spec in plan]
                 for _ in range(n_machines)]
        states = [[init_state(spec.per_gpu_shape, cfg, seed, f"{spec.param_name}/gpu{gpu}") for spec in plan]
                  for _ in range(n_machines)]
        states = [[accumulate_error(s, g, 1.0, True) for s, g in zip(row, grad_row)]
                  for row, grad_row in zip(states, grads)]
        grouped_compress(states, cfg, cluster, run_seed=seed, resblock=0)
        cluster.grouped_all_reduce(grads, M169, clamp_infinities=True, tag="G", resblock=0)
    return cluster


def compression_table(triples: Sequence[Tuple[int, int, int]]) -> List[Dict]:
    rows = []
    for d, r, m in triples:
        rate = compression_rate(d, r, m)
        rows.append({
            "d_model": d,
            "rank": r,
            "gpus_per_machine": m,
            "compression_rate": rate,
            "compression_percent": round(100 * rate, 2),
        })
    return rows
