"""
带误差反馈的 PowerSGD 秩 r 梯度压缩

单个参数分片的流水线（跨机器的平均由调用方通过 all-reduce 注入）：

    accumulate_error   E += reduce_scatter(G) / grad_scale        (1-6-9)
    compute_p          P_i = E_i · Q · p_scale                    (1-6-9)
    orthogonalize_p    P = householder(mean_i P_i + εI)           (32 位)
    compute_q          Q_i = E_iᵀ · P · q_scale                   (1-6-9)
    decompress         P · mean_i(Q_i)ᵀ / q_scale                 (宽精度)
    update_error       按有限性决策表更新 E
"""

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from shardsim.errors import ConfigurationError, ShapeMismatchError
from shardsim.lowp import FP32, M169, FloatFormatSpec
from shardsim.tensor import Tensor, frobenius_norm, matmul
from shardsim.utils import format_log

logger = logging.getLogger(__name__)

Reducer = Callable[[Tensor], Tensor]


class QPolicy(str, Enum):
    """Q 矩阵策略"""
    FIXED = "fixed"
    WARM_START = "warm_start"
    RESAMPLE = "resample"


@dataclass(frozen=True)
class CompressionConfig:
    """压缩配置：秩、ε、P/Q 缩放常数、Q 策略与各存储格式"""
    rank_r: int
    epsilon: float = 1e-6
    p_scale: float = 1.0
    q_scale: float = 1.0
    q_seed: int = 0
    q_policy: QPolicy = QPolicy.FIXED
    factor_format: Optional[FloatFormatSpec] = M169
    basis_format: Optional[FloatFormatSpec] = FP32

    def __post_init__(self):
        if self.rank_r < 1:
            raise ConfigurationError(f"rank must be >= 1, got {self.rank_r}")
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        for name in ("p_scale", "q_scale"):
            value = getattr(self, name)
            if value <= 0 or math.frexp(value)[0] != 0.5:
                raise ConfigurationError(f"{name} must be a positive power of two, got {value}")
        object.__setattr__(self, "q_policy", QPolicy(self.q_policy))


@dataclass(frozen=True)
class LowRankState:
    """一个参数分片的误差缓冲与低秩因子（均按定向后的形状存放）"""
    error_buffer: Tensor
    P: Tensor
    Q: Tensor
    transposed: bool
    shard_key: str = ""

    @property
    def oriented_shape(self) -> Tuple[int, int]:
        return self.error_buffer.shape


def orient(shape: Sequence[int]) -> bool:
    """m > n 时转置，使得 m ≤ n"""
    m, n = shape
    if m < 1 or n < 1:
        raise ShapeMismatchError(f"degenerate gradient shape {tuple(shape)}")
    return m > n


def shard_seed(run_seed: int, shard_key: str, step: Optional[int] = None) -> int:
    """由 (run seed, 分片 id[, step]) 派生的确定性种子"""
    key = shard_key if step is None else f"{shard_key}@{step}"
    return (run_seed * 1_000_003 + zlib.crc32(key.encode("utf-8"))) % (2 ** 63 - 1)


def gaussian_q(n: int, rank: int, seed: int, fmt: Optional[FloatFormatSpec] = M169) -> Tensor:
    """单位方差高斯 / √n"""
    generator = torch.Generator().manual_seed(seed)
    data = torch.randn(n, rank, generator=generator, dtype=torch.float64) / math.sqrt(n)
    return Tensor(data, fmt)


def init_state(grad_shape: Sequence[int], cfg: CompressionConfig, run_seed: int = 0,
               shard_key: str = "shard") -> LowRankState:
    """零误差缓冲 + 按 Q 策略初始化的 Q"""
    transposed = orient(grad_shape)
    m, n = (grad_shape[1], grad_shape[0]) if transposed else (grad_shape[0], grad_shape[1])
    if cfg.rank_r > min(m, n):
        raise ConfigurationError(f"rank {cfg.rank_r} exceeds min{(m, n)} for shard {shard_key}")
    return LowRankState(
        error_buffer=Tensor.zeros((m, n), cfg.factor_format),
        P=Tensor.zeros((m, cfg.rank_r), cfg.basis_format),
        Q=gaussian_q(n, cfg.rank_r, shard_seed(run_seed ^ cfg.q_seed, shard_key), cfg.factor_format),
        transposed=transposed,
        shard_key=shard_key,
    )


def _oriented(t: Tensor, transposed: bool) -> Tensor:
    return t.T if transposed else t


def accumulate_error(state: LowRankState, reduced_grad: Tensor, grad_scale: float,
                     reduce_finite: bool, fmt: Optional[FloatFormatSpec] = M169) -> LowRankState:
    """reduce_finite 时 E += G / grad_scale（按 fmt 存储），否则不变"""
    if not reduce_finite:
        return state
    grad = _oriented(reduced_grad, state.transposed)
    if grad.shape != state.error_buffer.shape:
        raise ShapeMismatchError(f"gradient {reduced_grad.shape} does not match buffer {state.error_buffer.shape}")
    updated = Tensor(state.error_buffer.data + grad.data / grad_scale, fmt)
    return replace(state, error_buffer=updated)


def compute_p(state: LowRankState, cfg: CompressionConfig) -> Tensor:
    """P_i = E_i · Q · p_scale（本机，未正交化）"""
    return matmul(state.error_buffer, state.Q).scale(cfg.p_scale, cfg.factor_format)


def householder_orthogonalize(P: Tensor, epsilon: float = 1e-6) -> Tensor:
    """
    对 P + εI_{m×r} 做 Householder QR，返回正交列

    符号约定：R 的对角元取正，因此 εI 的结果恰为前 r 个标准基。
    """
    if P.data.dim() != 2:
        raise ShapeMismatchError("orthogonalization needs a 2-D matrix")
    m, r = P.shape
    if m < r:
        raise ConfigurationError(f"cannot orthogonalize {m}x{r}: need m >= r")

    A = P.data.clone() + epsilon * torch.eye(m, r, dtype=torch.float64)
    reflectors: List[Optional[torch.Tensor]] = []
    for j in range(r):
        x = A[j:, j]
        norm_x = torch.linalg.vector_norm(x)
        if norm_x == 0:
            reflectors.append(None)
            continue
        alpha = -norm_x if x[0] >= 0 else norm_x
        v = x.clone()
        v[0] = v[0] - alpha
        norm_v = torch.linalg.vector_norm(v)
        if norm_v == 0:
            reflectors.append(None)
            continue
        v = v / norm_v
        A[j:, j:] = A[j:, j:] - 2.0 * torch.outer(v, v @ A[j:, j:])
        reflectors.append(v)

    basis = torch.eye(m, r, dtype=torch.float64)
    for j in reversed(range(r)):
        v = reflectors[j]
        if v is None:
            continue
        basis[j:, :] = basis[j:, :] - 2.0 * torch.outer(v, v @ basis[j:, :])

    diagonal = torch.diagonal(A[:r, :r])
    signs = torch.where(diagonal < 0, -1.0, 1.0).to(torch.float64)
    return Tensor(basis * signs)


def orthogonalize_p(P_reduced: Tensor, cfg: CompressionConfig) -> Tensor:
    return householder_orthogonalize(P_reduced, cfg.epsilon).with_format(cfg.basis_format)


def compute_q(state: LowRankState, P: Tensor, cfg: CompressionConfig) -> Tensor:
    """Q_i = E_iᵀ · P · q_scale（本机）"""
    return matmul(state.error_buffer, P, transpose_a=True).scale(cfg.q_scale, cfg.factor_format)


def decompress(P: Tensor, Q: Tensor, q_scale: float, transposed: bool = False) -> Tensor:
    """宽精度 P·Qᵀ / q_scale，按定向标记转回原形状"""
    if P.shape[1] != Q.shape[1]:
        raise ShapeMismatchError(f"factor ranks differ: P {P.shape}, Q {Q.shape}")
    product = matmul(P, Q, transpose_b=True)
    restored = Tensor(product.data / q_scale)
    return restored.T if transposed else restored


def update_error(state: LowRankState, decompressed: Tensor, pq_finite: bool,
                 step2_buffer_finite: bool, fmt: Optional[FloatFormatSpec] = M169) -> LowRankState:
    """
    误差缓冲决策表

    pq_finite                       E -= 解压梯度（已是跨机器平均）
    not pq_finite, 缓冲有限         E 不变
    not pq_finite, 缓冲非有限       E <- 0
    """
    if pq_finite:
        delta = _oriented(decompressed, state.transposed)
        if delta.shape != state.error_buffer.shape:
            raise ShapeMismatchError(f"decompressed {decompressed.shape} does not match buffer")
        return replace(state, error_buffer=Tensor(state.error_buffer.data - delta.data, fmt))
    if step2_buffer_finite:
        return state
    logger.warning(format_log("WARNING", "error buffer reset to zero", shard=state.shard_key))
    return replace(state, error_buffer=Tensor.zeros(state.error_buffer.shape, fmt))


def next_q(state: LowRankState, Q_reduced: Tensor, cfg: CompressionConfig, run_seed: int = 0,
           step: int = 0) -> Tensor:
    """
    下一步用于乘法的 Q

    fixed：不变；warm_start：归约后 Q 的列归一化；resample：按 (seed, 分片, step) 重新采样
    """
    if cfg.q_policy == QPolicy.FIXED:
        return state.Q
    if cfg.q_policy == QPolicy.RESAMPLE:
        n = state.Q.shape[0]
        return gaussian_q(n, cfg.rank_r, shard_seed(run_seed ^ cfg.q_seed, state.shard_key, step + 1),
                          cfg.factor_format)
    data = Q_reduced.data
    if not bool(torch.isfinite(data).all()):
        return state.Q
    norms = torch.linalg.vector_norm(data, dim=0)
    columns = torch.where(norms > 0, data / torch.where(norms > 0, norms, torch.ones_like(norms)), state.Q.data)
    return Tensor(columns, cfg.factor_format)


def compress(state: LowRankState, cfg: CompressionConfig, all_reduce: Optional[Reducer] = None,
             run_seed: int = 0, step: int = 0) -> Tuple[LowRankState, Tensor, Tensor]:
    """
    单分片的完整压缩（P、正交化、Q）

    Args:
        all_reduce: 跨机器平均，默认单机恒等

    Returns:
        (新状态, P, 归约后的 Q)；新状态中的 Q 为下一步的乘法矩阵
    """
    if state.error_buffer.shape[0] < cfg.rank_r or state.error_buffer.shape[1] < cfg.rank_r:
        raise ConfigurationError(f"rank {cfg.rank_r} exceeds buffer shape {state.error_buffer.shape}")
    reduce = all_reduce or (lambda t: t)
    P = orthogonalize_p(reduce(compute_p(state, cfg)), cfg)
    Q_reduced = reduce(compute_q(state, P, cfg))
    following = next_q(state, Q_reduced, cfg, run_seed=run_seed, step=step)
    return replace(state, P=P, Q=following), P, Q_reduced


def factors_finite(P: Tensor, Q: Tensor) -> bool:
    return P.is_finite() and Q.is_finite()


# ---- 诊断与检查点辅助 ----

@dataclass
class CompressionDiagnostics:
    """逐步压缩诊断行"""
    rows: List[Dict] = field(default_factory=list)

    def record(self, step: int, state: LowRankState, decompressed: Tensor,
               buffer_after: Tensor, pq_finite: bool):
        buffer_before = state.error_buffer
        shard = state.shard_key
        reference = frobenius_norm(buffer_before)
        residual = buffer_before.data - _oriented(decompressed, state.transposed).data
        self.rows.append({
            "step": step,
            "shard": shard,
            "buffer_norm": reference,
            "reconstruction_error": frobenius_norm(Tensor(residual)) / reference if reference > 0 else 0.0,
            "buffer_norm_after": frobenius_norm(buffer_after),
            "pq_finite": pq_finite,
        })


def fold_error_buffers(buffers: Sequence[Tensor]) -> Tensor:
    """跨机器求和（按机器序号顺序）"""
    if not buffers:
        raise ShapeMismatchError("no error buffers to fold")
    total = buffers[0].data.clone()
    for buffer in buffers[1:]:
        if buffer.shape != buffers[0].shape:
            raise ShapeMismatchError("error buffers differ in shape")
        total = total + buffer.data
    return Tensor(total)


def unfold_error_buffer(total: Tensor, n_machines: int, fmt: Optional[FloatFormatSpec] = M169) -> Tensor:
    """恢复每台机器的缓冲：fmt(sum / N)"""
    return Tensor(total.data / n_machines, fmt)


def state_to_dict(state: LowRankState) -> Dict:
    return {
        "P": state.P.data,
        "Q": state.Q.data,
        "transposed": state.transposed,
        "shard_key": state.shard_key,
    }


# ---- 跨机器的分组流水线 ----

@dataclass
class GroupedCompression:
    """一个残差块所有分片的压缩结果（按机器、按分片索引）"""
    states: List[List[LowRankState]]
    P: List[Tensor]
    Q: List[Tensor]
    pq_finite: List[bool]


def grouped_compress(states: Sequence[Sequence[LowRankState]], cfg: CompressionConfig, cluster,
                     *, run_seed: int = 0, step: int = 0, resblock: Optional[int] = None) -> GroupedCompression:
    """
    states[machine][shard] 的 P、Q 各用一次分组 all-reduce

    P/Q 以 factor_format 传输并截断无穷；pq_finite 取截断前的有限性，
    截断后的值不能再说明是否出现过无穷。
    """
    n_shards = len(states[0])
    clamp = cfg.factor_format is not None
    P_local = [[compute_p(s, cfg) for s in machine] for machine in states]
    P_result = cluster.grouped_all_reduce(P_local, cfg.factor_format, clamp_infinities=clamp,
                                          tag="P", resblock=resblock, overlap="backward")
    bases = [orthogonalize_p(P_result.buffers[0][k], cfg) for k in range(n_shards)]

    Q_local = [[compute_q(s, bases[k], cfg) for k, s in enumerate(machine)] for machine in states]
    Q_result = cluster.grouped_all_reduce(Q_local, cfg.factor_format, clamp_infinities=clamp,
                                          tag="Q", resblock=resblock, overlap="backward")
    Q_reduced = Q_result.buffers[0]

    new_states = []
    for machine in states:
        row = []
        for k, s in enumerate(machine):
            following = next_q(s, Q_reduced[k], cfg, run_seed=run_seed, step=step)
            row.append(replace(s, P=bases[k], Q=following))
        new_states.append(row)
    pq_finite = [p and q for p, q in zip(P_result.finite, Q_result.finite)]
    return GroupedCompression(new_states, bases, list(Q_reduced), pq_finite)
