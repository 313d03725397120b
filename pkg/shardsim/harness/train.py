"""
分片 + 压缩的数据并行训练循环

一次 train_step 依次执行：

    1   all-gather 参数（按预取顺序记账），各副本前向/反向
    2   机器内 reduce-scatter 平均，累加误差缓冲
    3-7 按 (残差块, GPU) 分组压缩：P、分组 all-reduce、正交化、Q、分组 all-reduce
    8   未压缩参数：机器内平均 + 跨机器 32 位分组 all-reduce
    9-10 全局范数与有限性同步
    11  解压、裁剪、Adam 更新（或跳过）
    12  误差缓冲决策表
    13  未压缩参数更新
    之后逐残差块推进梯度缩放

混合精度下副本损失先除以副本数 M（全局批均值），梯度缩放初值为 M·2^13。
宽精度模式不做缩放与量化，单机单卡时与普通训练循环逐位一致。
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import torch

from shardsim.cluster import CollectiveLedger, PrefetchSchedule, SimCluster, Topology
from shardsim.config import config
from shardsim.errors import CalibrationError
from shardsim.gradscale import ResblockScaler, ScaleTrajectory, calibrate_divisor, new_scaler, on_step
from shardsim.harness.runconfig import RunConfig
from shardsim.harness.tasks import Task, create_task, replica_generator
from shardsim.lowp import FP32, M169, ExponentHistogram
from shardsim.optim import (AdamWState, HyperParams, PlateauHalver, Schedule, ScheduleKind, adamw_step,
                            clip_by_global_norm, cosine_value, ewia_update, global_norm, init_adamw, linear_value)
from shardsim.powersgd import (CompressionConfig, CompressionDiagnostics, LowRankState, accumulate_error,
                               decompress, grouped_compress, householder_orthogonalize, init_state, update_error)
from shardsim.tensor import Tensor, concat, matmul, split, squared_norm
from shardsim.toymodel.hooks import ScaleHooks
from shardsim.toymodel.transformer import ParamSpec, resblock_forward_backward
from shardsim.utils import format_log

logger = logging.getLogger(__name__)


@dataclass
class RunState:
    """
    一次模拟运行的全部状态

    params[machine][name] 为分片列表：可压缩参数每个 GPU 一片，未压缩参数整机一份。
    moments 与 params 同构；lowrank 只含可压缩参数。
    """
    run_config: RunConfig
    seed: int
    task: Task
    cluster: SimCluster
    specs: Dict[str, ParamSpec]
    hp: HyperParams
    compression: CompressionConfig
    params: List[Dict[str, List[Tensor]]]
    moments: List[Dict[str, List[AdamWState]]]
    lowrank: List[Dict[str, List[LowRankState]]]
    ewia: List[Dict[str, Tensor]]
    scalers: List[ResblockScaler]
    divisors: List[float]
    hooks: List[ScaleHooks]
    divisors_calibrated: bool = False
    factors_calibrated: bool = False
    step: int = 0
    updates: int = 0
    skipped: int = 0
    nonfinite_norm_steps: int = 0
    halver: Optional[PlateauHalver] = None
    history: List[Dict] = field(default_factory=list)
    trajectory: ScaleTrajectory = field(default_factory=ScaleTrajectory)
    diagnostics: CompressionDiagnostics = field(default_factory=CompressionDiagnostics)
    last_decompressed: Dict[str, List[torch.Tensor]] = field(default_factory=dict)

    @property
    def topology(self) -> Topology:
        return self.cluster.topology

    @property
    def mixed(self) -> bool:
        return self.run_config.precision.mode == "mixed"

    @property
    def compressed_names(self) -> List[str]:
        return [name for name, spec in self.specs.items() if spec.compressed]

    @property
    def uncompressed_names(self) -> List[str]:
        return [name for name, spec in self.specs.items() if not spec.compressed]

    def full_param(self, machine: int, name: str) -> torch.Tensor:
        """本机参数的完整值（本地拼接，不记账）"""
        spec = self.specs[name]
        shards = self.params[machine][name]
        if not spec.compressed:
            return shards[0].data
        return concat(shards, axis=spec.shard_axis).data

    def model_params(self, machine: int = 0) -> Dict[str, torch.Tensor]:
        return {name: self.full_param(machine, name) for name in self.specs}

    def ewia_params(self, machine: int = 0) -> Dict[str, torch.Tensor]:
        return {name: value.data for name, value in self.ewia[machine].items()}


# ---- 初始化 ----

def hyperparams_from(run_config: RunConfig) -> HyperParams:
    o = run_config.optimizer
    return HyperParams(o.beta1, o.beta2, o.eps, o.weight_decay, o.clip_threshold, o.variance_clamp,
                       o.ewia_decay, o.ewia_interval)


def compression_from(run_config: RunConfig) -> CompressionConfig:
    c, p = run_config.compression, run_config.precision
    return CompressionConfig(
        rank_r=run_config.gpu_rank,
        epsilon=c.epsilon,
        q_seed=c.q_seed,
        q_policy=c.q_policy,
        factor_format=p.fmt("buffer_format"),
        basis_format=FP32 if p.mode == "mixed" else None,
    )


def _grouped_names(specs: Dict[str, ParamSpec], compressed: bool) -> Dict[Optional[int], List[str]]:
    groups: Dict[Optional[int], List[str]] = {}
    for name, spec in specs.items():
        if spec.compressed == compressed:
            groups.setdefault(spec.resblock, []).append(name)
    return groups


def init_run(run_config: RunConfig, seed: Optional[int] = None,
             ledger: Optional[CollectiveLedger] = None) -> RunState:
    """按配置构建任务、集群与初始状态；所有机器的初始参数相同"""
    seed = run_config.resolved_seed(seed)
    task = create_task(run_config, seed)
    model = task.model
    topo = run_config.topology
    topology = Topology(topo.n_machines, topo.gpus_per_machine, seed)
    cluster = SimCluster(topology, ledger)
    precision = run_config.precision
    specs = {spec.name: spec for spec in model.parameter_specs()}
    compression = compression_from(run_config)
    param_fmt = precision.fmt("uncompressed_format")
    m = topology.gpus_per_machine

    initial = model.init_params(torch.Generator().manual_seed(seed))
    params, moments, lowrank, ewia = [], [], [], []
    for _ in range(topology.n_machines):
        machine_params, machine_moments, machine_lowrank = {}, {}, {}
        for name, spec in specs.items():
            full = Tensor(initial[name], param_fmt)
            if spec.compressed:
                shards = split(full, m, axis=spec.shard_axis)
                machine_moments[name] = [init_adamw(s.shape, precision.fmt("mean_format"),
                                                    precision.fmt("variance_format")) for s in shards]
                if run_config.compression.enabled:
                    machine_lowrank[name] = [
                        init_state(s.shape, compression, seed, shard_key=f"{name}#{g}")
                        for g, s in enumerate(shards)
                    ]
            else:
                shards = [full]
                moments_fmt = precision.fmt("uncompressed_format")
                machine_moments[name] = [init_adamw(full.shape, moments_fmt, moments_fmt)]
            machine_params[name] = shards
        params.append(machine_params)
        moments.append(machine_moments)
        lowrank.append(machine_lowrank)
        ewia.append({name: Tensor(initial[name]) for name in specs})

    M = topology.replicas
    mixed = precision.mode == "mixed"
    scalers = [new_scaler(M) for _ in range(model.resblocks)]
    hooks = [ScaleHooks(model.resblocks, enabled=mixed, branch_format=precision.fmt("branch_format"))
             for _ in range(M)]
    halver = None
    if run_config.optimizer.schedule == "halve_on_plateau":
        o = run_config.optimizer
        halver = PlateauHalver(o.lr, o.plateau_window, o.plateau_epsilon)

    state = RunState(
        run_config=run_config, seed=seed, task=task, cluster=cluster, specs=specs,
        hp=hyperparams_from(run_config), compression=compression, params=params, moments=moments,
        lowrank=lowrank, ewia=ewia, scalers=scalers, divisors=[1.0] * model.resblocks, hooks=hooks,
        divisors_calibrated=not mixed, factors_calibrated=not (mixed and run_config.compression.enabled),
        halver=halver,
    )
    logger.info(format_log("INFO", "run initialized", task=task.name, seed=seed, machines=topology.n_machines,
                           gpus=m, mode=precision.mode, compression=run_config.compression.enabled,
                           rank=run_config.compression.rank))
    return state


# ---- 步长 ----

def learning_rate(state: RunState, step: int) -> float:
    o = state.run_config.optimizer
    if o.schedule == "cosine":
        return cosine_value(Schedule(ScheduleKind.COSINE, o.lr, o.final_lr, state.run_config.task.steps), step - 1)
    if o.schedule == "linear_warmup":
        return linear_value(Schedule(ScheduleKind.LINEAR_WARMUP, 0.0, o.lr, o.warmup_steps), step)
    if o.schedule == "halve_on_plateau":
        return state.halver.value
    return o.lr


# ---- 第 1 步：前向/反向 ----

@dataclass
class ReplicaResult:
    loss: float
    grads: Dict[str, torch.Tensor]
    finite: List[bool]


def prefetch_schedule(state: RunState) -> PrefetchSchedule:
    blocks = [0] * state.task.model.resblocks
    for spec in state.specs.values():
        if spec.compressed and spec.resblock is not None:
            blocks[spec.resblock] += math.prod(spec.shape)
    return PrefetchSchedule.build(blocks)


def _gather_params(state: RunState, machine: int) -> Dict[str, torch.Tensor]:
    """按预取顺序 all-gather 可压缩参数，未压缩参数本机已有"""
    full = {}
    for name, spec in state.specs.items():
        shards = state.params[machine][name]
        if spec.compressed:
            k = spec.resblock
            overlap = f"compute:{k - 1}" if k else ""
            full[name] = state.cluster.all_gather(shards, axis=spec.shard_axis, tag="params",
                                                  resblock=k, overlap=overlap)[0].data
        else:
            full[name] = shards[0].data
    return full


def _forward_backward(state: RunState, step: int, scales: List[float], loss_divisor: float) -> List[ReplicaResult]:
    rc = state.run_config
    topology = state.topology
    m = topology.gpus_per_machine
    gathered = [_gather_params(state, i) for i in range(topology.n_machines)]
    faults = {}
    for fault in rc.faults:
        if fault.step == step:
            faults.setdefault(fault.replica, []).append(fault.resblock)

    def run(replica: int) -> ReplicaResult:
        machine = replica // m
        data_index = 0 if rc.task.identical_shards else replica
        batch = state.task.sample_batch(replica_generator(state.seed, step, data_index), rc.task.batch_size, step)
        loss, grads, finite = resblock_forward_backward(
            state.task.model, gathered[machine], batch, state.hooks[replica], scales,
            faults.get(replica, ()), loss_divisor)
        return ReplicaResult(loss, grads, finite)

    replicas = list(range(topology.replicas))
    threads = rc.threads or config.runtime.threads
    if threads > 1 and len(replicas) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, replicas))
    return [run(r) for r in replicas]


# ---- 校准 ----

def _calibrate_divisors(state: RunState, results: List[ReplicaResult]):
    """每个残差块一个 all-reduce 前除数：可压缩梯度（缩放域）的指数中位数移到 fp16 中点"""
    branch = state.run_config.precision.fmt("branch_format")
    divisors = list(state.divisors)
    for k in range(len(divisors)):
        names = [n for n, s in state.specs.items() if s.compressed and s.resblock == k]
        histograms = [ExponentHistogram.from_values(r.grads[n]) for r in results for n in names]
        try:
            divisors[k] = calibrate_divisor(histograms, branch).pre_allreduce_divisor
        except CalibrationError:
            logger.warning(format_log("WARNING", "divisor calibration deferred", resblock=k))
            return
    state.divisors = divisors
    state.divisors_calibrated = True


def _calibrate_factor_scales(state: RunState):
    """用一次不记账的宽精度试算，按 P、Q 元素的指数直方图选择 p_scale、q_scale"""
    cfg = state.compression
    n_machines = state.topology.n_machines
    p_histograms, q_histograms = [], []
    for name in state.compressed_names:
        for g in range(state.topology.gpus_per_machine):
            shards = [state.lowrank[i][name][g] for i in range(n_machines)]
            local_p = [matmul(s.error_buffer, s.Q).data for s in shards]
            mean_p = torch.stack(local_p).mean(dim=0)
            basis = householder_orthogonalize(Tensor(mean_p), cfg.epsilon)
            local_q = [matmul(s.error_buffer, basis, transpose_a=True).data for s in shards]
            p_histograms.extend(ExponentHistogram.from_values(p) for p in local_p)
            q_histograms.extend(ExponentHistogram.from_values(q) for q in local_q)
    try:
        p = calibrate_divisor(p_histograms, cfg.factor_format or M169)
        q = calibrate_divisor(q_histograms, cfg.factor_format or M169)
    except CalibrationError:
        logger.warning(format_log("WARNING", "factor scale calibration deferred", step=state.step))
        return
    state.compression = replace(cfg, p_scale=1.0 / p.pre_allreduce_divisor, q_scale=1.0 / q.pre_allreduce_divisor)
    state.factors_calibrated = True
    logger.info(format_log("INFO", "factor scales calibrated", p_scale=state.compression.p_scale,
                           q_scale=state.compression.q_scale))


# ---- 一步 ----

def train_step(state: RunState) -> RunState:
    """执行一次完整的训练步（原地更新并返回 state）"""
    rc = state.run_config
    precision = rc.precision
    topology = state.topology
    n_machines, m, M = topology.n_machines, topology.gpus_per_machine, topology.replicas
    mixed = state.mixed
    step = state.step + 1
    lr = learning_rate(state, step)
    cluster = state.cluster
    branch_fmt = precision.fmt("branch_format")
    buffer_fmt = precision.fmt("buffer_format")
    unc_fmt = precision.fmt("uncompressed_format")
    compressing = rc.compression.enabled

    # 1
    scales = [s.scale for s in state.scalers] if mixed else [1.0] * len(state.scalers)
    loss_divisor = float(M) if mixed else 1.0
    results = _forward_backward(state, step, scales, loss_divisor)
    block_finite = [all(r.finite[k] for r in results) for k in range(len(state.scalers))]
    if mixed and not state.divisors_calibrated:
        _calibrate_divisors(state, results)

    def grad_scale(spec: ParamSpec, divided: bool = True) -> float:
        """缩放域梯度 / grad_scale = 全局批均值损失的梯度；divided 表示梯度已除过 all-reduce 前除数"""
        if not mixed:
            return 1.0
        if spec.resblock is None:
            return 1.0 / M
        scale = scales[spec.resblock] / M
        return scale / state.divisors[spec.resblock] if divided else scale

    any_nonfinite = not all(block_finite)

    # 2
    reduced: List[Dict[str, List[Tensor]]] = []
    step2_finite: List[Dict[str, List[bool]]] = []
    for i in range(n_machines):
        machine_reduced, machine_finite = {}, {}
        for name in state.compressed_names:
            spec = state.specs[name]
            divisor = state.divisors[spec.resblock] if (mixed and spec.resblock is not None) else 1.0
            local = [Tensor(results[i * m + g].grads[name] / divisor, branch_fmt) for g in range(m)]
            shards = cluster.reduce_scatter_avg(local, axis=spec.shard_axis, fmt=branch_fmt, tag="G",
                                                resblock=spec.resblock, overlap="backward")
            machine_reduced[name] = shards
            finite_flags = []
            for g, shard in enumerate(shards):
                ok = shard.is_finite()
                any_nonfinite = any_nonfinite or not ok
                if compressing:
                    updated = accumulate_error(state.lowrank[i][name][g], shard, grad_scale(spec), ok, buffer_fmt)
                    state.lowrank[i][name][g] = updated
                    finite_flags.append(updated.error_buffer.is_finite())
            machine_finite[name] = finite_flags
        reduced.append(machine_reduced)
        step2_finite.append(machine_finite)

    # 3-7
    compressed_groups = _grouped_names(state.specs, compressed=True)
    decompressed: Dict[str, List[Tensor]] = {}
    pq_finite: Dict[str, List[bool]] = {}
    q_norms_sq: List[float] = []
    if compressing:
        if not state.factors_calibrated:
            _calibrate_factor_scales(state)
        cfg = state.compression
        for resblock, names in compressed_groups.items():
            for g in range(m):
                grouped = grouped_compress([[state.lowrank[i][n][g] for n in names] for i in range(n_machines)],
                                           cfg, cluster, run_seed=state.seed, step=step, resblock=resblock)
                for index, name in enumerate(names):
                    ok = grouped.pq_finite[index]
                    any_nonfinite = any_nonfinite or not ok
                    q_norms_sq.append(squared_norm(grouped.Q[index]) / cfg.q_scale ** 2)
                    d = decompress(grouped.P[index], grouped.Q[index], cfg.q_scale,
                                   state.lowrank[0][name][g].transposed)
                    decompressed.setdefault(name, []).append(d)
                    pq_finite.setdefault(name, []).append(ok)
                    # 新的 Q 是下一步的乘法矩阵；误差缓冲在第 12 步更新
                    for i in range(n_machines):
                        state.lowrank[i][name][g] = grouped.states[i][index]
    else:
        for resblock, names in compressed_groups.items():
            for g in range(m):
                payload = [[Tensor(reduced[i][n][g].data / grad_scale(state.specs[n]), unc_fmt) for n in names]
                           for i in range(n_machines)]
                result = cluster.grouped_all_reduce(payload, unc_fmt, tag="G", resblock=resblock, overlap="backward")
                for index, name in enumerate(names):
                    any_nonfinite = any_nonfinite or not result.finite[index]
                    value = result.buffers[0][index]
                    q_norms_sq.append(squared_norm(value))
                    decompressed.setdefault(name, []).append(value)

    # 8
    uncompressed_names = state.uncompressed_names
    intra = []
    for i in range(n_machines):
        machine = []
        for name in uncompressed_names:
            spec = state.specs[name]
            local = [Tensor(results[i * m + g].grads[name] / grad_scale(spec, divided=False), unc_fmt)
                     for g in range(m)]
            machine.append(cluster.all_reduce_mean(local, unc_fmt, group="intra", tag="uncompressed",
                                                   resblock=spec.resblock, overlap="backward")[0])
        intra.append(machine)
    uncompressed: Dict[str, Tensor] = {}
    if uncompressed_names:
        result = cluster.grouped_all_reduce(intra, unc_fmt, tag="uncompressed", overlap="backward")
        any_nonfinite = any_nonfinite or not all(result.finite)
        uncompressed = dict(zip(uncompressed_names, result.buffers[0]))

    # 9-10
    norm = global_norm(q_norms_sq, [squared_norm(uncompressed[n]) for n in uncompressed_names], any_nonfinite)
    apply_update = math.isfinite(norm)

    # 11 + 13
    if apply_update:
        order = [(name, g) for name in state.compressed_names for g in range(m)]
        grads = [decompressed[name][g] for name, g in order] + [uncompressed[n] for n in uncompressed_names]
        clipped = clip_by_global_norm(grads, norm, state.hp.clip_threshold)
        for i in range(n_machines):
            for (name, g), grad in zip(order, clipped):
                param, moments = adamw_step(state.params[i][name][g], grad, state.moments[i][name][g], state.hp, lr)
                state.params[i][name][g] = param
                state.moments[i][name][g] = moments
            for name, grad in zip(uncompressed_names, clipped[len(order):]):
                param, moments = adamw_step(state.params[i][name][0], grad, state.moments[i][name][0], state.hp, lr)
                state.params[i][name][0] = param
                state.moments[i][name][0] = moments
        state.updates += 1
        for i in range(n_machines):
            names = list(state.specs)
            averaged = ewia_update([state.ewia[i][n] for n in names],
                                   [Tensor(state.full_param(i, n)) for n in names],
                                   state.hp.ewia_decay, state.updates, state.hp.ewia_interval)
            state.ewia[i] = dict(zip(names, averaged))
    else:
        state.skipped += 1
        state.nonfinite_norm_steps += 1
        logger.warning(format_log("WARNING", "update skipped", step=step, reason="nonfinite global norm"))

    # 12
    if compressing:
        for name in state.compressed_names:
            for g in range(m):
                for i in range(n_machines):
                    before = state.lowrank[i][name][g]
                    after = update_error(before, decompressed[name][g], pq_finite[name][g],
                                         step2_finite[i][name][g], buffer_fmt)
                    if i == 0:
                        state.diagnostics.record(step, before, decompressed[name][g], after.error_buffer,
                                                 pq_finite[name][g])
                    state.lowrank[i][name][g] = after
    state.last_decompressed = {name: [d.data for d in decompressed[name]] for name in state.compressed_names}

    # 缩放推进
    if mixed:
        for k, scaler in enumerate(state.scalers):
            _, state.scalers[k] = on_step(scaler, block_finite[k], step)
        state.trajectory.record(step, state.scalers, block_finite)

    loss = sum(r.loss for r in results) / len(results)
    if state.halver is not None and math.isfinite(loss):
        state.halver.observe(loss)
    state.history.append({
        "step": step,
        "loss": loss,
        "lr": lr,
        "global_norm": norm,
        "applied": apply_update,
        "nonfinite_resblocks": block_finite.count(False),
    })
    state.step = step
    return state


def run_training(state: RunState, steps: Optional[int] = None) -> RunState:
    """运行 steps 步（默认配置中的 task.steps），结束时评估一次"""
    total = steps if steps is not None else state.run_config.task.steps
    for _ in range(total):
        train_step(state)
        if state.step % 100 == 0:
            last = state.history[-1]
            logger.info(format_log("INFO", "training progress", step=state.step, loss=last["loss"],
                                   skipped=state.skipped))
    return state


def evaluate(state: RunState, averaged: bool = False) -> float:
    """机器 0 上的留出集指标；averaged 时使用 EWIA 参数"""
    params = state.ewia_params(0) if averaged else state.model_params(0)
    return state.task.evaluate(params, state.step)


def machines_agree(state: RunState) -> bool:
    """所有机器的参数逐位相同"""
    reference = state.model_params(0)
    for i in range(1, state.topology.n_machines):
        other = state.model_params(i)
        if any(not torch.equal(reference[n], other[n]) for n in reference):
            return False
    return True


def run_summary(state: RunState) -> Dict:
    schedule = prefetch_schedule(state)
    final = state.history[-1] if state.history else {}
    return {
        "name": state.run_config.name,
        "task": state.task.name,
        "seed": state.seed,
        "steps": state.step,
        "updates": state.updates,
        "skipped_updates": state.skipped,
        "nonfinite_norm_steps": state.nonfinite_norm_steps,
        "final_loss": final.get("loss"),
        "final_eval": evaluate(state),
        "final_eval_ewia": evaluate(state, averaged=True),
        "precision": state.run_config.precision.mode,
        "compression": state.run_config.compression.enabled,
        "rank": state.run_config.compression.rank,
        "p_scale": state.compression.p_scale,
        "q_scale": state.compression.q_scale,
        "divisors": list(state.divisors),
        "backoffs": [list(s.backoff_steps) for s in state.scalers],
        "prefetch_legal": schedule.is_legal(),
        "peak_live_elements": schedule.peak_live_elements(),
        "ledger_bytes": state.cluster.ledger.total_bytes(),
        "machines_agree": machines_agree(state),
    }


def train_run(run_config: RunConfig, seed: Optional[int] = None, steps: Optional[int] = None
              ) -> Tuple[RunState, Dict]:
    state = run_training(init_run(run_config, seed), steps)
    return state, run_summary(state)
