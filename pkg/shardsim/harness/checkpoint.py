"""
检查点存储
只保存误差缓冲的跨机器之和；恢复时每台机器得到 sum / N 的广播
"""

import logging
import pickle
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import torch

from shardsim.config import config
from shardsim.errors import CheckpointError, ConfigurationError
from shardsim.gradscale import ResblockScaler
from shardsim.harness.runconfig import RunConfig
from shardsim.harness.train import RunState, init_run
from shardsim.optim import AdamWState
from shardsim.powersgd import fold_error_buffers, unfold_error_buffer
from shardsim.tensor import Tensor
from shardsim.utils import format_log

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointStorage:
    """检查点存储后端基类"""

    def save(self, name: str, payload: Dict):
        """保存一个检查点"""
        raise NotImplementedError

    def load(self, name: str) -> Dict:
        """读取一个检查点"""
        raise NotImplementedError

    def exists(self, name: str) -> bool:
        raise NotImplementedError

    def list(self) -> List[str]:
        """列出已保存的检查点名"""
        raise NotImplementedError


class TorchFileStorage(CheckpointStorage):
    """每个检查点一个 torch.save 文件"""

    def __init__(self, root: Optional[str] = None):
        self.root = Path(root or config.runtime.checkpoint_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        return self.root / f"{name}.pt"

    def save(self, name: str, payload: Dict):
        path = self._path(name)
        try:
            torch.save(payload, path)
        except OSError as e:
            raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
        logger.info(format_log("INFO", "checkpoint saved", path=path, step=payload.get("step")))

    def load(self, name: str) -> Dict:
        path = self._path(name)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
            raise CheckpointError(f"checkpoint {path} is corrupt: {e}") from e
        if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint {path} has an unknown layout")
        return payload

    def exists(self, name: str) -> bool:
        return self._path(name).exists()

    def list(self) -> List[str]:
        return sorted(p.stem for p in self.root.glob("*.pt"))


def create_storage(**kwargs) -> CheckpointStorage:
    """创建文件存储后端"""
    return TorchFileStorage(**kwargs)


# ---- 状态 <-> 负载 ----

def checkpoint_payload(state: RunState) -> Dict:
    """机器 0 的参数/动量/EWIA（各机器相同）+ 误差缓冲之和 + 缩放状态"""
    topology = state.topology
    n_machines = topology.n_machines
    sums, factors_p, factors_q = {}, {}, {}
    compressed = state.compressed_names if state.lowrank[0] else []
    for name in compressed:
        sums[name] = [
            fold_error_buffers([state.lowrank[i][name][g].error_buffer for i in range(n_machines)]).data
            for g in range(topology.gpus_per_machine)
        ]
        factors_p[name] = [s.P.data for s in state.lowrank[0][name]]
        factors_q[name] = [s.Q.data for s in state.lowrank[0][name]]
    halver = None
    if state.halver is not None:
        halver = {"value": state.halver.value, "halvings": state.halver.halvings,
                  "losses": list(state.halver.losses)}
    return {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "updates": state.updates,
        "skipped": state.skipped,
        "nonfinite_norm_steps": state.nonfinite_norm_steps,
        "seed": state.seed,
        "topology": {"n_machines": n_machines, "gpus_per_machine": topology.gpus_per_machine},
        "params": {name: [t.data for t in shards] for name, shards in state.params[0].items()},
        "moments": {
            name: [{"mean": s.mean.data, "variance": s.variance.data, "step": s.step} for s in states]
            for name, states in state.moments[0].items()
        },
        "ewia": {name: t.data for name, t in state.ewia[0].items()},
        "error_buffer_sums": sums,
        "P": factors_p,
        "Q": factors_q,
        "scalers": [s.to_dict() for s in state.scalers],
        "divisors": list(state.divisors),
        "divisors_calibrated": state.divisors_calibrated,
        "p_scale": state.compression.p_scale,
        "q_scale": state.compression.q_scale,
        "factors_calibrated": state.factors_calibrated,
        "halver": halver,
    }


def save_checkpoint(state: RunState, storage: CheckpointStorage, name: str = "latest") -> Dict:
    payload = checkpoint_payload(state)
    storage.save(name, payload)
    return payload


def restore_state(payload: Dict, run_config: RunConfig) -> RunState:
    """按当前配置重建运行状态并装入检查点；拓扑不一致时报错"""
    saved = payload["topology"]
    topo = run_config.topology
    if (saved["n_machines"], saved["gpus_per_machine"]) != (topo.n_machines, topo.gpus_per_machine):
        raise ConfigurationError(
            f"checkpoint topology {saved['n_machines']}x{saved['gpus_per_machine']} does not match "
            f"run topology {topo.n_machines}x{topo.gpus_per_machine}")

    state = init_run(run_config, payload["seed"])
    n_machines = topo.n_machines
    for i in range(n_machines):
        for name, shards in payload["params"].items():
            current = state.params[i][name]
            state.params[i][name] = [Tensor(data, old.format_tag) for data, old in zip(shards, current)]
        for name, states in payload["moments"].items():
            current = state.moments[i][name]
            state.moments[i][name] = [
                AdamWState(Tensor(s["mean"], old.mean_format), Tensor(s["variance"], old.variance_format), s["step"])
                for s, old in zip(states, current)
            ]
        state.ewia[i] = {name: Tensor(data) for name, data in payload["ewia"].items()}

    buffer_fmt = run_config.precision.fmt("buffer_format")
    for name, sums in payload["error_buffer_sums"].items():
        spec = state.specs[name]
        for g, total in enumerate(sums):
            value = unfold_error_buffer(Tensor(total), n_machines, buffer_fmt)
            copies = state.cluster.broadcast(value, 0, tag="error-buffer", resblock=spec.resblock)
            for i in range(n_machines):
                old = state.lowrank[i][name][g]
                state.lowrank[i][name][g] = replace(
                    old,
                    error_buffer=copies[i],
                    P=Tensor(payload["P"][name][g], old.P.format_tag),
                    Q=Tensor(payload["Q"][name][g], old.Q.format_tag),
                )

    state.scalers = [ResblockScaler.from_dict(s) for s in payload["scalers"]]
    state.divisors = list(payload["divisors"])
    state.divisors_calibrated = payload["divisors_calibrated"]
    state.compression = replace(state.compression, p_scale=payload["p_scale"], q_scale=payload["q_scale"])
    state.factors_calibrated = payload["factors_calibrated"]
    if payload["halver"] is not None and state.halver is not None:
        state.halver.value = payload["halver"]["value"]
        state.halver.halvings = payload["halver"]["halvings"]
        state.halver.load_losses(payload["halver"]["losses"])
    state.step = payload["step"]
    state.updates = payload["updates"]
    state.skipped = payload["skipped"]
    state.nonfinite_norm_steps = payload["nonfinite_norm_steps"]
    logger.info(format_log("INFO", "checkpoint restored", step=state.step, machines=n_machines))
    return state


def resume_checkpoint(storage: CheckpointStorage, run_config: RunConfig, name: str = "latest") -> RunState:
    return restore_state(storage.load(name), run_config)
