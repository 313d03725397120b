"""
确定性的模拟集群

machines × GPUs 拓扑上的 all-gather / reduce-scatter / all-reduce / broadcast。
每个集合通信都是同步屏障，归约顺序固定，结果与线程调度无关；
每次调用都记入字节账本（只计逻辑负载：元素数 × 位宽）。
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import pandas as pd
import torch

from shardsim.errors import CollectiveError, ConfigurationError, ShapeMismatchError
from shardsim.lowp import FloatFormatSpec, quantize_tensor
from shardsim.tensor import Tensor, concat, split
from shardsim.utils import format_log

logger = logging.getLogger(__name__)

WIDE_BITS = 64  # 宽精度（未量化）负载按 float64 计


@dataclass(frozen=True)
class Topology:
    """机器数 × 每机 GPU 数"""
    n_machines: int
    gpus_per_machine: int
    run_seed: int = 0

    def __post_init__(self):
        if self.n_machines < 1 or self.gpus_per_machine < 1:
            raise ConfigurationError(f"topology needs >= 1 machine and GPU, got {self.n_machines}x{self.gpus_per_machine}")

    @property
    def replicas(self) -> int:
        return self.n_machines * self.gpus_per_machine


@dataclass(frozen=True)
class LedgerEntry:
    """账本条目"""
    op_kind: str
    group: str  # intra | inter
    element_count: int
    bits_per_element: int
    tag: str = ""
    resblock: Optional[int] = None
    overlap: str = ""

    @property
    def logical_bytes(self) -> int:
        return self.element_count * self.bits_per_element // 8

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["logical_bytes"] = self.logical_bytes
        return data


@dataclass
class CollectiveLedger:
    """集合通信字节账本"""
    entries: List[LedgerEntry] = field(default_factory=list)

    def record(self, entry: LedgerEntry):
        if (entry.element_count * entry.bits_per_element) % 8 != 0:
            raise CollectiveError(f"payload of {entry.element_count}x{entry.bits_per_element} bits is not whole bytes")
        self.entries.append(entry)

    def select(self, group: Optional[str] = None, tags: Optional[Sequence[str]] = None) -> List[LedgerEntry]:
        return [
            e for e in self.entries
            if (group is None or e.group == group) and (tags is None or e.tag in tags)
        ]

    def total_bytes(self, group: Optional[str] = None, tags: Optional[Sequence[str]] = None) -> int:
        return sum(e.logical_bytes for e in self.select(group, tags))

    def total_elements(self, group: Optional[str] = None, tags: Optional[Sequence[str]] = None) -> int:
        return sum(e.element_count for e in self.select(group, tags))

    def clear(self):
        self.entries.clear()

    def to_frame(self) -> pd.DataFrame:
        columns = ["op_kind", "group", "tag", "resblock", "element_count", "bits_per_element",
                   "logical_bytes", "overlap"]
        return pd.DataFrame([e.to_dict() for e in self.entries], columns=columns)

    def summary_by_resblock(self) -> pd.DataFrame:
        """每个残差块、每个分组与标签的字节合计"""
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=["resblock", "group", "tag", "entries", "element_count", "logical_bytes"])
        frame["resblock"] = frame["resblock"].fillna(-1).astype(int)
        summary = (
            frame.groupby(["resblock", "group", "tag"], sort=True)
            .agg(entries=("op_kind", "size"), element_count=("element_count", "sum"),
                 logical_bytes=("logical_bytes", "sum"))
            .reset_index()
        )
        return summary


@dataclass
class GroupedResult:
    """分组 all-reduce 的结果：每台机器的缓冲列表 + 截断前的逐缓冲有限性"""
    buffers: List[List[Tensor]]
    finite: List[bool]


def _bits(fmt: Optional[FloatFormatSpec]) -> int:
    return fmt.total_bits if fmt is not None else WIDE_BITS


def _tree_sum(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    """按参与者序号两两配对的树形求和"""
    level = list(tensors)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]


class SimCluster:
    """模拟集群：集合通信 + 账本"""

    def __init__(self, topology: Topology, ledger: Optional[CollectiveLedger] = None):
        self.topology = topology
        self.ledger = ledger if ledger is not None else CollectiveLedger()

    # ---- 机器内 ----

    def all_gather(self, shards: Sequence[Tensor], axis: int = 0, *, tag: str = "params",
                   resblock: Optional[int] = None, overlap: str = "") -> List[Tensor]:
        """机器内 all-gather：每个 GPU 得到所有分片的拼接"""
        self._check_participants(shards, self.topology.gpus_per_machine, "GPU")
        self._check_same_shape(shards)
        full = concat(list(shards), axis=axis, fmt=shards[0].format_tag)
        self.ledger.record(LedgerEntry("all_gather", "intra", shards[0].numel, _bits(shards[0].format_tag),
                                       tag, resblock, overlap))
        return [full for _ in shards]

    def reduce_scatter_avg(self, full_grads: Sequence[Tensor], axis: int = 0,
                           fmt: Optional[FloatFormatSpec] = None, *, tag: str = "G",
                           resblock: Optional[int] = None, overlap: str = "") -> List[Tensor]:
        """
        机器内 reduce-scatter：GPU k 得到逐元素平均的第 k 片

        按 GPU 序号升序累加后除以 GPU 数，结果按 fmt 存储。
        """
        self._check_participants(full_grads, self.topology.gpus_per_machine, "GPU")
        self._check_same_shape(full_grads)
        total = full_grads[0].data.clone()
        for grad in full_grads[1:]:
            total = total + grad.data
        mean = Tensor(total / len(full_grads), fmt)
        self.ledger.record(LedgerEntry("reduce_scatter", "intra", full_grads[0].numel, _bits(fmt),
                                       tag, resblock, overlap))
        return split(mean, len(full_grads), axis=axis)

    # ---- 跨机器（或机器内）all-reduce ----

    def _reduce_values(self, values: Sequence[Tensor], fmt: Optional[FloatFormatSpec],
                       clamp_infinities: bool):
        mean = _tree_sum([v.data for v in values]) / len(values)
        result = quantize_tensor(mean, fmt)
        finite = bool(torch.isfinite(result).all())
        if clamp_infinities and fmt is not None:
            limit = fmt.max_finite
            result = torch.where(torch.isposinf(result), torch.full_like(result, limit), result)
            result = torch.where(torch.isneginf(result), torch.full_like(result, -limit), result)
        return Tensor(result, fmt), finite

    def all_reduce_mean(self, values: Sequence[Tensor], fmt: Optional[FloatFormatSpec] = None,
                        clamp_infinities: bool = False, *, group: str = "inter", tag: str = "G",
                        resblock: Optional[int] = None, overlap: str = "") -> List[Tensor]:
        """
        逐元素平均，按 fmt 量化；clamp_infinities 时 ±Inf 截断为 ±max_finite(fmt)

        group="inter" 时每台机器一个参与者，"intra" 时每个 GPU 一个。
        """
        expected = self.topology.n_machines if group == "inter" else self.topology.gpus_per_machine
        self._check_participants(values, expected, "machine" if group == "inter" else "GPU")
        self._check_same_shape(values)
        reduced, finite = self._reduce_values(values, fmt, clamp_infinities)
        if not finite:
            logger.warning(format_log("WARNING", "nonfinite all-reduce result", tag=tag, resblock=resblock,
                                      clamped=clamp_infinities))
        self.ledger.record(LedgerEntry("all_reduce", group, values[0].numel, _bits(fmt), tag, resblock, overlap))
        return [reduced for _ in values]

    def grouped_all_reduce(self, buffers: Sequence[Sequence[Tensor]], fmt: Optional[FloatFormatSpec] = None,
                           clamp_infinities: bool = False, *, tag: str = "G", resblock: Optional[int] = None,
                           overlap: str = "") -> GroupedResult:
        """
        分组 all-reduce：buffers[machine][k]，语义与逐缓冲 all_reduce_mean 相同，只记一条账

        空组不记账。
        """
        n_machines = self.topology.n_machines
        self._check_participants(buffers, n_machines, "machine")
        count = len(buffers[0])
        if any(len(group) != count for group in buffers):
            raise CollectiveError("every machine must contribute the same number of buffers")
        if count == 0:
            return GroupedResult([[] for _ in range(n_machines)], [])

        reduced, finite = [], []
        for k in range(count):
            column = [buffers[i][k] for i in range(n_machines)]
            self._check_same_shape(column)
            value, ok = self._reduce_values(column, fmt, clamp_infinities)
            reduced.append(value)
            finite.append(ok)
        if not all(finite):
            logger.warning(format_log("WARNING", "nonfinite grouped all-reduce", tag=tag, resblock=resblock,
                                      nonfinite=finite.count(False)))
        elements = sum(b.numel for b in buffers[0])
        self.ledger.record(LedgerEntry("grouped_all_reduce", "inter", elements, _bits(fmt), tag, resblock, overlap))
        return GroupedResult([list(reduced) for _ in range(n_machines)], finite)

    def broadcast(self, value: Tensor, from_machine: int, *, tag: str = "error-buffer",
                  resblock: Optional[int] = None) -> List[Tensor]:
        """把 from_machine 的值复制到所有机器"""
        if not 0 <= from_machine < self.topology.n_machines:
            raise CollectiveError(f"machine index {from_machine} outside 0..{self.topology.n_machines - 1}")
        self.ledger.record(LedgerEntry("broadcast", "inter", value.numel, _bits(value.format_tag), tag, resblock))
        return [value for _ in range(self.topology.n_machines)]

    # ---- 校验 ----

    @staticmethod
    def _check_participants(items: Sequence, expected: int, kind: str):
        if len(items) != expected:
            raise CollectiveError(f"expected {expected} {kind} participants, got {len(items)}")

    @staticmethod
    def _check_same_shape(items: Sequence[Tensor]):
        shapes = {t.shape for t in items}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"collective operands differ in shape: {sorted(shapes)}")


# ---- 预取调度（重叠与显存节流的注解） ----

@dataclass
class PrefetchSchedule:
    """
    前向传播的参数预取顺序：计算第 k 块时预取第 k+1 块，第 k-1 块随后释放

    同一时刻最多两块完整参数在显存中。
    """
    block_elements: List[int]
    events: List[Dict] = field(default_factory=list)

    @classmethod
    def build(cls, block_elements: Sequence[int]) -> "PrefetchSchedule":
        schedule = cls(list(block_elements))
        if not block_elements:
            return schedule
        schedule.events.append({"op": "gather", "resblock": 0, "overlap": ""})
        for k in range(len(block_elements)):
            if k + 1 < len(block_elements):
                schedule.events.append({"op": "gather", "resblock": k + 1, "overlap": f"compute:{k}"})
            schedule.events.append({"op": "compute", "resblock": k, "overlap": ""})
            schedule.events.append({"op": "free", "resblock": k, "overlap": ""})
        return schedule

    def is_legal(self) -> bool:
        """每块先 gather 再 compute 再 free，且同时存活的块不超过两个"""
        live, gathered, computed = set(), set(), set()
        for event in self.events:
            k = event["resblock"]
            if event["op"] == "gather":
                if k in gathered:
                    return False
                gathered.add(k)
                live.add(k)
                if len(live) > 2:
                    return False
            elif event["op"] == "compute":
                if k not in live:
                    return False
                computed.add(k)
            elif event["op"] == "free":
                if k not in computed:
                    return False
                live.discard(k)
        return computed == set(range(len(self.block_elements)))

    def peak_live_elements(self) -> int:
        live, peak = {}, 0
        for event in self.events:
            k = event["resblock"]
            if event["op"] == "gather":
                live[k] = self.block_elements[k]
                peak = max(peak, sum(live.values()))
            elif event["op"] == "free":
                live.pop(k, None)
        return peak
