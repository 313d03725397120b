"""
train / mask-dump / format-inspect / bandwidth-report 四个工具命令的实现
"""

import logging
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional

from shardsim.harness.experiments import ExperimentResult
from shardsim.harness.runconfig import RunConfig
from shardsim.harness.train import RunState, prefetch_schedule, train_run
from shardsim.lowp import FORMATS, representable_census
from shardsim.shardplan import exact_compression_rate, exact_measured_rate, plan_resblock, simulate_exchange
from shardsim.toymodel.masks import LayerKind, SequenceLayout, build_column_mask, build_mask, mask_schedule_counts
from shardsim.utils import ascii_grid, ensure_dir, format_log, write_csv, write_json, write_pgm

logger = logging.getLogger(__name__)

MASK_CELL = 8


def write_train_reports(state: RunState, summary: Dict, out: Path) -> List[Path]:
    """损失曲线、缩放轨迹、压缩诊断、按残差块汇总的账本与运行摘要"""
    out = ensure_dir(out)
    files = [write_csv(state.history, out / "loss_history.csv",
                       columns=["step", "loss", "lr", "global_norm", "applied", "nonfinite_resblocks"])]
    files.append(write_csv(state.trajectory.rows, out / "scale_trajectory.csv",
                           columns=["step", "resblock_index", "log2_scale", "event"]))
    files.append(write_csv(state.diagnostics.rows, out / "compression_diagnostics.csv",
                           columns=["step", "shard", "buffer_norm", "reconstruction_error",
                                    "buffer_norm_after", "pq_finite"]))
    files.append(write_csv(state.cluster.ledger.summary_by_resblock(), out / "ledger_summary.csv"))
    files.append(write_csv(prefetch_schedule(state).events, out / "prefetch_schedule.csv",
                           columns=["op", "resblock", "overlap"]))
    files.append(write_json(summary, out / "summary.json"))
    return files


def train_tool(run_config: RunConfig, out: Path, seed: Optional[int] = None) -> ExperimentResult:
    state, summary = train_run(run_config, seed)
    result = ExperimentResult("train", summary=summary)
    result.files.extend(write_train_reports(state, summary, out))
    result.check("skip accounting", summary["skipped_updates"] == summary["nonfinite_norm_steps"],
                 f"{summary['skipped_updates']} skipped, {summary['nonfinite_norm_steps']} nonfinite")
    result.check("prefetch order is legal", summary["prefetch_legal"])
    if run_config.task.identical_shards:
        result.check("machines hold identical parameters", summary["machines_agree"])
    return result


def mask_dump_tool(run_config: RunConfig, out: Path, seed: Optional[int] = None) -> ExperimentResult:
    """行、列、卷积三种掩码（以及转置列掩码）的 ASCII 与 PGM 图"""
    out = ensure_dir(out)
    m = run_config.model
    layout = SequenceLayout(m.text_len, m.grid_h, m.grid_w)
    masks = {kind.value: build_mask(kind, layout, run_config.experiment.mask_kernel) for kind in LayerKind}
    masks["column_transposed"] = build_column_mask(layout, transposed=True)
    result = ExperimentResult("mask-dump")
    for name, mask in masks.items():
        grid = mask.allowed.tolist()
        text_path = out / f"mask_{name}.txt"
        text_path.write_text(ascii_grid(grid) + "\n", encoding="utf-8")
        result.files.extend([text_path, write_pgm(grid, out / f"mask_{name}.pgm", cell=MASK_CELL)])
        result.check(f"{name} mask is causal", mask.is_causal())
        result.check(f"{name} mask lets images see all text", mask.image_sees_all_text())
    counts = mask_schedule_counts(m.n_layers)
    result.summary = {"layout": {"text_len": m.text_len, "grid_h": m.grid_h, "grid_w": m.grid_w},
                      "kernel": run_config.experiment.mask_kernel, "layer_kinds": counts}
    result.files.append(write_json(result.summary, out / "masks.json"))
    return result


def format_inspect_tool(run_config: RunConfig, out: Path, seed: Optional[int] = None) -> ExperimentResult:
    """每种数值格式的参数与可表示值统计"""
    out = ensure_dir(out)
    result = ExperimentResult("format-inspect")
    rows = []
    for fmt in FORMATS.values():
        rows.append(representable_census(fmt))
    result.files.append(write_csv(rows, out / "formats.csv"))
    result.files.append(write_json({r["name"]: r for r in rows}, out / "formats.json"))
    result.summary = {"formats": [r["name"] for r in rows]}
    return result


def bandwidth_report_tool(run_config: RunConfig, out: Path, seed: Optional[int] = None) -> ExperimentResult:
    """模拟一个残差块的两种交换，比较账本实测压缩率与解析值 r(m+2)/(2dm)"""
    out = ensure_dir(out)
    d, r, m = run_config.experiment.bandwidth
    seed = run_config.resolved_seed(seed)
    cluster = simulate_exchange(d, r, m, n_machines=max(2, run_config.topology.n_machines), seed=seed)
    ledger = cluster.ledger
    measured = exact_measured_rate(ledger, plan_resblock(d, m))
    analytic = exact_compression_rate(d, r, m)
    result = ExperimentResult("bandwidth-report")
    result.files.append(write_json([e.to_dict() for e in ledger.entries], out / "ledger.json"))
    result.files.append(write_csv(ledger.summary_by_resblock(), out / "ledger_summary.csv"))
    result.summary = {
        "d_model": d, "rank": r, "gpus_per_machine": m,
        "measured_rate": float(measured), "analytic_rate": float(analytic),
        "measured_fraction": str(measured), "analytic_fraction": str(analytic),
        "measured_traffic_ratio": str(1 - measured),
        "analytic_traffic_ratio": str(Fraction(r * (m + 2), 2 * d * m)),
    }
    result.files.append(write_json(result.summary, out / "bandwidth.json"))
    result.check("measured rate equals analytic rate", measured == analytic, f"{measured} vs {analytic}")
    logger.info(format_log("INFO", "bandwidth report", measured=float(measured), analytic=float(analytic)))
    return result
