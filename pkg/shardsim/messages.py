"""
统一消息文本定义
命令行输出的所有文本
"""

DESCRIPTION = """🧮 shardsim

Simulated sharded data-parallel training with low-precision gradient
compression, per-resblock gradient scaling and toy transformer / dVAE tasks."""

EPILOG = """📖 Examples:
  shardsim train --config configs/linear_regression.json --out out/train
  shardsim compression-table --check
  shardsim bandwidth-report --out out/bandwidth --check

💡 Without --config the schema defaults are used."""

# 子命令说明
SUBCOMMAND_HELP = {
    "train": "Run the sharded training loop and write its reports",
    "compression-table": "Compression rate per (d_model, rank, gpus_per_machine) triple",
    "qpolicy-ab": "Compare fixed, warm-start and resampled Q over several seeds",
    "underflow-demo": "fp16 underflow under global vs per-resblock gradient scaling",
    "rank-gap": "Final loss gap between compressed and uncompressed runs per rank",
    "dvae-anneal": "Relaxed vs true ELB gap of a toy dVAE across temperatures",
    "resume-check": "Save, resume and compare decompressed gradients with an uninterrupted run",
    "mask-dump": "Write the attention masks as ASCII grids and PGM images",
    "format-inspect": "Describe the numeric formats and census their encodings",
    "bandwidth-report": "Measured vs analytic bandwidth of one resblock exchange",
}

# Status Messages
MSG_DONE = "✅ Done"
MSG_CHECKS_FAILED = "❌ Some checks failed"
MSG_UNKNOWN_COMMAND = "❌ Unknown command"


# Format Templates
def format_start(command: str, out: str, seed) -> str:
    return f"🚀 {command} | out={out} | seed={seed}"


def format_check(name: str, passed: bool, detail: str = "") -> str:
    mark = "✅" if passed else "❌"
    return f"{mark} {name}" + (f" ({detail})" if detail else "")


def format_files(count: int, out: str) -> str:
    return f"📝 {count} file(s) written to {out}"


def format_error(error: str) -> str:
    return f"❌ {error}"
