"""
Utilities
Log formatting and report writers (CSV, JSON, PGM).
"""

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image

from shardsim.config import config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def format_log(level: str, message: str, **kwargs) -> str:
    """
    Format log message with context.

    Args:
        level: Log level (INFO, ERROR, WARNING, DEBUG)
        message: Main message
        **kwargs: Additional context to include

    Returns:
        Formatted log message
    """
    if kwargs:
        context = " | ".join(f"{k}={v}" for k, v in kwargs.items())
        return f"[{level}] {message} | {context}"
    return f"[{level}] {message}"


def ensure_dir(path: PathLike) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_csv(rows: Union[pd.DataFrame, Sequence[Mapping[str, Any]]], path: PathLike,
              columns: Sequence[str] = None) -> Path:
    """
    Write rows (list of dicts or a DataFrame) as CSV.

    Column order follows `columns` when given, else first-row order.
    """
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    target = Path(path)
    ensure_dir(target.parent)
    frame.to_csv(target, index=False, float_format=config.report.float_format, lineterminator="\n")
    logger.debug(format_log("DEBUG", "wrote csv", path=target, rows=len(frame)))
    return target


def _jsonable(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float):
        if value != value:
            return "nan"
        if value in (float("inf"), float("-inf")):
            return "inf" if value > 0 else "-inf"
        return value
    if hasattr(value, "item") and callable(value.item):
        return _jsonable(value.item())
    return value


def write_json(data: Any, path: PathLike) -> Path:
    """Write a JSON document with sorted keys (byte-stable across runs)."""
    target = Path(path)
    ensure_dir(target.parent)
    text = json.dumps(_jsonable(data), indent=config.report.json_indent, sort_keys=True, ensure_ascii=False)
    target.write_text(text + "\n", encoding="utf-8")
    logger.debug(format_log("DEBUG", "wrote json", path=target))
    return target


def write_pgm(matrix: Iterable[Iterable[bool]], path: PathLike, cell: int = 1) -> Path:
    """
    Write a boolean matrix as a portable graymap (allowed = white).

    Args:
        matrix: 2-D boolean matrix (nested lists, numpy or torch)
        cell: Pixel size of one matrix entry
    """
    pixels = np.asarray(matrix, dtype=bool).astype(np.uint8) * 255
    if cell > 1:
        pixels = np.kron(pixels, np.ones((cell, cell), dtype=np.uint8))
    target = Path(path)
    ensure_dir(target.parent)
    Image.fromarray(pixels).save(target)
    return target


def ascii_grid(matrix: Iterable[Iterable[bool]], on: str = "#", off: str = ".") -> str:
    """Render a boolean matrix one row per line."""
    return "\n".join("".join(on if v else off for v in row) for row in np.asarray(matrix, dtype=bool))
