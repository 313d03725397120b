"""
文本 + 图像序列上的稀疏注意力掩码

行 = query，列 = key。所有掩码共享：文本之间标准因果；图像 token 可见全部文本；
图像 token 总能看到自己。图像位置按光栅顺序排在文本之后。
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Tuple

import torch

from shardsim.errors import ConfigurationError


@dataclass(frozen=True)
class SequenceLayout:
    text_len: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if min(self.text_len, self.grid_h, self.grid_w) < 1:
            raise ConfigurationError(f"layout dimensions must be >= 1, got {self}")

    @property
    def image_len(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def total_len(self) -> int:
        return self.text_len + self.image_len

    def image_position(self, r: int, c: int) -> int:
        """(r, c) 在整条序列中的下标"""
        return self.text_len + r * self.grid_w + c

    def transposed(self) -> "SequenceLayout":
        return SequenceLayout(self.text_len, self.grid_w, self.grid_h)


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    layout: SequenceLayout
    allowed: torch.Tensor  # bool, total_len × total_len

    def is_causal(self) -> bool:
        return not bool(torch.triu(self.allowed, diagonal=1).any())

    def image_sees_all_text(self) -> bool:
        t = self.layout.text_len
        return bool(self.allowed[t:, :t].all())

    def image_keys(self, r: int, c: int) -> List[Tuple[int, int]]:
        """(r, c) 可见的图像 key，按光栅顺序"""
        row = self.allowed[self.layout.image_position(r, c)]
        w = self.layout.grid_w
        return [divmod(j, w) for j in range(self.layout.image_len) if bool(row[self.layout.text_len + j])]

    def subset_of(self, other: "MaskMatrix") -> bool:
        return not bool((self.allowed & ~other.allowed).any())


class LayerKind(str, Enum):
    ROW = "row"
    COLUMN = "column"
    CONV = "conv"


def layer_mask_kind(i: int, L: int) -> LayerKind:
    """第 i 层（从 1 开始）的掩码：最后一层卷积，(i−2) mod 4 == 0 为列，其余为行"""
    if not 1 <= i <= L:
        raise ConfigurationError(f"layer index {i} outside 1..{L}")
    if i == L:
        return LayerKind.CONV
    if (i - 2) % 4 == 0:
        return LayerKind.COLUMN
    return LayerKind.ROW


def mask_schedule_counts(L: int) -> Dict[str, int]:
    counts = {kind.value: 0 for kind in LayerKind}
    for i in range(1, L + 1):
        counts[layer_mask_kind(i, L).value] += 1
    return counts


def _base_mask(layout: SequenceLayout) -> torch.Tensor:
    """文本因果 + 图像看全部文本 + 图像看自己"""
    n, t = layout.total_len, layout.text_len
    allowed = torch.zeros(n, n, dtype=torch.bool)
    allowed[:t, :t] = torch.tril(torch.ones(t, t, dtype=torch.bool))
    allowed[t:, :t] = True
    index = torch.arange(t, n)
    allowed[index, index] = True
    return allowed


def build_row_mask(layout: SequenceLayout) -> MaskMatrix:
    """图像 token j 可见 j−(w+1)..j−1 的图像 token（光栅顺序，跨行回绕）"""
    allowed = _base_mask(layout)
    t, extent = layout.text_len, layout.grid_w + 1
    for j in range(layout.image_len):
        for key in range(max(0, j - extent), j):
            allowed[t + j, t + key] = True
    return MaskMatrix(layout, allowed)


def build_column_mask(layout: SequenceLayout, transposed: bool = False) -> MaskMatrix:
    """
    图像 (r, c) 可见同列的 (r', c)，r' < r

    transposed 时返回在转置后的图像顺序下的同一掩码（等于用转置置换共轭），
    此时布局的行列也互换。
    """
    allowed = _base_mask(layout)
    for r in range(layout.grid_h):
        for c in range(layout.grid_w):
            query = layout.image_position(r, c)
            for earlier in range(r):
                allowed[query, layout.image_position(earlier, c)] = True
    mask = MaskMatrix(layout, allowed)
    if not transposed:
        return mask
    perm = transpose_permutation(layout)
    return MaskMatrix(layout.transposed(), allowed[perm][:, perm])


def build_conv_mask(layout: SequenceLayout, kernel: int) -> MaskMatrix:
    """
    因果卷积窗口：行 r−(k−1)..r，每行取以 c 为中心、宽 k 的光栅窗口（跨行回绕），
    只保留光栅位置不超过 query 的 key

    k = 1 时只剩自己。
    """
    w = layout.grid_w
    if kernel < 1 or kernel % 2 == 0 or kernel > 2 * w - 1:
        raise ConfigurationError(f"kernel must be odd and <= {2 * w - 1}, got {kernel}")
    allowed = _base_mask(layout)
    t, half = layout.text_len, (kernel - 1) // 2
    for r in range(layout.grid_h):
        for c in range(w):
            j = r * w + c
            for row in range(max(0, r - (kernel - 1)), r + 1):
                for delta in range(-half, half + 1):
                    key = row * w + c + delta
                    if 0 <= key <= j:
                        allowed[t + j, t + key] = True
    return MaskMatrix(layout, allowed)


def build_mask(kind: LayerKind, layout: SequenceLayout, kernel: int = 3) -> MaskMatrix:
    kind = LayerKind(kind)
    if kind == LayerKind.ROW:
        return build_row_mask(layout)
    if kind == LayerKind.COLUMN:
        return build_column_mask(layout)
    return build_conv_mask(layout, kernel)


def transpose_permutation(layout: SequenceLayout) -> torch.Tensor:
    """
    perm[p] = 原序列中落到转置顺序第 p 位的下标

    文本位置不动；图像 (r, c) 在转置网格中位于 c·h + r。
    """
    t, h, w = layout.text_len, layout.grid_h, layout.grid_w
    perm = list(range(t))
    for c in range(w):
        for r in range(h):
            perm.append(t + r * w + c)
    return torch.tensor(perm, dtype=torch.long)


def head_consistency(n_heads: int, head_dim: int, d_model: int) -> bool:
    return n_heads * head_dim == d_model
