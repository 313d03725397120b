"""
小型 transformer 与残差栈的前向/反向

参数以 {name: tensor} 字典传入，便于训练框架按分片管理。每个 transformer 层是一个残差块，
层内注意力与 MLP 两条分支共用该块的梯度缩放。
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from shardsim.errors import ConfigurationError, ShapeMismatchError
from shardsim.toymodel.embedding import EmbeddingScheme, embed_sequence, embedding_shapes
from shardsim.toymodel.hooks import ScaleHooks
from shardsim.toymodel.losses import softmax_cross_entropy, weighted_ce
from shardsim.toymodel.masks import (LayerKind, SequenceLayout, build_column_mask, build_mask,
                                     layer_mask_kind, transpose_permutation)

COMPRESSED_MATRICES = ("wq", "wk", "wv", "wpost", "mlp1", "mlp2")


@dataclass(frozen=True)
class ParamSpec:
    """一个参数：形状、是否压缩、所属残差块（None 表示在所有分支之外）、分片轴"""
    name: str
    shape: Tuple[int, ...]
    compressed: bool
    resblock: Optional[int] = None
    shard_axis: int = 1
    init_std: float = 0.1


@dataclass(frozen=True)
class ToyModelConfig:
    text_len: int = 6
    grid_h: int = 4
    grid_w: int = 4
    d_model: int = 32
    n_layers: int = 8
    n_heads: int = 2
    text_vocab: int = 32
    image_vocab: int = 64
    conv_kernel: int = 3
    transpose_column: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.n_layers < 1:
            raise ConfigurationError("need at least one layer")

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(self.text_len, self.grid_h, self.grid_w)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab(self) -> int:
        return self.text_vocab + self.image_vocab


def rms_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x / torch.sqrt((x * x).mean(dim=-1, keepdim=True) + eps)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, allowed: torch.Tensor,
                     n_heads: int) -> torch.Tensor:
    """单次带掩码的 softmax 注意力，覆盖文本/图像的全部交互"""
    batch, n, d = q.shape
    hd = d // n_heads

    def heads(t):
        return t.reshape(batch, n, n_heads, hd).transpose(1, 2)

    scores = heads(q) @ heads(k).transpose(-1, -2) / math.sqrt(hd)
    scores = scores.masked_fill(~allowed, float("-inf"))
    out = torch.softmax(scores, dim=-1) @ heads(v)
    return out.transpose(1, 2).reshape(batch, n, d)


class ToyTransformer:
    """文本 + 图像 token 的自回归 transformer"""

    def __init__(self, config: ToyModelConfig):
        self.config = config
        self.resblocks = config.n_layers
        layout = config.layout
        self.kinds = [layer_mask_kind(i + 1, config.n_layers) for i in range(config.n_layers)]
        self.masks = [build_mask(kind, layout, config.conv_kernel).allowed for kind in self.kinds]
        self.column_transposed = build_column_mask(layout, transposed=True).allowed
        self.permutation = transpose_permutation(layout)
        self.inverse_permutation = torch.argsort(self.permutation)

    def parameter_specs(self) -> List[ParamSpec]:
        cfg = self.config
        d = cfg.d_model
        specs = [
            ParamSpec(f"embed.{name}", shape, compressed=False)
            for name, shape in embedding_shapes(cfg.layout, cfg.text_vocab, cfg.image_vocab, d).items()
        ]
        for layer in range(cfg.n_layers):
            prefix = f"layer{layer}."
            for name in ("wq", "wk", "wv", "wpost"):
                specs.append(ParamSpec(prefix + name, (d, d), True, layer, 1, 1 / math.sqrt(d)))
            specs.append(ParamSpec(prefix + "mlp1", (d, 4 * d), True, layer, 1, 1 / math.sqrt(d)))
            specs.append(ParamSpec(prefix + "b1", (4 * d,), False, layer, 0, 0.0))
            specs.append(ParamSpec(prefix + "mlp2", (4 * d, d), True, layer, 0, 0.5 / math.sqrt(4 * d * cfg.n_layers)))
            specs.append(ParamSpec(prefix + "b2", (d,), False, layer, 0, 0.0))
        specs.append(ParamSpec("head", (d, cfg.vocab), False, None, 1, 1 / math.sqrt(d)))
        return specs

    def init_params(self, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        return {
            spec.name: torch.randn(spec.shape, generator=generator, dtype=torch.float64) * spec.init_std
            for spec in self.parameter_specs()
        }

    def _attention(self, x: torch.Tensor, params: Dict[str, torch.Tensor], layer: int,
                   hooks: ScaleHooks) -> torch.Tensor:
        p = f"layer{layer}."
        a = hooks.cast(rms_norm(hooks.exit(x, layer)))
        q, k, v = (hooks.cast(a @ params[p + name]) for name in ("wq", "wk", "wv"))
        if self.kinds[layer] == LayerKind.COLUMN and self.config.transpose_column:
            # 转置图像状态后使用转置顺序下的列掩码
            perm, inverse = self.permutation, self.inverse_permutation
            out = masked_attention(q[:, perm], k[:, perm], v[:, perm], self.column_transposed,
                                   self.config.n_heads)[:, inverse]
        else:
            out = masked_attention(q, k, v, self.masks[layer], self.config.n_heads)
        return hooks.entry(hooks.cast(hooks.cast(out) @ params[p + "wpost"]), layer)

    def _mlp(self, x: torch.Tensor, params: Dict[str, torch.Tensor], layer: int,
             hooks: ScaleHooks) -> torch.Tensor:
        p = f"layer{layer}."
        a = hooks.cast(rms_norm(hooks.exit(x, layer)))
        h = hooks.cast(torch.nn.functional.gelu(a @ params[p + "mlp1"] + params[p + "b1"]))
        return hooks.entry(hooks.cast(h @ params[p + "mlp2"] + params[p + "b2"]), layer)

    def logits(self, params: Dict[str, torch.Tensor], batch: "SequenceBatch", hooks: ScaleHooks) -> torch.Tensor:
        scheme = EmbeddingScheme.from_dict(params)
        x = torch.stack([embed_sequence(t, i, scheme) for t, i in zip(batch.text, batch.image)])
        for layer in range(self.config.n_layers):
            x = x + self._attention(x, params, layer, hooks)
            x = x + self._mlp(x, params, layer, hooks)
        return rms_norm(x) @ params["head"]

    def loss(self, params: Dict[str, torch.Tensor], batch: "SequenceBatch", hooks: ScaleHooks) -> torch.Tensor:
        """下一个 token 预测：文本交叉熵 ×1/8 + 图像交叉熵 ×7/8，各自按 token 数归一化"""
        cfg = self.config
        logits = self.logits(params, batch, hooks)
        t = cfg.text_len
        text_logits, text_targets, image_logits, image_targets = [], [], [], []
        for row, (text, image) in enumerate(zip(batch.text, batch.image)):
            # 位置 p 预测位置 p+1 的 token；填充位置不参与
            for p in range(len(text) - 1):
                text_logits.append(logits[row, p])
                text_targets.append(text[p + 1])
            for cell, token in enumerate(image):
                image_logits.append(logits[row, t + cell - 1])
                image_targets.append(cfg.text_vocab + token)
        text_ce = _stacked_ce(text_logits, text_targets, logits)
        image_ce = _stacked_ce(image_logits, image_targets, logits)
        return weighted_ce(text_ce, image_ce)


def _stacked_ce(rows: List[torch.Tensor], targets: List[int], like: torch.Tensor) -> torch.Tensor:
    if not rows:
        return like.sum() * 0
    return softmax_cross_entropy(torch.stack(rows), torch.tensor(targets, dtype=torch.long))


@dataclass
class SequenceBatch:
    text: List[List[int]]
    image: List[List[int]]

    def __len__(self) -> int:
        return len(self.text)


# ---- 用于检验反向传播的残差 MLP 栈 ----

class ResidualMLPStack:
    """x ← x + W2·gelu(W1·x)，每层一个残差块；损失为 ½‖x_out − y‖² 的批均值"""

    def __init__(self, width: int, hidden: int, blocks: int, activation: bool = True):
        self.width, self.hidden, self.resblocks = width, hidden, blocks
        self.activation = activation

    def parameter_specs(self) -> List[ParamSpec]:
        specs = []
        for k in range(self.resblocks):
            specs.append(ParamSpec(f"block{k}.w1", (self.width, self.hidden), True, k, 1, 1 / math.sqrt(self.width)))
            specs.append(ParamSpec(f"block{k}.w2", (self.hidden, self.width), True, k, 0, 1 / math.sqrt(self.hidden)))
        return specs

    def init_params(self, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        return {
            spec.name: torch.randn(spec.shape, generator=generator, dtype=torch.float64) * spec.init_std
            for spec in self.parameter_specs()
        }

    def forward(self, params: Dict[str, torch.Tensor], x: torch.Tensor, hooks: ScaleHooks) -> torch.Tensor:
        for k in range(self.resblocks):
            h = hooks.cast(hooks.exit(x, k) @ params[f"block{k}.w1"])
            if self.activation:
                h = torch.nn.functional.gelu(h)
            x = x + hooks.entry(hooks.cast(h @ params[f"block{k}.w2"]), k)
        return x

    def loss(self, params: Dict[str, torch.Tensor], batch: Tuple[torch.Tensor, torch.Tensor],
             hooks: ScaleHooks) -> torch.Tensor:
        x, y = batch
        residual = self.forward(params, x, hooks) - y
        return 0.5 * (residual * residual).sum() / x.shape[0]


def resblock_forward_backward(model, params: Dict[str, torch.Tensor], batch, hooks: ScaleHooks,
                              scales: Optional[Sequence[float]] = None, inject: Sequence[int] = (),
                              loss_divisor: float = 1.0) -> Tuple[float, Dict[str, torch.Tensor], List[bool]]:
    """
    一次前向 + 反向

    Returns:
        (loss, 缩放域内的逐参数梯度, 逐残差块有限性)；
        反向传播的是 loss / loss_divisor，返回的 loss 不除。
        有限性同时考虑离开分支的梯度和该块参数的梯度。
    """
    scales = list(scales) if scales is not None else [1.0] * model.resblocks
    if len(scales) != model.resblocks:
        raise ShapeMismatchError(f"{len(scales)} scales for {model.resblocks} resblocks")
    leaves = {name: value.detach().clone().requires_grad_(True) for name, value in params.items()}
    hooks.begin(scales, inject)
    loss = model.loss(leaves, batch, hooks)
    names = list(leaves)
    raw = torch.autograd.grad(loss / loss_divisor, [leaves[n] for n in names], allow_unused=True)
    grads = {
        name: (g if g is not None else torch.zeros_like(leaves[name])).detach()
        for name, g in zip(names, raw)
    }
    finite = hooks.finite
    specs = {spec.name: spec for spec in model.parameter_specs()}
    for name, grad in grads.items():
        block = specs[name].resblock
        if block is not None and not bool(torch.isfinite(grad).all()):
            finite[block] = False
    return float(loss.detach()), grads, finite
