"""
文本 / 图像 token 的嵌入方案

文本位置 p：有 token 时为 token 嵌入 + 位置嵌入，否则为第 p 个位置专属的填充嵌入。
图像位置 (r, c)：词表嵌入 + 行嵌入[r] + 列嵌入[c]。
尚未给出的图像位置为零向量。
"""

from dataclasses import dataclass, fields
from typing import Dict, Sequence, Tuple

import torch

from shardsim.errors import ConfigurationError
from shardsim.toymodel.masks import SequenceLayout


@dataclass(frozen=True, eq=False)
class EmbeddingScheme:
    text_token: torch.Tensor   # text_vocab × d
    text_position: torch.Tensor  # text_len × d
    padding: torch.Tensor      # text_len × d，每个文本位置一个
    image_token: torch.Tensor  # image_vocab × d
    row: torch.Tensor          # grid_h × d
    column: torch.Tensor       # grid_w × d

    @property
    def text_vocab(self) -> int:
        return self.text_token.shape[0]

    @property
    def image_vocab(self) -> int:
        return self.image_token.shape[0]

    @property
    def d_model(self) -> int:
        return self.text_token.shape[1]

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(self.padding.shape[0], self.row.shape[0], self.column.shape[0])

    def as_dict(self, prefix: str = "embed.") -> Dict[str, torch.Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, params: Dict[str, torch.Tensor], prefix: str = "embed.") -> "EmbeddingScheme":
        return cls(**{f.name: params[prefix + f.name] for f in fields(cls)})


def embedding_shapes(layout: SequenceLayout, text_vocab: int, image_vocab: int,
                     d_model: int) -> Dict[str, Tuple[int, int]]:
    return {
        "text_token": (text_vocab, d_model),
        "text_position": (layout.text_len, d_model),
        "padding": (layout.text_len, d_model),
        "image_token": (image_vocab, d_model),
        "row": (layout.grid_h, d_model),
        "column": (layout.grid_w, d_model),
    }


def init_scheme(layout: SequenceLayout, text_vocab: int, image_vocab: int, d_model: int,
                generator: torch.Generator, std: float = 0.1) -> EmbeddingScheme:
    tables = {
        name: torch.randn(shape, generator=generator, dtype=torch.float64) * std
        for name, shape in embedding_shapes(layout, text_vocab, image_vocab, d_model).items()
    }
    return EmbeddingScheme(**tables)


def embed_sequence(text_tokens: Sequence[int], image_tokens: Sequence[int],
                   scheme: EmbeddingScheme) -> torch.Tensor:
    """total_len × d_model 的输入矩阵"""
    layout = scheme.layout
    if len(text_tokens) > layout.text_len:
        raise ConfigurationError(f"{len(text_tokens)} text tokens exceed text_len {layout.text_len}")
    if len(image_tokens) > layout.image_len:
        raise ConfigurationError(f"{len(image_tokens)} image tokens exceed the {layout.image_len}-cell grid")
    for token in text_tokens:
        if not 0 <= token < scheme.text_vocab:
            raise ConfigurationError(f"text token {token} outside vocab of {scheme.text_vocab}")
    for token in image_tokens:
        if not 0 <= token < scheme.image_vocab:
            raise ConfigurationError(f"image token {token} outside vocab of {scheme.image_vocab}")

    n_text = len(text_tokens)
    text_ids = torch.tensor(list(text_tokens), dtype=torch.long)
    text = torch.cat([
        scheme.text_token[text_ids] + scheme.text_position[:n_text],
        scheme.padding[n_text:],
    ])

    n_image = len(image_tokens)
    cells = torch.arange(n_image)
    image_ids = torch.tensor(list(image_tokens), dtype=torch.long)
    image = (scheme.image_token[image_ids]
             + scheme.row[cells // layout.grid_w]
             + scheme.column[cells % layout.grid_w])
    missing = torch.zeros(layout.image_len - n_image, scheme.d_model, dtype=image.dtype)
    return torch.cat([text, image, missing])
