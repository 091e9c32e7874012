"""Composition of backbone, text embedding, sequence assembly, fusion
transformer, task heads, and the learned visual mask vector into one
trainable module, plus batched encoding over prepared pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import (
    SequenceAssembler,
    TextEmbedding,
    VisualBackbone,
    sine_position_2d,
)
from .fusion import FinalStates, FusionTransformer
from .pretext import PretextHeads, PreparedPair

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def resolve_dtype(name: str) -> torch.dtype:
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}; use one of {sorted(_DTYPES)}")
    return _DTYPES[name]


@dataclass
class BatchStates:
    """Final-layer states for a padded batch; rows of h_w past each pair's
    length are padding and must not be read."""

    h_v: torch.Tensor  # (B, L, d)
    h_sep: torch.Tensor  # (B, d)
    h_w: torch.Tensor  # (B, Tmax, d)
    h_cls: torch.Tensor  # (B, d)
    lengths: list[int]
    grid_shape: tuple[int, int]
    backbone_feats: torch.Tensor  # (B, L, d) pre-transformer visual content
    attentions: list[torch.Tensor] | None = None  # per layer (B, nh, S, S)

    def pair_states(self, i: int) -> FinalStates:
        t_len = self.lengths[i]
        return FinalStates(
            h_v=self.h_v[i],
            h_sep=self.h_sep[i],
            h_w=self.h_w[i, :t_len],
            h_cls=self.h_cls[i],
            grid_shape=self.grid_shape,
            attentions=(
                [a[i] for a in self.attentions] if self.attentions is not None else None
            ),
        )


class PretrainModel(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        k_cat: int,
        d_o: int,
        d: int = 64,
        n_layers: int = 3,
        n_heads: int = 4,
        d_ff: int = 256,
        conv_channels=(16, 32, 64),
        in_channels: int = 3,
        max_text_len: int = 64,
        d_w: int | None = None,
        use_segment_embeddings: bool = True,
        dtype: torch.dtype = torch.float64,
        visual_feature_gain: float = 8.0,
    ):
        super().__init__()
        self.backbone = VisualBackbone(in_channels, tuple(conv_channels), d, dtype,
                                       visual_feature_gain)
        self.text = TextEmbedding(vocab_size, d, max_text_len, d_w, dtype)
        self.assembler = SequenceAssembler(d, use_segment_embeddings, dtype)
        self.fusion = FusionTransformer(n_layers, n_heads, d, d_ff, dtype)
        self.heads = PretextHeads(d, k_cat, d_o, vocab_size, dtype)
        self.visual_mask_token = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.d = d
        self.dtype_ = dtype

    def fuse_features(
        self,
        feats: torch.Tensor,  # (B, L, d)
        grid_shape: tuple[int, int],
        ids_list: list[torch.Tensor],
        retain_attn: bool = False,
    ) -> BatchStates:
        lengths = [int(ids.numel()) for ids in ids_list]
        t_max = max(lengths)
        b = feats.shape[0]
        ids_padded = torch.zeros(b, t_max, dtype=torch.long)
        for i, ids in enumerate(ids_list):
            ids_padded[i, : lengths[i]] = ids
        txt_content = self.text.to_d(self.text.word(ids_padded))
        txt_pos = self.text.position(torch.arange(t_max))
        vis_pos = sine_position_2d(grid_shape, self.d).to(feats.dtype)
        tokens, valid = self.assembler.assemble_batch(
            feats, vis_pos, txt_content, txt_pos, lengths
        )
        out, attns = self.fusion(tokens, valid, retain_attn)
        l_vis = feats.shape[1]
        return BatchStates(
            h_v=out[:, :l_vis],
            h_sep=out[:, l_vis],
            h_w=out[:, l_vis + 1 : l_vis + 1 + t_max],
            h_cls=out[:, -1],
            lengths=lengths,
            grid_shape=grid_shape,
            backbone_feats=feats,
            attentions=attns,
        )

    def backbone_features(
        self, batch: list[PreparedPair]
    ) -> tuple[torch.Tensor, tuple[int, int]]:
        pixels = torch.stack([p.pixels for p in batch])
        return self.backbone(pixels)

    def encode_prepared(
        self,
        batch: list[PreparedPair],
        ids_override: list[torch.Tensor] | None = None,
        visual_mask: torch.Tensor | None = None,  # (B, L) bool, True = replace
        retain_attn: bool = False,
        precomputed_feats: torch.Tensor | None = None,
    ) -> BatchStates:
        if precomputed_feats is not None:
            feats = precomputed_feats
            grid_shape = batch[0].grid_shape
        else:
            feats, grid_shape = self.backbone_features(batch)
        if visual_mask is not None:
            feats = torch.where(
                visual_mask.unsqueeze(-1), self.visual_mask_token, feats
            )
        ids_list = (
            ids_override if ids_override is not None else [p.token_ids for p in batch]
        )
        return self.fuse_features(feats, grid_shape, ids_list, retain_attn)


def init_parameters(
    model: PretrainModel, seed: int, std: float = 0.08,
    std_attn: float | None = None,
) -> None:
    """Deterministic initialization: He-normal conv weights, N(0, std)
    embeddings/linears and special-token vectors, unit layer norms.

    std_attn (default std) applies to the attention in-projections alone.
    Training from scratch needs attention to be content-dependent early:
    near-zero projections leave it uniform, every token's output an additive
    image+text summary, and interaction-only objectives (matching) sit on a
    flat plateau. A larger attention init breaks that symmetry from step 0."""
    gen = torch.Generator().manual_seed(seed)
    if std_attn is None:
        std_attn = std
    content_vectors = (
        "sep_content",
        "cls_content",
        "sep_position",
        "cls_position",
        "visual_mask_token",
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() == 4:  # conv kernels
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif p.dim() >= 2 and ".qkv." in name:
                p.normal_(0.0, std_attn, generator=gen)
            elif p.dim() >= 2:
                p.normal_(0.0, std, generator=gen)
            elif any(name.endswith(k) for k in content_vectors):
                p.normal_(0.0, std, generator=gen)
            elif name.endswith("weight"):  # layer norms
                p.fill_(1.0)
            else:  # biases
                p.zero_()
