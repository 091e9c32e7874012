"""The joint multimodal transformer: pre-norm self-attention blocks over the
assembled sequence, final-state extraction, mask/phrase pooling, and
attention-map export."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import JointSequence
from .knowledge import BinaryMask


class TransformerBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, dtype: torch.dtype):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d, dtype=dtype)
        self.qkv = nn.Linear(d, 3 * d, dtype=dtype)
        self.out = nn.Linear(d, d, dtype=dtype)
        self.ln_ffn = nn.LayerNorm(d, dtype=dtype)
        self.ffn_in = nn.Linear(d, d_ff, dtype=dtype)
        self.ffn_out = nn.Linear(d_ff, d, dtype=dtype)
        self.n_heads = n_heads
        self.head_dim = d // n_heads

    def attention(
        self, x: torch.Tensor, valid: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, S, d); valid: (B, S) bool or None. Returns (out, attn)."""
        b, s, d = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)  # each (B, S, nh, hd)
        q = q.transpose(1, 2)  # (B, nh, S, hd)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(ctx), attn

    def forward(self, x, valid, retain_attn: bool):
        attn_out, attn = self.attention(self.ln_attn(x), valid)
        x = x + attn_out
        x = x + self.ffn_out(F.gelu(self.ffn_in(self.ln_ffn(x))))
        return x, (attn if retain_attn else None)


class FusionTransformer(nn.Module):
    """Multi-layer pre-norm transformer with a final layer norm. Positions and
    segments come in already added to the input sequence."""

    def __init__(self, n_layers: int = 3, n_heads: int = 4, d: int = 64,
                 d_ff: int = 256, dtype: torch.dtype = torch.float64):
        super().__init__()
        if d % n_heads != 0:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.blocks = nn.ModuleList(
            TransformerBlock(d, n_heads, d_ff, dtype) for _ in range(n_layers)
        )
        self.ln_final = nn.LayerNorm(d, dtype=dtype)
        self.d = d
        self.n_heads = n_heads

    def forward(
        self,
        x: torch.Tensor,
        valid: torch.Tensor | None = None,
        retain_attn: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor] | None]:
        """x: (B, S, d) -> (B, S, d), plus per-layer attention maps if retained."""
        attns: list[torch.Tensor] = []
        for i, block in enumerate(self.blocks):
            x, attn = block(x, valid, retain_attn)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after layer {i}")
            if retain_attn:
                attns.append(attn)
        x = self.ln_final(x)
        return x, (attns if retain_attn else None)


@dataclass
class FinalStates:
    """Final-layer states split back into the four spans of the joint
    sequence, plus optional per-layer attention maps."""

    h_v: torch.Tensor  # (L, d)
    h_sep: torch.Tensor  # (d,)
    h_w: torch.Tensor  # (T, d)
    h_cls: torch.Tensor  # (d,)
    grid_shape: tuple[int, int]
    attentions: list[torch.Tensor] | None = None  # per layer (n_heads, S, S)

    @property
    def visual_len(self) -> int:
        return self.h_v.shape[0]

    @property
    def word_len(self) -> int:
        return self.h_w.shape[0]


def transformer_forward(
    seq: JointSequence,
    fusion: FusionTransformer,
    retain_attn: bool = False,
    grid_shape: tuple[int, int] | None = None,
) -> FinalStates:
    """Run one assembled sequence through the fusion transformer."""
    if len(seq) < 3:
        raise ValueError("joint sequence must have length >= 3")
    out, attns = fusion(seq.tokens.unsqueeze(0), None, retain_attn)
    out = out[0]
    l_vis = seq.visual_len
    w0, w1 = seq.word_span
    if grid_shape is None:
        side = int(math.isqrt(l_vis))
        grid_shape = (side, l_vis // side) if side * side == l_vis else (1, l_vis)
    return FinalStates(
        h_v=out[:l_vis],
        h_sep=out[seq.sep_index],
        h_w=out[w0:w1],
        h_cls=out[seq.cls_index],
        grid_shape=grid_shape,
        attentions=[a[0] for a in attns] if attns is not None else None,
    )


def pool_region(h_v: torch.Tensor, mask) -> torch.Tensor:
    """Mean of H_V rows under an active binary mask. mask: BinaryMask or
    (L,)-shaped array/tensor of {0,1}."""
    flat = mask.flat if isinstance(mask, BinaryMask) else mask
    m = torch.as_tensor(
        np.asarray(flat), dtype=h_v.dtype, device=h_v.device
    ).reshape(-1)
    if m.shape[0] != h_v.shape[0]:
        raise ValueError(f"mask length {m.shape[0]} != visual length {h_v.shape[0]}")
    total = m.sum()
    if total.item() == 0:
        raise ValueError("mask has no active cells")
    return (m @ h_v) / total


def pool_phrase(h_w: torch.Tensor, span: tuple[int, int]) -> torch.Tensor:
    """Mean of word states over the half-open token span [start, end)."""
    start, end = span
    if not (0 <= start < end <= h_w.shape[0]):
        raise ValueError(f"invalid span {span} for {h_w.shape[0]} word tokens")
    return h_w[start:end].mean(dim=0)


def attention_map(
    states: FinalStates,
    word_index: int,
    layer: int = -1,
    head: int | None = None,
) -> np.ndarray:
    """Word-to-image attention: the chosen word token's attention row
    restricted to the visual span, reshaped to the grid and min-max rescaled
    to [0, 1]. head=None averages over heads."""
    if states.attentions is None:
        raise ValueError("attention maps were not retained; pass retain_attn=True")
    if not (0 <= word_index < states.word_len):
        raise ValueError(f"word_index {word_index} out of range")
    attn = states.attentions[layer]  # (n_heads, S, S)
    row_index = states.visual_len + 1 + word_index
    if head is None:
        row = attn[:, row_index, : states.visual_len].mean(dim=0)
    else:
        row = attn[head, row_index, : states.visual_len]
    h, w = states.grid_shape
    grid = row.detach().cpu().numpy().reshape(h, w)
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        return (grid - lo) / (hi - lo)
    return np.zeros_like(grid)


def save_attention_csv(grid: np.ndarray, path: str) -> None:
    np.savetxt(path, grid, delimiter=",")


def save_attention_pgm(grid: np.ndarray, path: str) -> None:
    """Grayscale PGM (P2) for quick visual inspection."""
    levels = np.clip(np.round(grid * 255), 0, 255).astype(int)
    h, w = levels.shape
    with open(path, "w", encoding="ascii") as f:
        f.write(f"P2\n{w} {h}\n255\n")
        for row in levels:
            f.write(" ".join(str(v) for v in row) + "\n")
