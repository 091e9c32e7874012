"""Visual and linguistic embedding: tokenizer + vocabulary, the convolutional
grid backbone, 2-D sine positions, and joint sequence assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn

PAD, UNK, MASK, SEP, CLS = "[pad]", "[unk]", "[mask]", "[sep]", "[cls]"
SPECIAL_TOKENS = (PAD, UNK, MASK, SEP, CLS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

TOTAL_STRIDE = 16  # 3 conv stages of stride 2, then 2x2 max-pool


def split_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; punctuation marks are
    their own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Dense token -> id table with the five special tokens at ids 0..4."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + [
            t for t in tokens if t not in SPECIAL_TOKENS
        ]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def mask_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def cls_id(self) -> int:
        return 4

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (0, 1, 2, 3, 4)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.id_to_token):
                f.write(f"{tok} {i}\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        entries = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                tok, ident = line.rsplit(" ", 1)
                entries.append((int(ident), tok))
        entries.sort()
        tokens = [tok for _, tok in entries]
        if tokens[:5] != list(SPECIAL_TOKENS):
            raise ValueError(f"{path}: vocabulary file missing special tokens")
        return cls(tokens[5:])

    @classmethod
    def from_lines(cls, text: str) -> "Vocabulary":
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            tok, ident = line.rsplit(" ", 1)
            entries.append((int(ident), tok))
        entries.sort()
        tokens = [tok for _, tok in entries]
        return cls(tokens[5:])

    def to_lines(self) -> str:
        return "".join(f"{tok} {i}\n" for i, tok in enumerate(self.id_to_token))


def build_vocab(captions: list[str], min_count: int = 1) -> Vocabulary:
    counts: dict[str, int] = {}
    for cap in captions:
        for tok in split_tokens(cap):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(kept)


def tokenize(caption: str, vocab: Vocabulary) -> torch.Tensor:
    """Caption -> LongTensor of token ids; out-of-vocabulary tokens map to [unk]."""
    tokens = split_tokens(caption)
    if not tokens:
        raise ValueError("caption is empty after tokenization")
    unk = vocab.unk_id
    return torch.tensor(
        [vocab.token_to_id.get(t, unk) for t in tokens], dtype=torch.long
    )


# ---------------------------------------------------------------------------
# positional encodings


@lru_cache(maxsize=64)
def _sine_position_2d_cached(h: int, w: int, d: int) -> torch.Tensor:
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) * 2 / (d // 2)))
    rows = torch.arange(h, dtype=torch.float64)
    cols = torch.arange(w, dtype=torch.float64)
    row_ang = rows[:, None] * freqs[None, :]  # (h, quarter)
    col_ang = cols[:, None] * freqs[None, :]  # (w, quarter)
    row_enc = torch.stack([torch.sin(row_ang), torch.cos(row_ang)], dim=-1).reshape(h, -1)
    col_enc = torch.stack([torch.sin(col_ang), torch.cos(col_ang)], dim=-1).reshape(w, -1)
    out = torch.empty(h, w, d, dtype=torch.float64)
    out[:, :, : d // 2] = row_enc[:, None, :]
    out[:, :, d // 2 :] = col_enc[None, :, :]
    return out.reshape(h * w, d)


def sine_position_2d(grid_shape: tuple[int, int], d: int) -> torch.Tensor:
    """Fixed 2-D sine encodings, (h*w, d) in row-major order.

    First d/2 channels encode the row index, last d/2 the column index; each
    half alternates sin/cos over geometric frequencies with base 10000.
    """
    h, w = grid_shape
    if d % 4 != 0:
        raise ValueError(f"position dimension must be divisible by 4, got {d}")
    if h < 1 or w < 1:
        raise ValueError("grid_shape entries must be >= 1")
    return _sine_position_2d_cached(h, w, d).clone()


# ---------------------------------------------------------------------------
# modules


class VisualBackbone(nn.Module):
    """Three stride-2 conv stages, a 1x1 projection to d, then 2x2 max-pool.

    Total stride is 16: an H x W image becomes an (H/16) x (W/16) feature grid.

    feature_gain is a fixed output multiplier. The fixed 2-D sine positions
    added downstream have row norm sqrt(d/2); without the gain, the
    image-dependent part of a freshly initialized token is a few percent of
    its position component and content-based attention cannot get started.
    """

    def __init__(self, in_channels: int = 3, channels=(16, 32, 64), d: int = 64,
                 dtype: torch.dtype = torch.float64, feature_gain: float = 8.0):
        super().__init__()
        stages = []
        prev = in_channels
        for ch in channels:
            stages.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1, dtype=dtype))
            stages.append(nn.ReLU())
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.proj = nn.Conv2d(prev, d, 1, dtype=dtype)
        self.pool = nn.MaxPool2d(2, 2)
        self.d = d
        self.feature_gain = feature_gain

    def forward(self, pixels: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        """pixels: (B, C, H, W) -> features (B, L, d), grid_shape (h, w)."""
        _, _, h_in, w_in = pixels.shape
        if h_in % TOTAL_STRIDE or w_in % TOTAL_STRIDE:
            raise ValueError(
                f"image size {h_in}x{w_in} not divisible by total stride {TOTAL_STRIDE}"
            )
        x = self.stages(pixels)
        x = self.proj(x)
        x = self.pool(x)
        b, d, h, w = x.shape
        feats = x.reshape(b, d, h * w).transpose(1, 2)
        return feats * self.feature_gain, (h, w)


@dataclass
class VisualGrid:
    features: torch.Tensor  # (L, d), post-projection content
    grid_shape: tuple[int, int]
    positions: torch.Tensor  # (L, d), fixed 2-D sine encodings


@dataclass
class TokenSequence:
    ids: torch.Tensor  # (T,) long
    embeddings: torch.Tensor  # (T, d) content
    positions: torch.Tensor  # (T, d) index-position embeddings


@dataclass
class JointSequence:
    """Assembled transformer input in the order V, [sep], W, [cls]."""

    tokens: torch.Tensor  # (S, d), content + position + segment
    segment_ids: torch.Tensor  # (S,) long, visual=0 / sep+text+cls=1
    visual_len: int
    word_len: int

    @property
    def visual_span(self) -> tuple[int, int]:
        return (0, self.visual_len)

    @property
    def sep_index(self) -> int:
        return self.visual_len

    @property
    def word_span(self) -> tuple[int, int]:
        return (self.visual_len + 1, self.visual_len + 1 + self.word_len)

    @property
    def cls_index(self) -> int:
        return self.visual_len + 1 + self.word_len

    def __len__(self) -> int:
        return self.visual_len + self.word_len + 2


def visual_embed(pixels, backbone: VisualBackbone) -> VisualGrid:
    """Single image (H, W, C) array -> VisualGrid with positions attached but
    not yet added (sequence assembly adds them)."""
    dtype = backbone.proj.weight.dtype
    px = torch.as_tensor(pixels, dtype=dtype).permute(2, 0, 1).unsqueeze(0)
    feats, grid_shape = backbone(px)
    pos = sine_position_2d(grid_shape, backbone.d).to(dtype)
    return VisualGrid(feats[0], grid_shape, pos)


class TextEmbedding(nn.Module):
    """Word-id content embeddings plus learned index-position embeddings."""

    def __init__(self, vocab_size: int, d: int, max_len: int = 64, d_w: int | None = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.d_w = d_w if d_w is not None else d
        self.word = nn.Embedding(vocab_size, self.d_w, dtype=dtype)
        self.position = nn.Embedding(max_len, d, dtype=dtype)
        self.to_d = (
            nn.Linear(self.d_w, d, dtype=dtype) if self.d_w != d else nn.Identity()
        )
        self.max_len = max_len

    def forward(self, ids: torch.Tensor) -> TokenSequence:
        if ids.numel() == 0:
            raise ValueError("token sequence must be non-empty")
        if ids.numel() > self.max_len:
            raise ValueError(
                f"sequence length {ids.numel()} exceeds max_len {self.max_len}"
            )
        content = self.to_d(self.word(ids))
        pos = self.position(torch.arange(ids.numel(), device=ids.device))
        return TokenSequence(ids=ids, embeddings=content, positions=pos)


class SequenceAssembler(nn.Module):
    """Builds the joint sequence {V, [sep], W, [cls]}: content + position
    (+ segment) per token, with learned content/position vectors for the
    special tokens."""

    def __init__(self, d: int, use_segment_embeddings: bool = True,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.sep_content = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.cls_content = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.sep_position = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.cls_position = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.use_segments = use_segment_embeddings
        if use_segment_embeddings:
            self.segment = nn.Embedding(2, d, dtype=dtype)
        self.d = d

    def _segment_vectors(self, visual_len: int, word_len: int, device) -> torch.Tensor:
        seg_ids = self.segment_ids(visual_len, word_len).to(device)
        if self.use_segments:
            return self.segment(seg_ids)
        d = self.d
        return torch.zeros(len(seg_ids), d, dtype=self.sep_content.dtype, device=device)

    @staticmethod
    def segment_ids(visual_len: int, word_len: int) -> torch.Tensor:
        return torch.cat(
            [
                torch.zeros(visual_len, dtype=torch.long),
                torch.ones(word_len + 2, dtype=torch.long),
            ]
        )

    def forward(self, visual: VisualGrid, text: TokenSequence) -> JointSequence:
        if visual.features.shape[1] != text.embeddings.shape[1]:
            raise ValueError(
                f"dimension mismatch: visual d={visual.features.shape[1]} vs "
                f"text d={text.embeddings.shape[1]}"
            )
        l_vis = visual.features.shape[0]
        t_len = text.embeddings.shape[0]
        device = visual.features.device
        content = torch.cat(
            [
                visual.features,
                self.sep_content.unsqueeze(0),
                text.embeddings,
                self.cls_content.unsqueeze(0),
            ]
        )
        positions = torch.cat(
            [
                visual.positions.to(content.dtype),
                self.sep_position.unsqueeze(0),
                text.positions,
                self.cls_position.unsqueeze(0),
            ]
        )
        tokens = content + positions + self._segment_vectors(l_vis, t_len, device)
        return JointSequence(
            tokens=tokens,
            segment_ids=self.segment_ids(l_vis, t_len).to(device),
            visual_len=l_vis,
            word_len=t_len,
        )

    def assemble_batch(
        self,
        vis_feats: torch.Tensor,  # (B, L, d)
        vis_pos: torch.Tensor,  # (L, d)
        txt_content: torch.Tensor,  # (B, Tmax, d), zero rows past each length
        txt_pos: torch.Tensor,  # (Tmax, d)
        lengths: list[int],
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded batch layout [V | sep | W, pads | cls]; [cls] sits at the
        fixed final index, pads are masked out of attention.

        Returns (tokens (B, S, d), valid mask (B, S) bool).
        """
        b, l_vis, d = vis_feats.shape
        t_max = txt_content.shape[1]
        s = l_vis + t_max + 2
        device = vis_feats.device
        dtype = vis_feats.dtype
        tokens = torch.zeros(b, s, d, dtype=dtype, device=device)
        tokens[:, :l_vis] = vis_feats + vis_pos.unsqueeze(0)
        tokens[:, l_vis] = self.sep_content + self.sep_position
        tokens[:, l_vis + 1 : l_vis + 1 + t_max] = txt_content + txt_pos.unsqueeze(0)
        tokens[:, -1] = self.cls_content + self.cls_position
        if self.use_segments:
            tokens[:, :l_vis] += self.segment.weight[0]
            tokens[:, l_vis:] += self.segment.weight[1]
        valid = torch.zeros(b, s, dtype=torch.bool, device=device)
        valid[:, : l_vis + 1] = True
        valid[:, -1] = True
        for i, t_len in enumerate(lengths):
            valid[i, l_vis + 1 : l_vis + 1 + t_len] = True
        return tokens, valid


def assemble_sequence(
    visual: VisualGrid, text: TokenSequence, assembler: SequenceAssembler
) -> JointSequence:
    return assembler(visual, text)
