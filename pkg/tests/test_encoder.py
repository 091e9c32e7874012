import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvlp.encoder import (
    SequenceAssembler,
    TextEmbedding,
    VisualBackbone,
    Vocabulary,
    assemble_sequence,
    build_vocab,
    sine_position_2d,
    split_tokens,
    tokenize,
    visual_embed,
)
from gridvlp.model import init_parameters


def small_backbone(d=16, seed=0):
    bb = VisualBackbone(3, (4, 8, 8), d)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in bb.parameters():
            p.normal_(0, 0.2, generator=gen)
    return bb


class TestTokenizer:
    def test_basic_oracle(self):
        vocab = build_vocab(["a red circle ."])
        ids = tokenize("A red circle.", vocab)
        assert [vocab.id_to_token[i] for i in ids.tolist()] == ["a", "red", "circle", "."]

    def test_unknown_token_maps_to_unk(self):
        vocab = build_vocab(["a circle"])
        ids = tokenize("a hexagon", vocab)
        assert ids.tolist()[1] == vocab.unk_id

    def test_empty_caption_error(self):
        vocab = build_vocab(["a"])
        with pytest.raises(ValueError):
            tokenize("   ", vocab)

    @given(st.text(min_size=1, max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_on_normalized_text(self, text):
        toks = split_tokens(text)
        if not toks:
            return
        assert split_tokens(" ".join(toks)) == toks

    def test_punctuation_splits(self):
        assert split_tokens("a circle, a square.") == [
            "a", "circle", ",", "a", "square", ".",
        ]


class TestVocabulary:
    def test_specials_only_for_empty_corpus(self):
        vocab = build_vocab([])
        assert len(vocab) == 5
        assert vocab.pad_id == 0 and vocab.cls_id == 4

    def test_min_count_one_keeps_all(self):
        vocab = build_vocab(["a circle and a square"], min_count=1)
        for tok in ("a", "circle", "and", "square"):
            assert tok in vocab.token_to_id

    def test_min_count_two_drops_singletons(self):
        vocab = build_vocab(["a circle a square"], min_count=2)
        assert "a" in vocab.token_to_id
        assert "circle" not in vocab.token_to_id
        assert "square" not in vocab.token_to_id

    def test_ids_dense_and_specials_distinct(self):
        vocab = build_vocab(["x y z"])
        ids = sorted(vocab.token_to_id.values())
        assert ids == list(range(len(vocab)))
        assert len(set(vocab.special_ids)) == 5

    def test_file_round_trip(self, tmp_path):
        vocab = build_vocab(["a circle and a square"])
        path = tmp_path / "vocab.txt"
        vocab.save(str(path))
        again = Vocabulary.load(str(path))
        assert again.token_to_id == vocab.token_to_id


class TestSinePosition2d:
    def test_origin_pattern(self):
        pos = sine_position_2d((3, 3), 16)
        first = pos[0]
        assert torch.allclose(first[0::2], torch.zeros(8, dtype=torch.float64))
        assert torch.allclose(first[1::2], torch.ones(8, dtype=torch.float64))

    def test_single_cell_grid(self):
        pos = sine_position_2d((1, 1), 8)
        assert pos.shape == (1, 8)
        assert torch.allclose(pos[0, 0::2], torch.zeros(4, dtype=torch.float64))
        assert torch.allclose(pos[0, 1::2], torch.ones(4, dtype=torch.float64))

    def test_all_cells_distinct(self):
        pos = sine_position_2d((8, 8), 32)
        for i in range(64):
            diff = (pos - pos[i]).abs().max(dim=1).values
            diff[i] = 1.0
            assert (diff > 1e-6).all()

    def test_values_in_range_and_cacheable(self):
        a = sine_position_2d((5, 7), 20)
        b = sine_position_2d((5, 7), 20)
        assert a.abs().max() <= 1.0
        assert torch.equal(a, b)

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            sine_position_2d((2, 2), 18)


class TestVisualBackbone:
    def test_grid_shape_from_strides(self):
        bb = small_backbone()
        feats, grid = bb(torch.zeros(1, 3, 64, 64, dtype=torch.float64))
        assert grid == (4, 4)
        assert feats.shape == (1, 16, 16)

    def test_indivisible_size_rejected(self):
        bb = small_backbone()
        with pytest.raises(ValueError):
            bb(torch.zeros(1, 3, 40, 40, dtype=torch.float64))

    def test_constant_zero_image_constant_features(self):
        bb = small_backbone()
        with torch.no_grad():
            for name, p in bb.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
        feats, _ = bb(torch.zeros(1, 3, 32, 32, dtype=torch.float64))
        assert torch.allclose(feats[0], feats[0, 0].expand_as(feats[0]))

    def test_gradient_matches_finite_differences(self):
        bb = small_backbone(seed=3)
        px = torch.rand(16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        px_t = px.clone().requires_grad_(True)

        def forward(p):
            feats, _ = bb(p.permute(2, 0, 1).unsqueeze(0))
            return feats.mean()

        forward(px_t).backward()
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(12):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            with torch.no_grad():
                plus = px.clone(); plus[i, j, c] += h
                minus = px.clone(); minus[i, j, c] -= h
                fd = (forward(plus) - forward(minus)).item() / (2 * h)
            analytic = px_t.grad[i, j, c].item()
            assert abs(analytic - fd) <= 1e-4 * max(abs(analytic), abs(fd), 1e-8)

    def test_no_nan_under_random_params(self):
        px = torch.rand(4, 16, 16, 3, dtype=torch.float64).permute(0, 3, 1, 2)
        for trial in range(200):
            bb = small_backbone(seed=trial)
            feats, _ = bb(px)
            assert torch.isfinite(feats).all()

    def test_visual_embed_wrapper(self):
        bb = small_backbone()
        grid = visual_embed(np.random.default_rng(0).uniform(0, 1, (32, 32, 3)), bb)
        assert grid.grid_shape == (2, 2)
        assert grid.features.shape == (4, 16)
        assert grid.positions.shape == (4, 16)
        assert grid.positions.abs().max() <= 1.0


class TestAssembleSequence:
    def _parts(self, l_cells=4, t_len=3, d=16, seed=0):
        gen = torch.Generator().manual_seed(seed)
        from gridvlp.encoder import VisualGrid, TokenSequence

        side = int(math.isqrt(l_cells))
        visual = VisualGrid(
            features=torch.randn(l_cells, d, dtype=torch.float64, generator=gen),
            grid_shape=(side, side),
            positions=sine_position_2d((side, side), d),
        )
        text = TokenSequence(
            ids=torch.arange(t_len),
            embeddings=torch.randn(t_len, d, dtype=torch.float64, generator=gen),
            positions=torch.randn(t_len, d, dtype=torch.float64, generator=gen),
        )
        assembler = SequenceAssembler(d)
        with torch.no_grad():
            for p in assembler.parameters():
                p.normal_(0, 0.1, generator=gen)
        return visual, text, assembler

    def test_length_and_offsets(self):
        visual, text, assembler = self._parts(l_cells=16, t_len=4)
        seq = assemble_sequence(visual, text, assembler)
        assert len(seq) == 22
        assert seq.cls_index == 21
        assert seq.visual_span == (0, 16)
        assert seq.sep_index == 16
        assert seq.word_span == (17, 21)
        assert seq.segment_ids.tolist() == [0] * 16 + [1] * 6

    def test_swap_two_visual_cells_moves_content_only(self):
        visual, text, assembler = self._parts()
        base = assemble_sequence(visual, text, assembler).tokens
        swapped_feats = visual.features.clone()
        swapped_feats[[0, 3]] = swapped_feats[[3, 0]]
        from gridvlp.encoder import VisualGrid

        swapped = assemble_sequence(
            VisualGrid(swapped_feats, visual.grid_shape, visual.positions),
            text,
            assembler,
        ).tokens
        delta = visual.features[3] - visual.features[0]
        assert torch.allclose(swapped[0] - base[0], delta, atol=1e-12)
        assert torch.allclose(swapped[3] - base[3], -delta, atol=1e-12)
        assert torch.allclose(swapped[1:3], base[1:3], atol=1e-12)
        assert torch.allclose(swapped[4:], base[4:], atol=1e-12)

    def test_zero_content_leaves_positions_segments_specials(self):
        visual, text, assembler = self._parts()
        visual.features.zero_()
        text.embeddings.zero_()
        seq = assemble_sequence(visual, text, assembler)
        seg = assembler.segment.weight
        expect_vis = visual.positions + seg[0]
        assert torch.allclose(seq.tokens[:4], expect_vis, atol=1e-12)
        expect_words = text.positions + seg[1]
        assert torch.allclose(seq.tokens[5:8], expect_words, atol=1e-12)
        assert torch.allclose(
            seq.tokens[4], assembler.sep_content + assembler.sep_position + seg[1],
            atol=1e-12,
        )
        assert torch.allclose(
            seq.tokens[8], assembler.cls_content + assembler.cls_position + seg[1],
            atol=1e-12,
        )

    def test_dimension_mismatch_error(self):
        visual, text, assembler = self._parts()
        bad = torch.zeros(3, 8, dtype=torch.float64)
        from gridvlp.encoder import TokenSequence

        with pytest.raises(ValueError, match="dimension mismatch"):
            assemble_sequence(
                visual,
                TokenSequence(torch.arange(3), bad, bad),
                assembler,
            )

    @given(st.integers(1, 6), st.integers(1, 8))
    @settings(max_examples=30, deadline=None)
    def test_offsets_property(self, grid_side, t_len):
        d = 16
        from gridvlp.encoder import VisualGrid, TokenSequence

        l_cells = grid_side * grid_side
        visual = VisualGrid(
            torch.zeros(l_cells, d, dtype=torch.float64),
            (grid_side, grid_side),
            sine_position_2d((grid_side, grid_side), d),
        )
        text = TokenSequence(
            torch.zeros(t_len, dtype=torch.long),
            torch.zeros(t_len, d, dtype=torch.float64),
            torch.zeros(t_len, d, dtype=torch.float64),
        )
        seq = assemble_sequence(visual, text, SequenceAssembler(d))
        assert seq.visual_span == (0, l_cells)
        assert seq.sep_index == l_cells
        assert seq.word_span == (l_cells + 1, l_cells + 1 + t_len)
        assert seq.cls_index == l_cells + 1 + t_len
        assert len(seq) == l_cells + t_len + 2


class TestTextEmbedding:
    def test_projection_when_dims_differ(self):
        te = TextEmbedding(vocab_size=10, d=16, max_len=8, d_w=12)
        out = te(torch.tensor([1, 2, 3]))
        assert out.embeddings.shape == (3, 16)
        assert out.positions.shape == (3, 16)

    def test_too_long_rejected(self):
        te = TextEmbedding(vocab_size=10, d=8, max_len=4)
        with pytest.raises(ValueError):
            te(torch.zeros(5, dtype=torch.long))
