import dataclasses
import json
import os

import numpy as np
import pytest
import torch

from gridvlp.corpus import SyntheticSceneSpec, corpus_meta_for_spec, generate_synthetic
from gridvlp.model import PretrainModel, init_parameters
from gridvlp.trainer import (
    CheckpointError,
    TrainConfig,
    build_param_groups,
    config_hash,
    load_checkpoint,
    load_model_from_checkpoint,
    lr_at,
    make_optimizers,
    save_checkpoint,
    snapshot,
    train,
)


@pytest.fixture(scope="module")
def train_corpus():
    spec = SyntheticSceneSpec()
    pairs, annotations = generate_synthetic(spec, 24, seed=0)
    return pairs, annotations, corpus_meta_for_spec(spec)


def small_config(meta, **overrides):
    base = dict(
        total_steps=8, batch_size=4, d=16, n_layers=1, n_heads=2, d_ff=32,
        conv_channels=(4, 8, 8), decay_steps=(), checkpoint_every=0,
        k_cat=meta.k_cat, d_o=meta.d_o,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestConfig:
    def test_validation_catches_bad_values(self):
        with pytest.raises(ValueError, match="decay_steps"):
            TrainConfig(decay_steps=(2400, 1200)).validate()
        with pytest.raises(ValueError, match="decay_steps"):
            TrainConfig(total_steps=100, decay_steps=(100,)).validate()
        with pytest.raises(ValueError, match="mask_rate"):
            TrainConfig(mask_rate=0.0).validate()
        with pytest.raises(ValueError, match="task_weights"):
            TrainConfig(task_weights=(0, 0, 0, 0)).validate()
        with pytest.raises(ValueError, match="divisible"):
            TrainConfig(batch_size=6, grad_accum_steps=4).validate()

    def test_json_round_trip_and_hash(self):
        cfg = TrainConfig(total_steps=100, decay_steps=(40, 80), k_cat=8, d_o=12)
        again = TrainConfig.from_json_dict(cfg.to_json_dict())
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)
        assert config_hash(dataclasses.replace(cfg, seed=1)) != config_hash(cfg)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_json_dict({"total_steps": 5, "bogus": 1})


class TestLrSchedule:
    def test_default_rates_at_step_zero(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == (1e-2, 1e-4)

    def test_one_decay_applied(self):
        cfg = TrainConfig(total_steps=500, decay_steps=(200, 400))
        assert lr_at(250, cfg) == (pytest.approx(1e-3), pytest.approx(1e-5))

    def test_two_decays_applied(self):
        cfg = TrainConfig(total_steps=500, decay_steps=(200, 400))
        assert lr_at(400, cfg) == (pytest.approx(1e-4), pytest.approx(1e-6))
        assert lr_at(499, cfg) == (pytest.approx(1e-4), pytest.approx(1e-6))

    def test_non_increasing_piecewise_constant(self):
        cfg = TrainConfig(total_steps=100, decay_steps=(30, 60))
        values = [lr_at(s, cfg)[0] for s in range(100)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert len(set(values)) == 3

    def test_warmup_ramp(self):
        cfg = TrainConfig(total_steps=100, decay_steps=(), warmup_steps=10)
        assert lr_at(0, cfg)[0] == pytest.approx(1e-3)
        assert lr_at(9, cfg)[0] == pytest.approx(1e-2)
        assert lr_at(10, cfg)[0] == pytest.approx(1e-2)


class TestParamGroups:
    def _model(self, meta):
        model = PretrainModel(vocab_size=12, k_cat=meta.k_cat, d_o=meta.d_o,
                              d=16, n_layers=1, n_heads=2, d_ff=32,
                              conv_channels=(4, 8, 8))
        init_parameters(model, 0)
        return model

    def test_groups_exhaustive_and_disjoint(self, train_corpus):
        _, _, meta = train_corpus
        model = self._model(meta)
        backbone, rest = build_param_groups(model)
        all_names = {n for n, _ in model.named_parameters()}
        assert set(backbone) | set(rest) == all_names
        assert set(backbone) & set(rest) == set()
        assert any(n.startswith("backbone.stages") for n in backbone)
        assert any(n.startswith("heads.mrc") for n in rest)
        assert "visual_mask_token" in rest

    def test_orphan_parameter_reported(self, train_corpus):
        _, _, meta = train_corpus
        model = self._model(meta)
        model.rogue = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
        with pytest.raises(ValueError, match="rogue"):
            build_param_groups(model)

    def test_zero_backbone_lr_freezes_backbone(self, train_corpus):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=10, lr_backbone=1e-9)
        result = train(pairs, annotations, meta.lexicon, cfg)
        # rerun with lr_backbone epsilon and compare: backbone params must be
        # essentially untouched relative to their own scale
        fresh = PretrainModel(
            vocab_size=len(result.vocab), k_cat=meta.k_cat, d_o=meta.d_o,
            d=16, n_layers=1, n_heads=2, d_ff=32, conv_channels=(4, 8, 8),
        )
        init_parameters(fresh, cfg.seed)
        for name, p in fresh.named_parameters():
            if name.startswith("backbone."):
                got = result.checkpoint.arrays[f"param.{name}"]
                assert np.allclose(got, p.detach().numpy(), atol=1e-7)


class TestTrainLoop:
    def test_zero_steps_returns_initial_state(self, train_corpus):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=0)
        result = train(pairs, annotations, meta.lexicon, cfg)
        assert result.metrics == []
        assert result.checkpoint.step == 0

    def test_determinism_bit_identical(self, train_corpus):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta)
        a = train(pairs, annotations, meta.lexicon, cfg)
        b = train(pairs, annotations, meta.lexicon, cfg)
        assert a.metrics == b.metrics
        assert set(a.checkpoint.arrays) == set(b.checkpoint.arrays)
        for key in a.checkpoint.arrays:
            assert np.array_equal(a.checkpoint.arrays[key], b.checkpoint.arrays[key])

    def test_descent_on_itm(self, train_corpus):
        pairs, annotations, meta = train_corpus
        spec = SyntheticSceneSpec()
        many_pairs, many_annotations = generate_synthetic(spec, 64, seed=1)
        cfg = small_config(
            meta, total_steps=200, batch_size=8, task_weights=(0, 0, 0, 1),
            lr_transformer=1e-3, d=32, n_layers=2, n_heads=4, d_ff=64,
            conv_channels=(8, 16, 32),
        )
        result = train(many_pairs, many_annotations, meta.lexicon, cfg)
        losses = [m["loss"] for m in result.metrics]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_task_isolation_mlm_head_untouched_by_itm(self, train_corpus):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, task_weights=(0, 0, 0, 1), total_steps=5)
        result = train(pairs, annotations, meta.lexicon, cfg)
        fresh = PretrainModel(
            vocab_size=len(result.vocab), k_cat=meta.k_cat, d_o=meta.d_o,
            d=16, n_layers=1, n_heads=2, d_ff=32, conv_channels=(4, 8, 8),
        )
        init_parameters(fresh, cfg.seed)
        init_state = {n: p.detach().numpy().copy() for n, p in fresh.named_parameters()}
        for head in ("heads.mlm", "heads.mrc", "heads.mrfr", "heads.smvm"):
            for name in init_state:
                if name.startswith(head):
                    got = result.checkpoint.arrays[f"param.{name}"]
                    assert np.array_equal(got, init_state[name]), name

    def test_metrics_log_written(self, train_corpus, tmp_path):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=4)
        out = tmp_path / "run"
        result = train(pairs, annotations, meta.lexicon, cfg, out_dir=str(out))
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 4
        parsed = [json.loads(line) for line in lines]
        assert parsed == result.metrics
        assert all(obj["step"] == i for i, obj in enumerate(parsed))
        assert (out / "final.ckpt").exists()

    def test_config_variants_train(self, train_corpus):
        pairs, annotations, meta = train_corpus
        for overrides in (
            {"itm_negative_scope": "corpus", "task_weights": (0, 0, 0, 1)},
            {"mvm_style": "random", "task_weights": (1, 0, 0, 0)},
            {"mvm_style": "standard", "task_weights": (1, 0, 0, 0)},
            {"pra_kl_reverse": True, "task_weights": (0, 1, 0, 0)},
            {"use_segment_embeddings": False},
            {"dtype": "float32"},
        ):
            cfg = small_config(meta, total_steps=3, **overrides)
            result = train(pairs, annotations, meta.lexicon, cfg)
            assert len(result.metrics) == 3
            assert all(np.isfinite(m["loss"]) for m in result.metrics)

    def test_gradient_accumulation_equivalence(self, train_corpus):
        pairs, annotations, meta = train_corpus
        cfg1 = small_config(meta, total_steps=4, batch_size=8, grad_accum_steps=1)
        cfg2 = small_config(meta, total_steps=4, batch_size=8, grad_accum_steps=2)
        a = train(pairs, annotations, meta.lexicon, cfg1)
        b = train(pairs, annotations, meta.lexicon, cfg2)
        for key in a.checkpoint.arrays:
            if key.startswith("param."):
                assert np.allclose(
                    a.checkpoint.arrays[key], b.checkpoint.arrays[key], atol=1e-9
                ), key


class TestCheckpoint:
    def test_save_load_save_identical_bytes(self, train_corpus, tmp_path):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=3)
        result = train(pairs, annotations, meta.lexicon, cfg)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(result.checkpoint, str(p1))
        loaded = load_checkpoint(str(p1))
        save_checkpoint(loaded, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_equals_uninterrupted(self, train_corpus, tmp_path):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=10, checkpoint_every=5)
        full = train(pairs, annotations, meta.lexicon, cfg,
                     out_dir=str(tmp_path / "full"))
        mid = load_checkpoint(str(tmp_path / "full" / "step5.ckpt"))
        resumed = train(pairs, annotations, meta.lexicon, cfg, resume=mid)
        assert resumed.metrics == full.metrics[5:]
        for key in full.checkpoint.arrays:
            assert np.array_equal(
                full.checkpoint.arrays[key], resumed.checkpoint.arrays[key]
            ), key

    def test_dimension_mismatch_rejected(self, train_corpus, tmp_path):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=2)
        result = train(pairs, annotations, meta.lexicon, cfg)
        other = PretrainModel(
            vocab_size=len(result.vocab), k_cat=meta.k_cat, d_o=meta.d_o,
            d=32, n_layers=1, n_heads=2, d_ff=32, conv_channels=(4, 8, 8),
        )
        from gridvlp.trainer import restore

        with pytest.raises(CheckpointError, match="dimension mismatch"):
            restore(result.checkpoint, other)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_truncated_file_rejected(self, train_corpus, tmp_path):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=1)
        result = train(pairs, annotations, meta.lexicon, cfg)
        path = tmp_path / "t.ckpt"
        save_checkpoint(result.checkpoint, str(path))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(str(path))

    def test_rebuild_model_from_checkpoint(self, train_corpus):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=3)
        result = train(pairs, annotations, meta.lexicon, cfg)
        model, vocab, config = load_model_from_checkpoint(result.checkpoint)
        assert len(vocab) == len(result.vocab)
        for name, p in model.named_parameters():
            assert np.array_equal(
                p.detach().numpy(), result.checkpoint.arrays[f"param.{name}"]
            )

    def test_abort_on_nonfinite_leaves_diagnostic(self, train_corpus, tmp_path,
                                                  monkeypatch):
        pairs, annotations, meta = train_corpus
        cfg = small_config(meta, total_steps=5)
        out = tmp_path / "blow"
        import gridvlp.trainer as trainer_mod
        from gridvlp.pretext import LossReport

        real_step = trainer_mod.train_step
        calls = {"n": 0}

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] >= 3:
                return LossReport(task="itm", loss=float("nan"))
            return real_step(*args, **kwargs)

        monkeypatch.setattr(trainer_mod, "train_step", poisoned)
        with pytest.raises(RuntimeError, match="non-finite"):
            train(pairs, annotations, meta.lexicon, cfg, out_dir=str(out))
        assert (out / "diagnostic.ckpt").exists()
