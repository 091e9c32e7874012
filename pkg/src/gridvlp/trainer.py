"""The pretraining loop: per-step task sampling, two-group optimization
(momentum SGD for the convolutional backbone, AdamW for everything else),
step-decay learning rates, deterministic checkpointing, and metrics logging."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import Vocabulary, build_vocab
from .knowledge import hash_embedder
from .model import PretrainModel, init_parameters, resolve_dtype
from .pretext import (
    ItmPlan,
    LossReport,
    PreparedPair,
    itm_loss,
    mlm_loss,
    omvm_loss,
    plan_itm,
    plan_mlm,
    plan_omvm,
    plan_standard_cells,
    pra_loss,
    prepare_pairs,
    sample_task,
)


class CheckpointError(ValueError):
    """A checkpoint file is unreadable or inconsistent."""


@dataclass
class TrainConfig:
    # schedule
    total_steps: int = 3000
    batch_size: int = 16
    grad_accum_steps: int = 1
    task_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    lr_backbone: float = 1e-2
    lr_transformer: float = 1e-4
    decay_steps: tuple[int, ...] = (1200, 2400)
    decay_factor: float = 0.1
    warmup_steps: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 1000
    # model dimensions
    d: int = 64
    n_layers: int = 3
    n_heads: int = 4
    d_ff: int = 256
    conv_channels: tuple[int, ...] = (16, 32, 64)
    max_text_len: int = 64
    d_w: int | None = None
    use_segment_embeddings: bool = True
    dtype: str = "float64"
    init_std: float = 0.08
    init_std_attn: float | None = None
    visual_feature_gain: float = 8.0
    # task knobs
    lambda_mrfr: float = 1.0
    tau: float = 1.0
    mask_rate: float = 0.15
    itm_neg_rate: float = 0.5
    mvm_style: str = "knowledge"  # knowledge | random | standard
    pra_kl_reverse: bool = False
    itm_negative_scope: str = "batch"  # batch | corpus
    # corpus-derived (filled by train() when left unset)
    k_cat: int | None = None
    d_o: int | None = None
    in_channels: int = 3
    min_count: int = 1
    embedder_dim: int = 64
    embedder_seed: int = 13

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (ITM sources negatives in-batch)")
        if self.grad_accum_steps < 1 or self.batch_size % self.grad_accum_steps:
            raise ValueError("batch_size must be divisible by grad_accum_steps")
        if list(self.decay_steps) != sorted(set(self.decay_steps)):
            raise ValueError("decay_steps must be strictly increasing")
        if self.decay_steps and self.total_steps and max(self.decay_steps) >= self.total_steps:
            raise ValueError("decay_steps must all be < total_steps")
        for name in ("lr_backbone", "lr_transformer", "decay_factor", "mask_rate",
                     "itm_neg_rate"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if len(self.task_weights) != 4 or any(w < 0 for w in self.task_weights):
            raise ValueError("task_weights must be 4 non-negative numbers")
        if sum(self.task_weights) <= 0:
            raise ValueError("task_weights must not all be zero")
        if self.mvm_style not in ("knowledge", "random", "standard"):
            raise ValueError(f"unknown mvm_style {self.mvm_style!r}")
        if self.itm_negative_scope not in ("batch", "corpus"):
            raise ValueError(f"unknown itm_negative_scope {self.itm_negative_scope!r}")
        resolve_dtype(self.dtype)

    def to_json_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("task_weights", "decay_steps", "conv_channels"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(obj)
        for key in ("task_weights", "decay_steps", "conv_channels"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def config_hash(config: TrainConfig) -> str:
    canon = json.dumps(config.to_json_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_model(config: TrainConfig, vocab_size: int) -> PretrainModel:
    if config.k_cat is None or config.d_o is None:
        raise ValueError("config.k_cat and config.d_o must be set before building")
    model = PretrainModel(
        vocab_size=vocab_size,
        k_cat=config.k_cat,
        d_o=config.d_o,
        d=config.d,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        d_ff=config.d_ff,
        conv_channels=config.conv_channels,
        in_channels=config.in_channels,
        max_text_len=config.max_text_len,
        d_w=config.d_w,
        use_segment_embeddings=config.use_segment_embeddings,
        dtype=resolve_dtype(config.dtype),
        visual_feature_gain=config.visual_feature_gain,
    )
    init_parameters(model, config.seed, config.init_std, config.init_std_attn)
    return model


GROUP2_PREFIXES = ("text.", "assembler.", "fusion.", "heads.")


def build_param_groups(
    model: PretrainModel,
) -> tuple[dict[str, torch.nn.Parameter], dict[str, torch.nn.Parameter]]:
    """Exhaustive, disjoint split: convolutional backbone vs everything else
    (transformer, embeddings, heads, special vectors)."""
    backbone: dict[str, torch.nn.Parameter] = {}
    rest: dict[str, torch.nn.Parameter] = {}
    orphans = []
    for name, p in model.named_parameters():
        if name.startswith("backbone."):
            backbone[name] = p
        elif name.startswith(GROUP2_PREFIXES) or name == "visual_mask_token":
            rest[name] = p
        else:
            orphans.append(name)
    if orphans:
        raise ValueError(f"parameters not assigned to any optimizer group: {orphans}")
    return backbone, rest


def make_optimizers(model: PretrainModel, config: TrainConfig):
    backbone, rest = build_param_groups(model)
    sgd = torch.optim.SGD(
        list(backbone.values()),
        lr=config.lr_backbone,
        momentum=config.momentum,
        foreach=False,
    )
    adamw = torch.optim.AdamW(
        list(rest.values()),
        lr=config.lr_transformer,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
        foreach=False,
    )
    return sgd, adamw


def lr_at(step: int, config: TrainConfig) -> tuple[float, float]:
    """Piecewise-constant step decay; a decay boundary takes effect at its own
    step. Optional linear warmup (off by default) ramps from 0."""
    if not (0 <= step < max(config.total_steps, 1)):
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    n_decayed = sum(1 for s in config.decay_steps if s <= step)
    factor = config.decay_factor**n_decayed
    if config.warmup_steps > 0 and step < config.warmup_steps:
        factor *= (step + 1) / config.warmup_steps
    return config.lr_backbone * factor, config.lr_transformer * factor


# ---------------------------------------------------------------------------
# checkpoint serialization: single little-endian binary file


_MAGIC = b"GVLPCKP1"
_VERSION = 1
_KINDS = {0: "<f8", 1: "<f4", 2: "<i8", 3: "u1"}
_KIND_OF_DTYPE = {
    np.dtype("float64"): 0,
    np.dtype("float32"): 1,
    np.dtype("int64"): 2,
    np.dtype("uint8"): 3,
}


@dataclass
class Checkpoint:
    step: int
    config: TrainConfig
    config_json: str
    vocab_lines: str
    arrays: dict[str, np.ndarray]  # insertion-ordered: params then optimizer state
    rng_state: bytes

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def _write_record(f, name: str, arr: np.ndarray) -> None:
    kind = _KIND_OF_DTYPE.get(arr.dtype)
    if kind is None:
        raise CheckpointError(f"record {name!r} has unsupported dtype {arr.dtype}")
    name_b = name.encode("utf-8")
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<BB", kind, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_KINDS[kind]).tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_record(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    kind, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if kind not in _KINDS:
        raise CheckpointError(f"record {name!r} has unknown dtype code {kind}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    dtype = np.dtype(_KINDS[kind])
    arr = np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype=dtype)
    return name, arr.reshape(shape).copy()


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write the versioned little-endian binary; byte-stable round trips."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", ckpt.step))
        header = {
            "config_json": ckpt.config_json,
            "vocab_lines": ckpt.vocab_lines,
            "config_hash": ckpt.hash,
        }
        header_b = json.dumps(header, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(header_b)))
        f.write(header_b)
        f.write(struct.pack("<I", len(ckpt.arrays) + 1))
        for name, arr in ckpt.arrays.items():
            _write_record(f, name, arr)
        _write_record(f, "rng.train", np.frombuffer(ckpt.rng_state, dtype=np.uint8))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 8) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (step,) = struct.unpack("<Q", _read_exact(f, 8))
        (header_len,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            header = json.loads(_read_exact(f, header_len).decode("utf-8"))
            config = TrainConfig.from_json_dict(json.loads(header["config_json"]))
        except (ValueError, KeyError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        (n_records,) = struct.unpack("<I", _read_exact(f, 4))
        arrays: dict[str, np.ndarray] = {}
        rng_state = b""
        for _ in range(n_records):
            name, arr = _read_record(f)
            if name == "rng.train":
                rng_state = arr.tobytes()
            else:
                arrays[name] = arr
    ckpt = Checkpoint(
        step=step,
        config=config,
        config_json=header["config_json"],
        vocab_lines=header["vocab_lines"],
        arrays=arrays,
        rng_state=rng_state,
    )
    if header.get("config_hash") != ckpt.hash:
        raise CheckpointError(f"{path}: stored config hash does not match config")
    return ckpt


def snapshot(
    model: PretrainModel,
    sgd: torch.optim.SGD,
    adamw: torch.optim.AdamW,
    rng: torch.Generator,
    step: int,
    config: TrainConfig,
    vocab: Vocabulary,
) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param.{name}"] = p.detach().cpu().numpy().copy()
    backbone, rest = build_param_groups(model)
    for name, p in backbone.items():
        state = sgd.state.get(p, {})
        if "momentum_buffer" in state and state["momentum_buffer"] is not None:
            arrays[f"opt.sgd.{name}.momentum_buffer"] = (
                state["momentum_buffer"].detach().cpu().numpy().copy()
            )
    for name, p in rest.items():
        state = adamw.state.get(p, {})
        for key in ("step", "exp_avg", "exp_avg_sq"):
            if key in state:
                val = state[key]
                if not torch.is_tensor(val):
                    val = torch.tensor(float(val), dtype=torch.float32)
                arrays[f"opt.adamw.{name}.{key}"] = val.detach().cpu().numpy().copy()
    cfg_json = json.dumps(config.to_json_dict(), sort_keys=True)
    return Checkpoint(
        step=step,
        config=config,
        config_json=cfg_json,
        vocab_lines=vocab.to_lines(),
        arrays=arrays,
        rng_state=bytes(rng.get_state().numpy().tobytes()),
    )


def restore(
    ckpt: Checkpoint,
    model: PretrainModel,
    sgd: torch.optim.SGD | None = None,
    adamw: torch.optim.AdamW | None = None,
    rng: torch.Generator | None = None,
) -> None:
    """Load parameters (and optionally optimizer/rng state) from a checkpoint.
    Raises on any shape mismatch."""
    named = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in named.items():
            key = f"param.{name}"
            if key not in ckpt.arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            arr = ckpt.arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"dimension mismatch for {name}: checkpoint {tuple(arr.shape)} "
                    f"vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    if sgd is not None and adamw is not None:
        backbone, rest = build_param_groups(model)
        for name, p in backbone.items():
            key = f"opt.sgd.{name}.momentum_buffer"
            if key in ckpt.arrays:
                sgd.state[p] = {
                    "momentum_buffer": torch.from_numpy(ckpt.arrays[key].copy())
                }
        for name, p in rest.items():
            state = {}
            for skey in ("step", "exp_avg", "exp_avg_sq"):
                key = f"opt.adamw.{name}.{skey}"
                if key in ckpt.arrays:
                    state[skey] = torch.from_numpy(ckpt.arrays[key].copy())
            if state:
                adamw.state[p] = state
    if rng is not None and ckpt.rng_state:
        rng.set_state(torch.frombuffer(bytearray(ckpt.rng_state), dtype=torch.uint8).clone())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    model: PretrainModel
    vocab: Vocabulary
    prepared: list[PreparedPair]


def _merge_reports(reports: list[LossReport], task: str) -> LossReport:
    if len(reports) == 1:
        return reports[0]
    loss = sum(r.loss for r in reports)
    weights = [r.metrics.get("pairs", 1.0) for r in reports]
    total_pairs = sum(weights)
    metrics: dict[str, float] = {}
    keys = {k for r in reports for k in r.metrics if k != "pairs"}
    for k in keys:
        acc = [(r.metrics[k], w) for r, w in zip(reports, weights) if k in r.metrics]
        metrics[k] = sum(v * w for v, w in acc) / sum(w for _, w in acc)
    metrics["pairs"] = total_pairs
    masked_objects = None
    if all(r.masked_objects is not None for r in reports):
        masked_objects = [m for r in reports for m in r.masked_objects]
    masked_tokens = None
    if all(r.masked_tokens is not None for r in reports):
        masked_tokens = [m for r in reports for m in r.masked_tokens]
    return LossReport(
        task=task,
        loss=loss,
        metrics=metrics,
        masked_objects=masked_objects,
        masked_tokens=masked_tokens,
        skipped=sum(r.skipped for r in reports),
    )


def _chunks(n: int, parts: int) -> list[slice]:
    size = n // parts
    return [slice(i * size, (i + 1) * size) for i in range(parts)]


def train_step(
    model: PretrainModel,
    batch: list[PreparedPair],
    batch_source_ids: list[int],
    task: str,
    config: TrainConfig,
    rng: torch.Generator,
    vocab: Vocabulary,
    corpus: list[PreparedPair] | None = None,
) -> LossReport:
    """Compute one task loss over the batch (splitting across accumulation
    chunks), leaving gradients accumulated on the parameters."""
    n = len(batch)
    parts = config.grad_accum_steps
    reports: list[LossReport] = []
    if task == "omvm":
        if config.mvm_style == "standard":
            plan = plan_standard_cells(batch, rng, config.mask_rate)
            denom = n
        else:
            plan = plan_omvm(batch, rng, config.mvm_style)
            denom = sum(1 for sel in plan if sel)
            if denom == 0:
                raise ValueError("every pair in the batch has zero proposals")
        for sl in _chunks(n, parts):
            sub_plan = plan[sl]
            if config.mvm_style != "standard" and not any(sub_plan):
                continue
            loss, rep = omvm_loss(
                model, batch[sl], lam=config.lambda_mrfr, style=config.mvm_style,
                plan=sub_plan, loss_denom=denom,
            )
            loss.backward()
            rep.loss = float(loss.item())
            reports.append(rep)
    elif task == "pra":
        contributing = [
            1 if (p.n_phrases >= 1 and p.n_proposals >= 1) else 0 for p in batch
        ]
        denom = sum(contributing)
        if denom == 0:
            raise ValueError("no pair in the batch has both phrases and proposals")
        for sl in _chunks(n, parts):
            if not any(contributing[sl]):
                continue
            loss, rep = pra_loss(
                model, batch[sl], reverse_kl=config.pra_kl_reverse, loss_denom=denom
            )
            loss.backward()
            rep.loss = float(loss.item())
            reports.append(rep)
    elif task == "mlm":
        plan = plan_mlm(batch, rng, vocab, config.mask_rate)
        for sl in _chunks(n, parts):
            loss, rep = mlm_loss(
                model, batch[sl], vocab=vocab, plan=plan[sl], loss_denom=n
            )
            loss.backward()
            rep.loss = float(loss.item())
            reports.append(rep)
    elif task == "itm":
        plan = plan_itm(batch_source_ids, rng, config.itm_neg_rate)
        if config.itm_negative_scope == "corpus" and corpus is not None:
            donor_texts: list[torch.Tensor | None] = []
            for i, donor in enumerate(plan.donors):
                if donor is None or len(corpus) < 2:
                    plan.labels[i] = 1
                    plan.donors[i] = None
                    donor_texts.append(None)
                    continue
                while True:
                    j = int(torch.randint(len(corpus), (1,), generator=rng).item())
                    if j != batch_source_ids[i]:
                        break
                donor_texts.append(corpus[j].token_ids)
        else:
            donor_texts = [
                batch[d].token_ids if d is not None else None for d in plan.donors
            ]
        for sl in _chunks(n, parts):
            sub_plan = ItmPlan(labels=plan.labels[sl], donors=plan.donors[sl])
            loss, rep = itm_loss(
                model, batch[sl], plan=sub_plan, donor_texts=donor_texts[sl],
                loss_denom=n,
            )
            loss.backward()
            rep.loss = float(loss.item())
            reports.append(rep)
    else:
        raise ValueError(f"unknown task {task!r}")
    return _merge_reports(reports, task)


def train(
    pairs,
    annotations,
    lexicon: list[str],
    config: TrainConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Run the pretraining loop. Fully deterministic given (config, corpus):
    the metrics log and final checkpoint depend only on them."""
    config = dataclasses.replace(config)
    if config.k_cat is None or config.d_o is None:
        k_cat = max((p.category_id for a in annotations.values() for p in a.proposals),
                    default=-1) + 1
        d_o = next(
            (p.roi_feature.shape[0] for a in annotations.values() for p in a.proposals),
            0,
        )
        config.k_cat = config.k_cat if config.k_cat is not None else k_cat
        config.d_o = config.d_o if config.d_o is not None else d_o
    if pairs:
        config.in_channels = pairs[0].pixels.shape[2]
    config.validate()
    if not pairs:
        raise ValueError("corpus is empty")
    vocab = build_vocab([p.caption for p in pairs], config.min_count)
    embedder = hash_embedder(config.embedder_dim, config.embedder_seed)
    dtype = resolve_dtype(config.dtype)
    prepared = prepare_pairs(pairs, annotations, vocab, embedder, lexicon,
                             config.tau, dtype)
    model = build_model(config, len(vocab))
    sgd, adamw = make_optimizers(model, config)
    rng = torch.Generator().manual_seed(config.seed + 1)
    start_step = 0
    if resume is not None:
        if resume.hash != config_hash(config):
            print("warning: resuming from a checkpoint with a different config hash")
        restore(resume, model, sgd, adamw, rng)
        start_step = resume.step
    metrics: list[dict] = []
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if start_step > 0 else "w"
        log_file = open(os.path.join(out_dir, "metrics.jsonl"), mode, encoding="utf-8")
    try:
        for step in range(start_step, config.total_steps):
            lr_b, lr_t = lr_at(step, config)
            sgd.param_groups[0]["lr"] = lr_b
            adamw.param_groups[0]["lr"] = lr_t
            task = sample_task(config.task_weights, rng)
            idx = torch.randint(
                len(prepared), (config.batch_size,), generator=rng
            ).tolist()
            batch = [prepared[i] for i in idx]
            try:
                report = train_step(
                    model, batch, idx, task, config, rng, vocab, corpus=prepared
                )
            except FloatingPointError as exc:
                if out_dir is not None:
                    bad = snapshot(model, sgd, adamw, rng, step, config, vocab)
                    save_checkpoint(bad, os.path.join(out_dir, "diagnostic.ckpt"))
                raise RuntimeError(f"non-finite loss at step {step}: {exc}") from exc
            if not np.isfinite(report.loss):
                if out_dir is not None:
                    bad = snapshot(model, sgd, adamw, rng, step, config, vocab)
                    save_checkpoint(bad, os.path.join(out_dir, "diagnostic.ckpt"))
                raise RuntimeError(f"non-finite loss at step {step}")
            sgd.step()
            adamw.step()
            sgd.zero_grad(set_to_none=True)
            adamw.zero_grad(set_to_none=True)
            line = report.to_json_line(step)
            metrics.append(json.loads(line))
            if log_file is not None:
                log_file.write(line + "\n")
            if not quiet and (step % 100 == 0 or step == config.total_steps - 1):
                print(f"step {step} task {task} loss {report.loss:.4f}")
            if (
                out_dir is not None
                and config.checkpoint_every > 0
                and (step + 1) % config.checkpoint_every == 0
                and (step + 1) < config.total_steps
            ):
                ck = snapshot(model, sgd, adamw, rng, step + 1, config, vocab)
                save_checkpoint(ck, os.path.join(out_dir, f"step{step + 1}.ckpt"))
    finally:
        if log_file is not None:
            log_file.close()
    final = snapshot(model, sgd, adamw, rng, config.total_steps, config, vocab)
    if out_dir is not None:
        save_checkpoint(final, os.path.join(out_dir, "final.ckpt"))
    return TrainResult(
        checkpoint=final, metrics=metrics, model=model, vocab=vocab, prepared=prepared
    )


def load_model_from_checkpoint(
    ckpt: Checkpoint,
) -> tuple[PretrainModel, Vocabulary, TrainConfig]:
    """Rebuild the model, vocabulary, and config a checkpoint was trained with."""
    vocab = Vocabulary.from_lines(ckpt.vocab_lines)
    model = build_model(ckpt.config, len(vocab))
    restore(ckpt, model)
    return model, vocab, ckpt.config
