"""The four pretext objectives: object-guided masked vision modeling (with
knowledge-guided masking plus its random and standard ablation variants),
phrase-region alignment, masked language modeling, and image-text matching.

Each loss is a pure computation over a prepared batch; all randomness enters
through an explicit generator (or a precomputed plan, used by the trainer to
split batches across gradient-accumulation steps without re-drawing)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import DetectorAnnotation, ImageTextPair, PhraseSpan, extract_noun_phrases
from .encoder import TOTAL_STRIDE, Vocabulary, tokenize
from .knowledge import (
    SimilarityMatrix,
    masking_distribution,
    phrase_label_similarity,
    rasterize_mask,
)

if TYPE_CHECKING:
    from .model import PretrainModel

TASKS = ("omvm", "pra", "mlm", "itm")


class PretextHeads(nn.Module):
    """Task heads over final-layer states. mrc/mrfr are two-layer FC networks;
    mlm/itm are linear. smvm is the regression head for the StandardMVM
    ablation variant (predicts a cell's own pre-transformer feature)."""

    def __init__(self, d: int, k_cat: int, d_o: int, vocab_size: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.mrc = nn.Sequential(
            nn.Linear(d, d, dtype=dtype), nn.GELU(), nn.Linear(d, k_cat, dtype=dtype)
        )
        self.mrfr = nn.Sequential(
            nn.Linear(d, d, dtype=dtype), nn.GELU(), nn.Linear(d, d_o, dtype=dtype)
        )
        self.smvm = nn.Sequential(
            nn.Linear(d, d, dtype=dtype), nn.GELU(), nn.Linear(d, d, dtype=dtype)
        )
        self.mlm = nn.Linear(d, vocab_size, dtype=dtype)
        self.itm = nn.Linear(d, 1, dtype=dtype)


@dataclass
class LossReport:
    """One step's loss plus auxiliary metrics; serializes to a JSON line."""

    task: str
    loss: float
    metrics: dict[str, float] = field(default_factory=dict)
    masked_objects: list[int] | None = None
    masked_tokens: list[list[int]] | None = None
    skipped: int = 0

    def to_json_line(self, step: int | None = None) -> str:
        obj: dict = {} if step is None else {"step": step}
        obj["task"] = self.task
        obj["loss"] = self.loss
        obj["skipped"] = self.skipped
        obj.update(dict(sorted(self.metrics.items())))
        return json.dumps(obj, sort_keys=False)


@dataclass
class PreparedPair:
    """An (image, caption, annotation) triple with every derived artifact the
    losses need, precomputed once per corpus."""

    image_id: str
    caption: str
    pixels: torch.Tensor  # (C, H, W), model dtype
    token_ids: torch.Tensor  # (T,) long
    category_ids: torch.Tensor  # (N,) long
    roi_features: torch.Tensor  # (N, d_o)
    masks: torch.Tensor  # (N, L), {0,1} in model dtype
    grid_shape: tuple[int, int]
    spans: list[PhraseSpan]
    sim: SimilarityMatrix | None  # None when no phrases were found
    target_dist: torch.Tensor | None  # (|P|, N) row-softmax targets, constant
    mask_probs: torch.Tensor  # (N,) float64; uniform when no phrases
    phrase_object: list[int | None]  # planted ground-truth proposal per phrase

    @property
    def n_proposals(self) -> int:
        return self.category_ids.shape[0]

    @property
    def n_phrases(self) -> int:
        return len(self.spans)


def prepare_pair(
    pair: ImageTextPair,
    annotation: DetectorAnnotation,
    vocab: Vocabulary,
    embedder,
    lexicon: list[str],
    tau: float = 1.0,
    dtype: torch.dtype = torch.float64,
) -> PreparedPair:
    h_img, w_img = pair.pixels.shape[:2]
    grid_shape = (h_img // TOTAL_STRIDE, w_img // TOTAL_STRIDE)
    l_cells = grid_shape[0] * grid_shape[1]
    pixels = torch.as_tensor(pair.pixels, dtype=dtype).permute(2, 0, 1).contiguous()
    token_ids = tokenize(pair.caption, vocab)
    spans = extract_noun_phrases(pair.caption, lexicon)
    props = annotation.proposals
    n = len(props)
    category_ids = torch.tensor([p.category_id for p in props], dtype=torch.long)
    if n:
        roi = torch.stack([torch.as_tensor(p.roi_feature, dtype=dtype) for p in props])
        masks = torch.stack(
            [
                torch.as_tensor(
                    rasterize_mask(p.box, (h_img, w_img), grid_shape).flat,
                    dtype=dtype,
                )
                for p in props
            ]
        )
    else:
        roi = torch.zeros(0, 0, dtype=dtype)
        masks = torch.zeros(0, l_cells, dtype=dtype)
    sim = None
    target = None
    if spans and n:
        sim = phrase_label_similarity(spans, props, embedder, tau)
        target = torch.as_tensor(sim.row_softmax, dtype=dtype)
        probs = torch.as_tensor(masking_distribution(sim), dtype=torch.float64)
    elif n:
        probs = torch.full((n,), 1.0 / n, dtype=torch.float64)
    else:
        probs = torch.zeros(0, dtype=torch.float64)
    phrase_object: list[int | None] = []
    for span in spans:
        hits = [i for i, p in enumerate(props) if p.category_name.lower() == span.text]
        phrase_object.append(hits[0] if len(hits) == 1 else None)
    return PreparedPair(
        image_id=pair.image_id,
        caption=pair.caption,
        pixels=pixels,
        token_ids=token_ids,
        category_ids=category_ids,
        roi_features=roi,
        masks=masks,
        grid_shape=grid_shape,
        spans=spans,
        sim=sim,
        target_dist=target,
        mask_probs=probs,
        phrase_object=phrase_object,
    )


def prepare_pairs(
    pairs, annotations, vocab, embedder, lexicon, tau=1.0, dtype=torch.float64
) -> list[PreparedPair]:
    return [
        prepare_pair(p, annotations[p.annotation_id], vocab, embedder, lexicon, tau, dtype)
        for p in pairs
    ]


# ---------------------------------------------------------------------------
# sampling plans


def draw_masked_objects(
    probs: torch.Tensor, count: int, rng: torch.Generator
) -> torch.Tensor:
    """Draw object indices from a masking distribution (float64 probs)."""
    return torch.multinomial(probs, count, replacement=True, generator=rng)


def plan_omvm(
    batch: list[PreparedPair], rng: torch.Generator, style: str = "knowledge"
) -> list[list[int]]:
    """Per pair, the proposal indices to mask; [] marks a pair to skip.

    knowledge: one object drawn from the knowledge-guided masking distribution
    (uniform fallback when the caption has no phrases).
    random: each proposal independently with p=0.15, at least one forced.
    """
    plan: list[list[int]] = []
    for p in batch:
        if p.n_proposals == 0:
            plan.append([])
        elif style == "knowledge":
            plan.append([int(draw_masked_objects(p.mask_probs, 1, rng).item())])
        elif style == "random":
            u = torch.rand(p.n_proposals, generator=rng, dtype=torch.float64)
            chosen = (u < 0.15).nonzero(as_tuple=True)[0].tolist()
            if not chosen:
                chosen = [
                    int(torch.randint(p.n_proposals, (1,), generator=rng).item())
                ]
            plan.append(chosen)
        else:
            raise ValueError(f"unknown masking style {style!r}")
    return plan


def plan_standard_cells(
    batch: list[PreparedPair], rng: torch.Generator, rate: float = 0.15
) -> list[list[int]]:
    """StandardMVM: each grid cell independently with p=rate, one forced."""
    plan = []
    for p in batch:
        l_cells = p.masks.shape[1] if p.masks.ndim == 2 else 0
        if l_cells == 0:
            l_cells = p.grid_shape[0] * p.grid_shape[1]
        u = torch.rand(l_cells, generator=rng, dtype=torch.float64)
        chosen = (u < rate).nonzero(as_tuple=True)[0].tolist()
        if not chosen:
            chosen = [int(torch.randint(l_cells, (1,), generator=rng).item())]
        plan.append(chosen)
    return plan


def select_mlm_tokens(
    t_len: int, rng: torch.Generator, rate: float = 0.15
) -> tuple[list[int], list[str]]:
    """BERT-style selection: each token with p=rate; if none got selected,
    force one uniformly. Each selected token is masked (80%), replaced with a
    random vocabulary token (10%), or kept (10%)."""
    u = torch.rand(t_len, generator=rng, dtype=torch.float64)
    positions = (u < rate).nonzero(as_tuple=True)[0].tolist()
    if not positions:
        positions = [int(torch.randint(t_len, (1,), generator=rng).item())]
    ops = []
    rolls = torch.rand(len(positions), generator=rng, dtype=torch.float64)
    for r in rolls.tolist():
        ops.append("mask" if r < 0.8 else ("random" if r < 0.9 else "keep"))
    return positions, ops


@dataclass
class MlmPlan:
    input_ids: torch.Tensor  # (T,) with masking applied
    positions: list[int]
    labels: torch.Tensor  # (n_selected,) original ids
    ops: list[str]


def plan_mlm(
    batch: list[PreparedPair],
    rng: torch.Generator,
    vocab: Vocabulary,
    rate: float = 0.15,
) -> list[MlmPlan]:
    n_specials = len(vocab.special_ids)
    n_regular = len(vocab) - n_specials
    plans = []
    for p in batch:
        ids = p.token_ids.clone()
        positions, ops = select_mlm_tokens(ids.numel(), rng, rate)
        labels = ids[positions].clone()
        for pos, op in zip(positions, ops):
            if op == "mask":
                ids[pos] = vocab.mask_id
            elif op == "random":
                if n_regular > 0:
                    ids[pos] = n_specials + int(
                        torch.randint(n_regular, (1,), generator=rng).item()
                    )
        plans.append(MlmPlan(ids, positions, labels, ops))
    return plans


@dataclass
class ItmPlan:
    labels: list[int]  # 1 = matched
    donors: list[int | None]  # batch index supplying the replacement text


def plan_itm(
    source_ids: list[int],
    rng: torch.Generator,
    neg_rate: float = 0.5,
) -> ItmPlan:
    """Decide which pairs get their text replaced (label 0) and by whose.

    Donors are drawn uniformly from batch members whose underlying pair
    differs, so a text is never replaced by itself even when the batch drew
    the same pair twice. A pair with no eligible donor stays positive.
    """
    n = len(source_ids)
    if n < 2:
        raise ValueError("ITM needs a batch of size >= 2 to source replacement texts")
    labels: list[int] = []
    donors: list[int | None] = []
    flips = torch.rand(n, generator=rng, dtype=torch.float64)
    for i in range(n):
        if flips[i].item() < neg_rate:
            candidates = [j for j in range(n) if source_ids[j] != source_ids[i]]
            if candidates:
                pick = candidates[
                    int(torch.randint(len(candidates), (1,), generator=rng).item())
                ]
                labels.append(0)
                donors.append(pick)
                continue
        labels.append(1)
        donors.append(None)
    return ItmPlan(labels=labels, donors=donors)


def sample_task(weights, rng: torch.Generator) -> str:
    """Categorical draw over (omvm, pra, mlm, itm)."""
    w = torch.as_tensor(weights, dtype=torch.float64)
    if w.numel() != len(TASKS) or (w < 0).any():
        raise ValueError("weights must be 4 non-negative numbers")
    total = w.sum()
    if total.item() <= 0:
        raise ValueError("task weights must not all be zero")
    u = torch.rand((), generator=rng, dtype=torch.float64).item() * total.item()
    acc = 0.0
    for name, wi in zip(TASKS, w.tolist()):
        acc += wi
        if u < acc:
            return name
    return TASKS[-1]


# ---------------------------------------------------------------------------
# shared pieces


def _region_pools(h_v: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """(L, d) states and (N, L) binary masks -> (N, d) mean-pooled regions."""
    return (masks @ h_v) / masks.sum(dim=1, keepdim=True)


def _phrase_pools(h_w: torch.Tensor, spans: list[PhraseSpan]) -> torch.Tensor:
    return torch.stack([h_w[s.start : s.end].mean(dim=0) for s in spans])


def cross_modal_similarity(
    h_w: torch.Tensor,
    h_v: torch.Tensor,
    spans: list[PhraseSpan],
    masks: torch.Tensor,
) -> torch.Tensor:
    """Cosine similarity between pooled phrase and pooled region states,
    (|P|, N). This is the model-side similarity both PRA and the alignment
    probe score."""
    phrases = _phrase_pools(h_w, spans)
    regions = _region_pools(h_v, masks)
    phrases = phrases / phrases.norm(dim=1, keepdim=True).clamp_min(1e-12)
    regions = regions / regions.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return phrases @ regions.T


# ---------------------------------------------------------------------------
# losses


def omvm_loss(
    model: "PretrainModel",
    batch: list[PreparedPair],
    rng: torch.Generator | None = None,
    *,
    lam: float = 1.0,
    style: str = "knowledge",
    plan: list[list[int]] | None = None,
    loss_denom: int | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Masked-region classification + RoI-feature regression on one object
    (or object set) per pair, with the masked grid cells' content replaced by
    the learned visual mask vector before fusion.

    style="standard" switches to the ablation variant that masks random grid
    cells and regresses their own pre-transformer features.
    """
    if style == "standard":
        return _standard_mvm_loss(model, batch, rng, plan=plan, loss_denom=loss_denom)
    if plan is None:
        if rng is None:
            raise ValueError("either rng or plan must be provided")
        plan = plan_omvm(batch, rng, style)
    keep = [i for i, sel in enumerate(plan) if sel]
    skipped = len(batch) - len(keep)
    if not keep:
        raise ValueError("every pair in the batch has zero proposals")
    sub = [batch[i] for i in keep]
    sel = [plan[i] for i in keep]
    l_cells = sub[0].masks.shape[1]
    vis_mask = torch.zeros(len(sub), l_cells, dtype=torch.bool)
    for i, (p, chosen) in enumerate(zip(sub, sel)):
        vis_mask[i] = (p.masks[chosen].sum(dim=0) > 0)
    states = model.encode_prepared(sub, visual_mask=vis_mask)
    denom = loss_denom if loss_denom is not None else len(sub)
    total = None
    correct = 0
    n_objects = 0
    mrfr_sum = 0.0
    for i, (p, chosen) in enumerate(zip(sub, sel)):
        pools = _region_pools(states.h_v[i], p.masks[chosen])  # (k, d)
        logits = model.heads.mrc(pools)
        targets = p.category_ids[chosen]
        ce = F.cross_entropy(logits, targets, reduction="mean")
        pred_roi = model.heads.mrfr(pools)
        mrfr = ((pred_roi - p.roi_features[chosen]) ** 2).mean()
        pair_loss = ce + lam * mrfr
        total = pair_loss if total is None else total + pair_loss
        correct += int((logits.argmax(dim=1) == targets).sum().item())
        n_objects += len(chosen)
        mrfr_sum += float(mrfr.item())
    loss = total / denom
    report = LossReport(
        task="omvm",
        loss=float(loss.item()),
        metrics={
            "mrc_accuracy": correct / n_objects,
            "mrfr_mse": mrfr_sum / len(sub),
            "pairs": float(len(sub)),
        },
        masked_objects=[sel_i[0] for sel_i in sel],
        skipped=skipped,
    )
    return loss, report


def _standard_mvm_loss(model, batch, rng, *, plan=None, loss_denom=None):
    if plan is None:
        if rng is None:
            raise ValueError("either rng or plan must be provided")
        plan = plan_standard_cells(batch, rng)
    l_cells = batch[0].grid_shape[0] * batch[0].grid_shape[1]
    vis_mask = torch.zeros(len(batch), l_cells, dtype=torch.bool)
    for i, cells in enumerate(plan):
        vis_mask[i, cells] = True
    states = model.encode_prepared(batch, visual_mask=vis_mask)
    denom = loss_denom if loss_denom is not None else len(batch)
    total = None
    mse_sum = 0.0
    for i, cells in enumerate(plan):
        pred = model.heads.smvm(states.h_v[i, cells])
        target = states.backbone_feats[i, cells].detach()
        pair_loss = ((pred - target) ** 2).mean()
        total = pair_loss if total is None else total + pair_loss
        mse_sum += float(pair_loss.item())
    loss = total / denom
    report = LossReport(
        task="omvm",
        loss=float(loss.item()),
        metrics={"smvm_mse": mse_sum / len(batch), "pairs": float(len(batch))},
        masked_objects=None,
        skipped=0,
    )
    return loss, report


def pra_loss(
    model: "PretrainModel",
    batch: list[PreparedPair],
    *,
    reverse_kl: bool = False,
    loss_denom: int | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """KL between the model's phrase-region softmax and the external
    phrase-label softmax targets (constants; no gradient flows into them)."""
    keep = [i for i, p in enumerate(batch) if p.n_phrases >= 1 and p.n_proposals >= 1]
    skipped = len(batch) - len(keep)
    if not keep:
        raise ValueError("no pair in the batch has both phrases and proposals")
    sub = [batch[i] for i in keep]
    states = model.encode_prepared(sub)
    denom = loss_denom if loss_denom is not None else len(sub)
    total = None
    kl_sum = 0.0
    align_correct = 0
    align_total = 0
    for i, p in enumerate(sub):
        raw = cross_modal_similarity(
            states.h_w[i, : p.token_ids.numel()], states.h_v[i], p.spans, p.masks
        )
        log_pred = F.log_softmax(raw, dim=1)
        target = p.target_dist.detach()
        if reverse_kl:
            kl_rows = (target * (target.log() - log_pred)).sum(dim=1)
        else:
            pred = log_pred.exp()
            kl_rows = (pred * (log_pred - target.log())).sum(dim=1)
        pair_loss = kl_rows.mean()
        total = pair_loss if total is None else total + pair_loss
        kl_sum += float(pair_loss.item())
        for z, gt in enumerate(p.phrase_object):
            if gt is not None:
                align_total += 1
                align_correct += int(raw[z].argmax().item() == gt)
    loss = total / denom
    metrics = {"pra_mean_kl": kl_sum / len(sub), "pairs": float(len(sub))}
    if align_total:
        metrics["pra_alignment_acc"] = align_correct / align_total
    report = LossReport(task="pra", loss=float(loss.item()), metrics=metrics,
                        skipped=skipped)
    return loss, report


def mlm_loss(
    model: "PretrainModel",
    batch: list[PreparedPair],
    rng: torch.Generator | None = None,
    *,
    vocab: Vocabulary,
    rate: float = 0.15,
    plan: list[MlmPlan] | None = None,
    loss_denom: int | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Cross-entropy on the original ids of the selected word tokens, with the
    image and unmasked context visible."""
    if plan is None:
        if rng is None:
            raise ValueError("either rng or plan must be provided")
        plan = plan_mlm(batch, rng, vocab, rate)
    states = model.encode_prepared(batch, ids_override=[pl.input_ids for pl in plan])
    denom = loss_denom if loss_denom is not None else len(batch)
    total = None
    correct = 0
    n_selected = 0
    for i, pl in enumerate(plan):
        logits = model.heads.mlm(states.h_w[i, pl.positions])
        pair_loss = F.cross_entropy(logits, pl.labels, reduction="mean")
        total = pair_loss if total is None else total + pair_loss
        correct += int((logits.argmax(dim=1) == pl.labels).sum().item())
        n_selected += len(pl.positions)
    loss = total / denom
    report = LossReport(
        task="mlm",
        loss=float(loss.item()),
        metrics={"mlm_accuracy": correct / n_selected, "pairs": float(len(batch))},
        masked_tokens=[pl.positions for pl in plan],
    )
    return loss, report


def itm_loss(
    model: "PretrainModel",
    batch: list[PreparedPair],
    rng: torch.Generator | None = None,
    *,
    neg_rate: float = 0.5,
    plan: ItmPlan | None = None,
    donor_texts: list[torch.Tensor] | None = None,
    source_ids: list[int] | None = None,
    loss_denom: int | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Binary cross-entropy on matched-vs-replaced pairs, scored from the
    final [cls] state. No token or region masking is applied."""
    if plan is None:
        if len(batch) < 2:
            raise ValueError("ITM needs a batch of size >= 2")
        if rng is None:
            raise ValueError("either rng or plan must be provided")
        if source_ids is None:
            source_ids = list(range(len(batch)))
        plan = plan_itm(source_ids, rng, neg_rate)
    ids_override = []
    for i, donor in enumerate(plan.donors):
        if donor is None:
            ids_override.append(batch[i].token_ids)
        elif donor_texts is not None:
            ids_override.append(donor_texts[i])
        else:
            ids_override.append(batch[donor].token_ids)
    states = model.encode_prepared(batch, ids_override=ids_override)
    logits = model.heads.itm(states.h_cls).squeeze(-1)
    labels = torch.tensor(plan.labels, dtype=logits.dtype)
    denom = loss_denom if loss_denom is not None else len(batch)
    loss = F.binary_cross_entropy_with_logits(logits, labels, reduction="sum") / denom
    accuracy = float(((logits > 0).to(labels.dtype) == labels).double().mean().item())
    report = LossReport(
        task="itm",
        loss=float(loss.item()),
        metrics={
            "itm_accuracy": accuracy,
            "itm_label_mean": float(labels.mean().item()),
            "pairs": float(len(batch)),
        },
    )
    return loss, report


LOSS_FUNCTIONS = {
    "omvm": omvm_loss,
    "pra": pra_loss,
    "mlm": mlm_loss,
    "itm": itm_loss,
}
