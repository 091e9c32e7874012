"""Quantitative probes over pretrained representations: ITM-scored retrieval,
phrase-region alignment accuracy against planted ground truth, held-out ITM
and MLM accuracy, and the pretext-task ablation harness."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch

from .model import PretrainModel
from .pretext import (
    PreparedPair,
    cross_modal_similarity,
    itm_loss,
    mlm_loss,
    plan_itm,
)
from .trainer import TrainConfig, TrainResult, train

_SCORE_CHUNK = 64


@dataclass
class RetrievalResult:
    pool_size: int
    n_queries: int
    i2t: dict[str, float]  # {"r1": ..., "r5": ..., "r10": ...}
    t2i: dict[str, float]
    score_matrices: list[np.ndarray]

    def to_json_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "n_queries": self.n_queries,
            "i2t_r1": self.i2t["r1"],
            "i2t_r5": self.i2t["r5"],
            "i2t_r10": self.i2t["r10"],
            "t2i_r1": self.t2i["r1"],
            "t2i_r5": self.t2i["r5"],
            "t2i_r10": self.t2i["r10"],
        }


@dataclass
class AlignmentResult:
    accuracy: float
    mean_rank: float  # 1-based
    count: int

    def to_json_dict(self) -> dict:
        return {
            "alignment_accuracy": self.accuracy,
            "alignment_mean_rank": self.mean_rank,
            "alignment_count": self.count,
        }


def _rank_of(scores: np.ndarray, true_index: int) -> int:
    """Descending-score rank of the true candidate; ties broken by index."""
    s_true = scores[true_index]
    better = int((scores > s_true).sum())
    tied_before = int((scores[:true_index] == s_true).sum())
    return better + tied_before


def _recalls(ranks: list[int]) -> dict[str, float]:
    arr = np.asarray(ranks)
    return {f"r{k}": float((arr < k).mean()) for k in (1, 5, 10)}


def score_pool(model: PretrainModel, pool: list[PreparedPair]) -> np.ndarray:
    """ITM logits for every (image, text) combination in the pool."""
    n = len(pool)
    scores = np.zeros((n, n), dtype=np.float64)
    with torch.inference_mode():
        feats, grid_shape = model.backbone_features(pool)
        for i in range(n):
            for start in range(0, n, _SCORE_CHUNK):
                stop = min(start + _SCORE_CHUNK, n)
                reps = feats[i].unsqueeze(0).expand(stop - start, -1, -1)
                ids = [pool[j].token_ids for j in range(start, stop)]
                states = model.fuse_features(reps, grid_shape, ids)
                logits = model.heads.itm(states.h_cls).squeeze(-1)
                scores[i, start:stop] = logits.double().cpu().numpy()
    return scores


def probe_retrieval(
    model: PretrainModel,
    prepared: list[PreparedPair],
    pool_size: int,
    seed: int = 0,
) -> RetrievalResult:
    """Zero-shot retrieval through the pretrained ITM head: the eval corpus is
    shuffled and cut into disjoint pools; within each pool every candidate is
    scored against every query and ranked descending (ties by index)."""
    if pool_size < 2:
        raise ValueError("pool_size must be >= 2")
    if len(prepared) < pool_size:
        raise ValueError(
            f"eval corpus has {len(prepared)} pairs, fewer than pool_size {pool_size}"
        )
    order = torch.randperm(
        len(prepared), generator=torch.Generator().manual_seed(seed)
    ).tolist()
    n_pools = len(prepared) // pool_size
    matrices = []
    i2t_ranks: list[int] = []
    t2i_ranks: list[int] = []
    for p in range(n_pools):
        members = [prepared[i] for i in order[p * pool_size : (p + 1) * pool_size]]
        scores = score_pool(model, members)
        matrices.append(scores)
        for i in range(pool_size):
            i2t_ranks.append(_rank_of(scores[i, :], i))
            t2i_ranks.append(_rank_of(scores[:, i], i))
    return RetrievalResult(
        pool_size=pool_size,
        n_queries=len(i2t_ranks),
        i2t=_recalls(i2t_ranks),
        t2i=_recalls(t2i_ranks),
        score_matrices=matrices,
    )


def probe_alignment(
    model: PretrainModel, prepared: list[PreparedPair], batch_size: int = 32
) -> AlignmentResult:
    """Fraction of phrases whose best cross-modal region is the planted
    object, scored exactly as the alignment loss scores them."""
    correct = 0
    total = 0
    rank_sum = 0
    with torch.inference_mode():
        for start in range(0, len(prepared), batch_size):
            chunk = [
                p
                for p in prepared[start : start + batch_size]
                if p.n_phrases >= 1 and p.n_proposals >= 1
            ]
            if not chunk:
                continue
            states = model.encode_prepared(chunk)
            for i, p in enumerate(chunk):
                raw = cross_modal_similarity(
                    states.h_w[i, : p.token_ids.numel()], states.h_v[i], p.spans, p.masks
                )
                sims = raw.double().cpu().numpy()
                for z, gt in enumerate(p.phrase_object):
                    if gt is None:
                        continue
                    rank = _rank_of(sims[z], gt)
                    total += 1
                    correct += int(rank == 0)
                    rank_sum += rank + 1
    if total == 0:
        raise ValueError("no pair with planted phrase-object ground truth")
    return AlignmentResult(
        accuracy=correct / total, mean_rank=rank_sum / total, count=total
    )


def probe_itm_accuracy(
    model: PretrainModel,
    prepared: list[PreparedPair],
    seed: int = 0,
    neg_rate: float = 0.5,
    batch_size: int = 32,
) -> float:
    """Matched-vs-mismatched classification accuracy of the ITM head on the
    eval corpus with planned 50% negatives."""
    rng = torch.Generator().manual_seed(seed)
    correct = 0.0
    total = 0
    with torch.inference_mode():
        for start in range(0, len(prepared) - 1, batch_size):
            batch = prepared[start : start + batch_size]
            if len(batch) < 2:
                break
            plan = plan_itm(list(range(start, start + len(batch))), rng, neg_rate)
            _, rep = itm_loss(model, batch, plan=plan)
            correct += rep.metrics["itm_accuracy"] * len(batch)
            total += len(batch)
    return correct / total


def probe_mlm_accuracy(
    model: PretrainModel,
    prepared: list[PreparedPair],
    vocab,
    seed: int = 0,
    rate: float = 0.15,
    batch_size: int = 32,
) -> float:
    """Masked-token prediction accuracy on the eval corpus."""
    rng = torch.Generator().manual_seed(seed)
    correct = 0.0
    total = 0
    with torch.inference_mode():
        for start in range(0, len(prepared), batch_size):
            batch = prepared[start : start + batch_size]
            if not batch:
                break
            _, rep = mlm_loss(model, batch, rng, vocab=vocab, rate=rate)
            n = sum(len(toks) for toks in rep.masked_tokens)
            correct += rep.metrics["mlm_accuracy"] * n
            total += n
    return correct / total


# ---------------------------------------------------------------------------
# ablation harness


ABLATION_CELLS: dict[str, dict] = {
    "itm+mlm": {"task_weights": (0.0, 0.0, 0.5, 0.5), "mvm_style": "knowledge"},
    "itm+mlm+standardmvm": {
        "task_weights": (1 / 3, 0.0, 1 / 3, 1 / 3),
        "mvm_style": "standard",
    },
    "itm+mlm+randommvm": {
        "task_weights": (1 / 3, 0.0, 1 / 3, 1 / 3),
        "mvm_style": "random",
    },
    "itm+mlm+omvm": {
        "task_weights": (1 / 3, 0.0, 1 / 3, 1 / 3),
        "mvm_style": "knowledge",
    },
    "itm+mlm+omvm+pra": {
        "task_weights": (0.25, 0.25, 0.25, 0.25),
        "mvm_style": "knowledge",
    },
}


def evaluate_checkpoint_result(
    result: TrainResult,
    eval_prepared: list[PreparedPair],
    pool_size: int,
    probe_seed: int = 0,
) -> dict:
    model = result.model
    model.eval()
    retrieval = probe_retrieval(model, eval_prepared, pool_size, probe_seed)
    alignment = probe_alignment(model, eval_prepared)
    itm_acc = probe_itm_accuracy(model, eval_prepared, probe_seed)
    mlm_acc = probe_mlm_accuracy(model, eval_prepared, result.vocab, probe_seed)
    out = {"itm_accuracy": itm_acc, "mlm_accuracy": mlm_acc}
    out.update(retrieval.to_json_dict())
    out.update(alignment.to_json_dict())
    return out


def run_ablation(
    pairs,
    annotations,
    lexicon: list[str],
    eval_pairs,
    eval_annotations,
    base_config: TrainConfig,
    pool_size: int = 50,
    cells: list[str] | None = None,
    probe_seed: int = 0,
    out_dir: str | None = None,
) -> list[dict]:
    """Train one model per pretext-task subset with shared seed/data/steps and
    probe each; returns one result row per cell."""
    from .knowledge import hash_embedder
    from .pretext import prepare_pairs
    from .encoder import build_vocab
    from .model import resolve_dtype

    names = list(ABLATION_CELLS) if cells is None else cells
    unknown = [n for n in names if n not in ABLATION_CELLS]
    if unknown:
        raise ValueError(f"unknown ablation cells: {unknown}")
    rows = []
    for name in names:
        spec = ABLATION_CELLS[name]
        cfg = dataclasses.replace(
            base_config,
            task_weights=spec["task_weights"],
            mvm_style=spec["mvm_style"],
        )
        result = train(pairs, annotations, lexicon, cfg,
                       out_dir=None if out_dir is None else f"{out_dir}/{name}")
        vocab = result.vocab
        embedder = hash_embedder(cfg.embedder_dim, cfg.embedder_seed)
        eval_prepared = prepare_pairs(
            eval_pairs, eval_annotations, vocab, embedder, lexicon, cfg.tau,
            resolve_dtype(cfg.dtype),
        )
        row = {"cell": name}
        row.update(evaluate_checkpoint_result(result, eval_prepared, pool_size,
                                              probe_seed))
        rows.append(row)
    return rows


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Aligned-column text table over a list of result rows."""
    if not rows:
        return ""
    if columns is None:
        columns = list(rows[0].keys())
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [
        max(len(columns[j]), max(len(row[j]) for row in cells))
        for j in range(len(columns))
    ]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_results(rows: list[dict], json_path: str, text_path: str) -> None:
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(format_table(rows) + "\n")
