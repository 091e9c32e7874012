"""Command-line entry point: corpus generation, pretraining, probing,
ablation, and attention-map export, each wrapped in a reproducible run
directory with a manifest."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import torch

from . import corpus as corpus_mod
from . import probe as probe_mod
from .fusion import attention_map, save_attention_csv, save_attention_pgm
from .knowledge import hash_embedder
from .model import resolve_dtype
from .pretext import prepare_pairs
from .trainer import (
    TrainConfig,
    config_hash,
    load_checkpoint,
    load_model_from_checkpoint,
    train,
)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str) -> str:
    """Order-independent content hash of a directory tree."""
    entries = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            entries.append((rel, _sha256_file(full)))
    h = hashlib.sha256()
    for rel, digest in sorted(entries):
        h.update(rel.encode("utf-8"))
        h.update(digest.encode("ascii"))
    return h.hexdigest()


def write_manifest(out_dir: str, payload: dict) -> None:
    payload = dict(payload)
    payload["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    artifacts = {}
    for dirpath, _, filenames in os.walk(out_dir):
        for name in filenames:
            if name == "manifest.json":
                continue
            full = os.path.join(dirpath, name)
            artifacts[os.path.relpath(full, out_dir)] = _sha256_file(full)
    payload["artifacts"] = dict(sorted(artifacts.items()))
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def _start_manifest(command: str, args: argparse.Namespace) -> dict:
    return {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def _load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return TrainConfig.from_json_dict(json.load(f))


def _load_corpus_with_meta(root: str):
    meta = corpus_mod.load_meta(root)
    pairs, annotations = corpus_mod.load_corpus(root)
    return meta, pairs, annotations


def cmd_generate(args) -> int:
    if args.spec is not None:
        with open(args.spec, "r", encoding="utf-8") as f:
            spec = corpus_mod.SyntheticSceneSpec.from_json(json.load(f))
    else:
        spec = corpus_mod.SyntheticSceneSpec()
        spec.validate()
    manifest = _start_manifest("generate", args)
    pairs, annotations = corpus_mod.generate_synthetic(spec, args.count, args.seed)
    meta = corpus_mod.corpus_meta_for_spec(spec)
    os.makedirs(args.out, exist_ok=True)
    corpus_mod.save_corpus(pairs, annotations, args.out, meta)
    with open(os.path.join(args.out, "scene_spec.json"), "w", encoding="utf-8") as f:
        json.dump(spec.to_json(), f, indent=2)
        f.write("\n")
    manifest["seed"] = args.seed
    manifest["corpus_hash"] = hash_tree(args.out)
    write_manifest(args.out, manifest)
    print(f"generated {len(pairs)} pairs in {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args.config)
    meta, pairs, annotations = _load_corpus_with_meta(args.corpus)
    if config.k_cat is None:
        config.k_cat = meta.k_cat
    if config.d_o is None:
        config.d_o = meta.d_o
    if pairs:
        config.in_channels = pairs[0].pixels.shape[2]
    if args.seed is not None:
        config.seed = args.seed
    manifest = _start_manifest("pretrain", args)
    manifest["config_path"] = args.config
    manifest["config_file_hash"] = _sha256_file(args.config)
    manifest["corpus_hash"] = hash_tree(args.corpus)
    manifest["seed"] = config.seed
    resume = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
        if resume.hash != config_hash(config) and not args.force:
            print(
                "error: checkpoint config hash differs from the supplied config; "
                "pass --force to resume anyway",
                file=sys.stderr,
            )
            return 1
    os.makedirs(args.out, exist_ok=True)
    result = train(pairs, annotations, meta.lexicon, config, out_dir=args.out,
                   resume=resume, quiet=args.quiet)
    manifest["config_hash"] = result.checkpoint.hash
    manifest["final_step"] = result.checkpoint.step
    write_manifest(args.out, manifest)
    print(f"trained {result.checkpoint.step} steps; checkpoint in {args.out}/final.ckpt")
    return 0


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab, config = load_model_from_checkpoint(ckpt)
    model.eval()
    meta, pairs, annotations = _load_corpus_with_meta(args.corpus)
    embedder = hash_embedder(config.embedder_dim, config.embedder_seed)
    prepared = prepare_pairs(pairs, annotations, vocab, embedder, meta.lexicon,
                             config.tau, resolve_dtype(config.dtype))
    manifest = _start_manifest("probe", args)
    manifest["corpus_hash"] = hash_tree(args.corpus)
    manifest["checkpoint_hash"] = _sha256_file(args.checkpoint)
    manifest["seed"] = args.seed
    os.makedirs(args.out, exist_ok=True)
    retrieval = probe_mod.probe_retrieval(model, prepared, args.pool, args.seed)
    alignment = probe_mod.probe_alignment(model, prepared)
    results = {
        "itm_accuracy": probe_mod.probe_itm_accuracy(model, prepared, args.seed),
        "mlm_accuracy": probe_mod.probe_mlm_accuracy(model, prepared, vocab, args.seed),
    }
    results.update(retrieval.to_json_dict())
    results.update(alignment.to_json_dict())
    probe_mod.write_results(
        [results],
        os.path.join(args.out, "results.json"),
        os.path.join(args.out, "results.txt"),
    )
    write_manifest(args.out, manifest)
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    meta, pairs, annotations = _load_corpus_with_meta(args.corpus)
    eval_root = args.eval_corpus if args.eval_corpus else args.corpus
    _, eval_pairs, eval_annotations = _load_corpus_with_meta(eval_root)
    if config.k_cat is None:
        config.k_cat = meta.k_cat
    if config.d_o is None:
        config.d_o = meta.d_o
    if args.seed is not None:
        config.seed = args.seed
    cells = args.tasks.split(",") if args.tasks else None
    manifest = _start_manifest("ablate", args)
    manifest["config_file_hash"] = _sha256_file(args.config)
    manifest["corpus_hash"] = hash_tree(args.corpus)
    manifest["eval_corpus_hash"] = hash_tree(eval_root)
    manifest["seed"] = config.seed
    os.makedirs(args.out, exist_ok=True)
    rows = probe_mod.run_ablation(
        pairs, annotations, meta.lexicon, eval_pairs, eval_annotations, config,
        pool_size=args.pool, cells=cells, probe_seed=args.seed,
    )
    probe_mod.write_results(
        rows,
        os.path.join(args.out, "ablation.json"),
        os.path.join(args.out, "ablation.txt"),
    )
    write_manifest(args.out, manifest)
    print(probe_mod.format_table(rows))
    return 0


def cmd_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab, config = load_model_from_checkpoint(ckpt)
    model.eval()
    meta, pairs, annotations = _load_corpus_with_meta(args.corpus)
    embedder = hash_embedder(config.embedder_dim, config.embedder_seed)
    by_image = {}
    for pair in pairs:
        by_image.setdefault(pair.image_id, pair)
    requests = []
    for item in args.requests.split(","):
        image_id, _, word = item.strip().partition(":")
        if not word:
            raise ValueError(f"bad request {item!r}; expected image_id:word_index")
        if image_id not in by_image:
            raise ValueError(f"image_id {image_id!r} not in corpus")
        requests.append((image_id, int(word)))
    manifest = _start_manifest("attn", args)
    manifest["checkpoint_hash"] = _sha256_file(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    head = None if args.head == "mean" else int(args.head)
    with torch.inference_mode():
        for image_id, word_index in requests:
            pair = by_image[image_id]
            prepared = prepare_pairs(
                [pair], annotations, vocab, embedder, meta.lexicon, config.tau,
                resolve_dtype(config.dtype),
            )
            states = model.encode_prepared(prepared, retain_attn=True).pair_states(0)
            grid = attention_map(states, word_index, layer=args.layer, head=head)
            base = os.path.join(args.out, f"{image_id}_w{word_index}")
            save_attention_csv(grid, base + ".csv")
            save_attention_pgm(grid, base + ".pgm")
    write_manifest(args.out, manifest)
    print(f"wrote {len(requests)} attention maps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridvlp",
        description="Desk-scale multimodal pretraining on grid features with "
        "object-knowledge distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic grounded corpus")
    g.add_argument("--spec", help="scene spec JSON (defaults to the built-in spec)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true",
                   help="resume even if the config hash differs")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("probe", help="evaluate a checkpoint on a corpus")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--pool", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_probe)

    a = sub.add_parser("ablate", help="train and probe pretext-task subsets")
    a.add_argument("--config", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--eval-corpus", dest="eval_corpus", default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--pool", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tasks", help="comma list of ablation cells to run")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("attn", help="export word-to-image attention maps")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--corpus", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--requests", required=True,
                   help="comma list of image_id:word_index")
    m.add_argument("--layer", type=int, default=-1)
    m.add_argument("--head", default="mean", help="head index or 'mean'")
    m.set_defaults(func=cmd_attn)
    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("KDVLP_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: KDVLP_THREADS must be an integer, got {threads!r}",
                  file=sys.stderr)
            return 1
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line cause, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
