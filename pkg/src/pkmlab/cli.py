"""Command-line harness.

    pkmlab <pretrain|graft|finetune|analyze|classdiv|bench> --config cfg.json
           [--out dir] [--seed n]

Configs are JSON; schema violations are reported with the offending field
path. Every command writes run_manifest.json into the output directory
before any other output, so a run is reproducible from manifest + corpus.
The output directory comes from --out, else $PKMLAB_OUT, else ./pkmlab_out.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from importlib import metadata
from pathlib import Path
from statistics import median

import numpy as np

from . import numerics as nm
from .data import (
    build_vocab,
    classification_examples,
    corpus_blocks,
    load_labeled_tsv,
    load_vocab,
    read_corpus,
    save_vocab,
    split_held_out,
)
from .encoder import (
    EncoderConfig,
    attach_classifier,
    build_encoder,
    default_memory_positions,
    encoder_forward,
    memory_block_forward,
)
from .metrics import (
    class_divergence,
    utilization_report,
    write_utilization_csv,
    write_utilization_json,
)
from .pkm import ExhaustiveSearch, MemoryConfig, _product_topk_batch
from .train import (
    TrainConfig,
    class_usage_logs,
    finetune,
    graft_from_checkpoint,
    load_checkpoint,
    pretrain,
    _fresh_logs,
)

COMMANDS = ("pretrain", "graft", "finetune", "analyze", "classdiv", "bench")


class ConfigError(ValueError):
    """Schema violation, message prefixed with the field path."""


def _get(cfg: dict, path: str, kind, default=...):
    node = cfg
    parts = path.split(".")
    for i, part in enumerate(parts):
        if not isinstance(node, dict):
            raise ConfigError(f"{'.'.join(parts[:i])}: expected an object")
        if part not in node:
            if default is ...:
                raise ConfigError(f"{path}: required field is missing")
            return default
        node = node[part]
    if kind is float and isinstance(node, int) and not isinstance(node, bool):
        node = float(node)
    bad_bool = isinstance(node, bool) and kind is not bool  # bool is an int subclass
    if kind is not None and (bad_bool or not isinstance(node, kind)):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {node!r}")
    return node


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("top level: expected a JSON object")
    return cfg


def parse_memory_config(cfg: dict, model_dim: int) -> MemoryConfig:
    mem = _get(cfg, "model.memory", dict, {})
    kw = dict(
        codebook_size=_get(cfg, "model.memory.C", int, 32) if mem else 32,
        heads=_get(cfg, "model.memory.heads", int, 2) if mem else 2,
        top_k=_get(cfg, "model.memory.k", int, 8) if mem else 8,
        key_dim=_get(cfg, "model.memory.d_k", int, 32) if mem else 32,
        batch_norm=_get(cfg, "model.memory.batch_norm", bool, True) if mem else True,
        value_init=_get(cfg, "model.memory.value_init", str, "gaussian") if mem else "gaussian",
    )
    try:
        return MemoryConfig(value_dim=model_dim, **kw)
    except ValueError as exc:
        raise ConfigError(f"model.memory: {exc}") from exc


def parse_encoder_config(cfg: dict, vocab_size: int, variant: str,
                         num_classes: int | None = None) -> EncoderConfig:
    layers = _get(cfg, "model.layers", int, 4)
    model_dim = _get(cfg, "model.d_model", int, 128)
    positions = _get(cfg, "model.memory_positions", list, None)
    if positions is None:
        positions = list(default_memory_positions(layers))
    if not all(isinstance(p, int) and not isinstance(p, bool) for p in positions):
        raise ConfigError("model.memory_positions: expected a list of ints")
    arch_variant = "ffn" if variant == "ffn" else ("pkm" if variant == "pkm" else "resm")
    try:
        return EncoderConfig(
            vocab_size=vocab_size,
            layers=layers,
            model_dim=model_dim,
            attn_heads=_get(cfg, "model.attn_heads", int, 4),
            ffn_dim=_get(cfg, "model.ffn_dim", int, 512),
            max_seq_len=_get(cfg, "model.max_seq_len", int, 64),
            memory_positions=tuple(positions),
            memory=parse_memory_config(cfg, model_dim),
            memory_variant=arch_variant,
            dropout=_get(cfg, "model.dropout", float, 0.1),
            num_classes=num_classes,
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def parse_train_config(cfg: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(
            steps=_get(cfg, "train.steps", int, 2000),
            batch_size=_get(cfg, "train.batch_size", int, 32),
            seq_len=_get(cfg, "train.seq_len", int, 64),
            base_lr=_get(cfg, "train.base_lr", float, 1e-4),
            memory_lr=_get(cfg, "train.memory_lr", float, 1e-3),
            warmup_steps=_get(cfg, "train.warmup_steps", int, 100),
            seed=seed,
            checkpoint_interval=_get(cfg, "train.checkpoint_interval", int, 200),
            eval_interval=_get(cfg, "train.eval_interval", int, 100),
            eval_batches=_get(cfg, "train.eval_batches", int, 8),
            mask_prob=_get(cfg, "train.mask_prob", float, 0.15),
            variant=_get(cfg, "train.variant", str, "resm"),
            init_from=_get(cfg, "train.init_from", str, None),
            freeze_memory=_get(cfg, "train.freeze_memory", bool, False),
            mem_optimizer=_get(cfg, "train.mem_optimizer", str, "adam"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"train: {exc}") from exc


def resolve_out(arg_out: str | None) -> Path:
    out = arg_out or os.environ.get("PKMLAB_OUT") or "pkmlab_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(out_dir: Path, command: str, cfg: dict, seed: int,
                       outputs: dict[str, str]) -> None:
    try:
        build = metadata.version("pkmlab")
    except metadata.PackageNotFoundError:
        build = "unpackaged"
    manifest = {
        "command": command,
        "build": build,
        "seed": seed,
        "config": cfg,
        "outputs": outputs,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _prepare_corpus(cfg: dict, out_dir: Path, seq_len: int):
    corpus_path = _get(cfg, "corpus", str)
    mode = _get(cfg, "vocab.mode", str, "word")
    max_size = _get(cfg, "vocab.max_size", int, 8192)
    lines = read_corpus(corpus_path)
    vocab_file = _get(cfg, "vocab.file", str, None)
    vocab = load_vocab(vocab_file) if vocab_file else build_vocab(lines, mode, max_size)
    save_vocab(vocab, out_dir / "vocab.txt")
    eval_fraction = _get(cfg, "train.eval_fraction", float, 0.05)
    train_lines, eval_lines = split_held_out(lines, eval_fraction)
    train_blocks = corpus_blocks(train_lines, vocab, mode, seq_len)
    eval_blocks = corpus_blocks(eval_lines, vocab, mode, seq_len)
    return vocab, mode, train_blocks, eval_blocks


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: dict, out_dir: Path, seed: int) -> int:
    train_cfg = parse_train_config(cfg, seed)
    write_run_manifest(out_dir, "pretrain", cfg, seed, {
        "checkpoints": "checkpoints/", "metrics": "metrics.jsonl",
        "utilization": "utilization.csv", "staleness": "staleness.csv",
        "vocab": "vocab.txt",
    })
    vocab, _, train_blocks, eval_blocks = _prepare_corpus(cfg, out_dir, train_cfg.seq_len)
    if train_cfg.init_from:
        base_manifest = json.loads(
            (Path(train_cfg.init_from) / "manifest.json").read_text()
        )
        base_dim = base_manifest["config"]["model_dim"]
        model = graft_from_checkpoint(
            train_cfg.init_from, train_cfg, parse_memory_config(cfg, base_dim)
        )
    else:
        enc_cfg = parse_encoder_config(cfg, len(vocab), train_cfg.variant)
        model = build_encoder(enc_cfg, seed)
    result = pretrain(model, train_blocks, eval_blocks, train_cfg, out_dir)
    final = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"checkpoints": len(result.checkpoints), **final}))
    return 0


def cmd_graft(cfg: dict, out_dir: Path, seed: int) -> int:
    train_cfg = parse_train_config(cfg, seed)
    if not train_cfg.init_from:
        raise ConfigError("train.init_from: graft requires a base checkpoint path")
    if train_cfg.variant == "ffn":
        raise ConfigError("train.variant: graft target must be a memory variant")
    return cmd_pretrain(cfg, out_dir, seed)


def cmd_finetune(cfg: dict, out_dir: Path, seed: int) -> int:
    train_cfg = parse_train_config(cfg, seed)
    ckpt = _get(cfg, "task.checkpoint", str)
    dataset = _get(cfg, "task.dataset", str)
    num_classes = _get(cfg, "task.num_classes", int, 2)
    vocab = load_vocab(_get(cfg, "task.vocab", str))
    mode = _get(cfg, "vocab.mode", str, "word")
    write_run_manifest(out_dir, "finetune", cfg, seed, {
        "report": "finetune.json", "utilization": "utilization.csv",
    })
    base, _ = load_checkpoint(ckpt)
    model = attach_classifier(base, num_classes, seed)
    seq_len = min(train_cfg.seq_len, model.config.max_seq_len)
    texts, labels = load_labeled_tsv(dataset)
    tokens, labels_arr, pad_mask = classification_examples(texts, labels, vocab, mode, seq_len)
    eval_path = _get(cfg, "task.eval_dataset", str, None)
    eval_sets = {}
    if eval_path:
        etexts, elabels = load_labeled_tsv(eval_path)
        et, el, em = classification_examples(etexts, elabels, vocab, mode, seq_len)
        eval_sets = {"eval_tokens": et, "eval_labels": el, "eval_pad_mask": em}
    result = finetune(model, tokens, labels_arr, pad_mask, train_cfg, **eval_sets)
    rows = utilization_report(result.eval_logs)
    write_utilization_csv(out_dir / "utilization.csv", rows)
    report = {"accuracy": result.accuracy, "utilization": rows,
              "freeze_memory": train_cfg.freeze_memory}
    (out_dir / "finetune.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps({"accuracy": result.accuracy}))
    return 0


def cmd_analyze(cfg: dict, out_dir: Path, seed: int) -> int:
    ckpt = _get(cfg, "analyze.checkpoint", str)
    write_run_manifest(out_dir, "analyze", cfg, seed, {
        "report": "analysis.json", "utilization": "utilization.csv",
    })
    model, step = load_checkpoint(ckpt)
    vocab = load_vocab(_get(cfg, "analyze.vocab", str))
    mode = _get(cfg, "vocab.mode", str, "word")
    seq_len = min(_get(cfg, "train.seq_len", int, 64), model.config.max_seq_len)
    lines = read_corpus(_get(cfg, "corpus", str))
    blocks = corpus_blocks(lines, vocab, mode, seq_len)
    batch_size = _get(cfg, "train.batch_size", int, 32)
    max_batches = _get(cfg, "analyze.batches", int, 16)

    logs = _fresh_logs(model)
    n = min(len(blocks), batch_size * max_batches)
    for start in range(0, n, batch_size):
        batch = blocks[start : start + batch_size]
        _, accesses, _ = encoder_forward(model, batch, train_mode=False)
        for pos, access in accesses:
            logs[pos].record(access)
    rows = utilization_report(logs)
    write_utilization_csv(out_dir / "utilization.csv", rows)
    write_utilization_json(out_dir / "analysis.json", rows)
    print(json.dumps({"step": step, "layers": rows}))
    return 0


def cmd_classdiv(cfg: dict, out_dir: Path, seed: int) -> int:
    ckpt = _get(cfg, "classdiv.checkpoint", str)
    dataset = _get(cfg, "classdiv.dataset", str)
    write_run_manifest(out_dir, "classdiv", cfg, seed, {"report": "classdiv.csv"})
    model, _ = load_checkpoint(ckpt)
    if model.config.num_classes is None:
        model = attach_classifier(model, _get(cfg, "classdiv.num_classes", int, 2), seed)
    vocab = load_vocab(_get(cfg, "classdiv.vocab", str))
    mode = _get(cfg, "vocab.mode", str, "word")
    seq_len = min(_get(cfg, "train.seq_len", int, 64), model.config.max_seq_len)
    texts, labels = load_labeled_tsv(dataset)
    tokens, labels_arr, pad_mask = classification_examples(texts, labels, vocab, mode, seq_len)
    per_label = class_usage_logs(model, tokens, labels_arr, pad_mask)
    labels_seen = sorted(per_label)
    if len(labels_seen) < 2:
        raise ConfigError("classdiv.dataset: needs at least two classes")
    hi, lo = labels_seen[-1], labels_seen[0]
    rows = []
    for pos in sorted(per_label[hi]):
        kl_sym, iou = class_divergence(per_label[hi][pos].t_raw, per_label[lo][pos].t_raw)
        rows.append({"layer": pos, "KL_sym": kl_sym, "IOU": iou})
    with open(out_dir / "classdiv.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("layer", "KL_sym", "IOU"))
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / "classdiv.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(json.dumps(rows))
    return 0


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def _time_median_ms(fn, warmup: int, iterations: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return median(samples)


def bench(cfg: dict, seed: int) -> list[dict]:
    """Timing rows for the mixing-block variants and the two search routes."""
    warmup = max(30, _get(cfg, "bench.warmup", int, 30))
    iterations = _get(cfg, "bench.iterations", int, 30)
    batch = _get(cfg, "bench.batch_size", int, 8)
    seq_len = _get(cfg, "bench.seq_len", int, 64)
    d_model = _get(cfg, "bench.d_model", int, 128)
    block_c = _get(cfg, "bench.block_C", int, 128)
    heads = _get(cfg, "bench.heads", int, 4)
    top_k = _get(cfg, "bench.k", int, 32)
    key_dim = _get(cfg, "bench.d_k", int, 64)
    search_cs = _get(cfg, "bench.search_C", list, [128, 256])
    search_k = _get(cfg, "bench.search_k", int, 8)

    rng = nm.make_rng(seed, nm.STREAM_BENCH)
    rows: list[dict] = []

    mem_cfg = MemoryConfig(
        codebook_size=block_c, heads=heads, top_k=min(top_k, block_c),
        key_dim=key_dim, value_dim=d_model,
    )
    x = rng.normal(0.0, 1.0, (batch, seq_len, d_model)).astype(np.float32)
    for variant in _get(cfg, "bench.variants", list, ["ffn", "pkm", "resm"]):
        enc_cfg = EncoderConfig(
            vocab_size=64, layers=1, model_dim=d_model, attn_heads=4,
            ffn_dim=_get(cfg, "bench.ffn_dim", int, 4 * d_model),
            max_seq_len=seq_len, memory_positions=(1,),
            memory=mem_cfg, memory_variant=variant, dropout=0.0,
        )
        model = build_encoder(enc_cfg, seed)
        ms = _time_median_ms(
            lambda m=model: memory_block_forward(x, m, 0, train_mode=False),
            warmup, iterations,
        )
        rows.append({
            "kind": "block", "name": variant, "batch": batch,
            "config": f"C={block_c},H={heads},k={mem_cfg.top_k},d={d_model}",
            "iterations": iterations, "median_ms": ms,
        })

    for c in search_cs:
        half = key_dim // 2
        keys1 = rng.normal(0.0, half**-0.5, (c, half)).astype(np.float32)
        keys2 = rng.normal(0.0, half**-0.5, (c, half)).astype(np.float32)
        queries = rng.normal(0.0, 1.0, (batch * seq_len, key_dim)).astype(np.float32)
        q1, q2 = queries[:, :half], queries[:, half:]
        flat = ExhaustiveSearch(keys1, keys2)
        ms_prod = _time_median_ms(
            lambda: _product_topk_batch(q1, q2, keys1, keys2, search_k),
            warmup, iterations,
        )
        ms_flat = _time_median_ms(
            lambda: flat.topk_batch(queries, search_k),
            warmup, iterations,
        )
        base = {"batch": batch * seq_len, "config": f"C={c},k={search_k},d_k={key_dim}",
                "iterations": iterations}
        rows.append({"kind": "search", "name": f"product_C{c}", "median_ms": ms_prod, **base})
        rows.append({"kind": "search", "name": f"exhaustive_C{c}", "median_ms": ms_flat, **base})
    return rows


def cmd_bench(cfg: dict, out_dir: Path, seed: int) -> int:
    write_run_manifest(out_dir, "bench", cfg, seed, {"report": "bench.csv"})
    rows = bench(cfg, seed)
    fields = ("kind", "name", "batch", "config", "iterations", "median_ms")
    with open(out_dir / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps(rows, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "pretrain": cmd_pretrain,
    "graft": cmd_graft,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "classdiv": cmd_classdiv,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pkmlab",
        description="Product-key memory language-model laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else _get(cfg, "seed", int, 0)
        out_dir = resolve_out(args.out)
        return _HANDLERS[args.command](cfg, out_dir, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
