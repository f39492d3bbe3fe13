"""Training loops and checkpointing.

Pretraining runs the masked-prediction objective with Adam on the dense
parameters (linear learning-rate warmup) while the shared value tables get
row-sparse Adam updates at their own learning rate: a value row's moments
and step counter advance only when the row was selected in that step's
forward pass. Checkpoints are a directory of manifest.json (config echo,
step, named-tensor index) plus params.bin, the float32 little-endian
concatenation of the tensors in sorted-name order; loading is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .encoder import (
    NUM_RESERVED,
    Encoder,
    EncoderConfig,
    build_encoder,
    classify_backward,
    classify_forward,
    encoder_backward,
    encoder_forward,
    init_from_pretrained,
    mlm_logits,
    mlm_logits_backward,
    mlm_mask,
    perplexity,
)
from .metrics import (
    AccessLog,
    staleness_histogram,
    utilization_report,
    write_staleness_csv,
    write_utilization_csv,
)
from .pkm import MemoryConfig, sparse_value_update, sparse_value_update_sgd

CHECKPOINT_FORMAT_VERSION = 1

TRAIN_VARIANTS = ("ffn", "pkm", "resm", "resm_reinit_ffn")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    seq_len: int = 64
    base_lr: float = 1e-4
    memory_lr: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0
    checkpoint_interval: int = 200
    eval_interval: int = 100
    eval_batches: int = 8
    mask_prob: float = 0.15
    variant: str = "resm"
    init_from: str | None = None
    freeze_memory: bool = False
    mem_optimizer: str = "adam"  # or "sgd"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.warmup_steps > max(self.steps, 1) and self.steps > 0:
            raise ValueError("warmup_steps must not exceed steps")
        if self.base_lr < 0 or self.memory_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.variant not in TRAIN_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mem_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown memory optimizer {self.mem_optimizer!r}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Exactly linear ramp: base_lr * step / warmup_steps while step <= warmup."""
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _config_to_dict(cfg: EncoderConfig) -> dict:
    out = asdict(cfg)
    out["memory_positions"] = list(cfg.memory_positions)
    return out


def _config_from_dict(data: dict) -> EncoderConfig:
    data = dict(data)
    data["memory"] = MemoryConfig(**data["memory"])
    data["memory_positions"] = tuple(data["memory_positions"])
    return EncoderConfig(**data)


def save_checkpoint(model: Encoder, path, step: int) -> None:
    """Write manifest.json + params.bin (little-endian float32, sorted names)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {**model.params, **model.buffers}
    index = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset_bytes": offset,
                "num_elements": int(arr.size),
            }
        )
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": step,
        "config": _config_to_dict(model.config),
        "tensors": index,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path, dtype=np.float32) -> tuple[Encoder, int]:
    """Rebuild the model from a checkpoint directory; returns (model, step)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unknown checkpoint format version {manifest.get('format_version')!r}")
    blob = (path / "params.bin").read_bytes()
    expected = sum(entry["num_elements"] for entry in manifest["tensors"]) * 4
    if len(blob) != expected:
        raise ValueError(
            f"params.bin length mismatch: have {len(blob)} bytes, manifest wants {expected}"
        )
    config = _config_from_dict(manifest["config"])
    model = build_encoder(config, seed=0, dtype=dtype)
    arrays = {}
    for entry in manifest["tensors"]:
        start = entry["offset_bytes"]
        count = entry["num_elements"]
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(dtype)
    model.load_arrays(arrays)
    return model, int(manifest["step"])


# ---------------------------------------------------------------------------
# Optimizer wiring
# ---------------------------------------------------------------------------


class Optimizer:
    """Adam over dense parameters plus row-sparse updates for value tables."""

    def __init__(self, model: Encoder, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.dense = {
            name: nm.AdamState.for_param(arr, lr=cfg.base_lr)
            for name, arr in model.params.items()
            if not name.endswith(".mem.values")
        }
        self.values = {
            layer: nm.AdamState.for_rows(mem.values, lr=cfg.memory_lr)
            for layer, mem in model.memories.items()
        }

    def step(self, step: int, grads: dict, value_grads: dict) -> None:
        lr = warmup_lr(self.cfg.base_lr, step, self.cfg.warmup_steps)
        freeze = self.cfg.freeze_memory
        for name, grad in grads.items():
            if freeze and ".mem." in name:
                continue
            state = self.dense[name]
            state.lr = lr
            nm.adam_step(self.model.params[name], grad, state)
        if freeze:
            return
        for layer, (rows, row_grads) in value_grads.items():
            values = self.model.memories[layer].values
            if self.cfg.mem_optimizer == "sgd":
                sparse_value_update_sgd(values, rows, row_grads, self.cfg.memory_lr)
            else:
                sparse_value_update(values, rows, row_grads, self.values[layer], self.cfg.memory_lr)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def mlm_step(model: Encoder, batch: np.ndarray, mask_rng, drop_rng,
             mask_prob: float, train_mode: bool = True,
             memory_train: bool | None = None):
    """One masked-prediction forward/backward; returns (loss, grads, value_grads, accesses)."""
    vocab = model.config.vocab_size
    eligible = batch >= NUM_RESERVED
    corrupted, is_target, originals = mlm_mask(batch, mask_prob, mask_rng, vocab,
                                               eligible=eligible)
    if not is_target.any():
        raise ValueError("batch produced zero masked positions")
    hidden, accesses, cache = encoder_forward(
        model, corrupted, train_mode, rng=drop_rng, memory_train=memory_train
    )
    logits = mlm_logits(model, hidden)
    loss, dlogits = nm.softmax_cross_entropy(
        logits.reshape(-1, vocab), originals.reshape(-1), is_target.reshape(-1)
    )
    if not train_mode:
        return loss, None, None, accesses
    grads = {name: np.zeros_like(arr) for name, arr in model.params.items()
             if not name.endswith(".mem.values")}
    dhidden = mlm_logits_backward(
        model, dlogits.reshape(logits.shape), hidden, grads
    )
    enc_grads, value_grads = encoder_backward(model, dhidden, cache)
    for name, g in enc_grads.items():
        grads[name] += g
    return loss, grads, value_grads, accesses


def evaluate_mlm(model: Encoder, blocks: np.ndarray, cfg: TrainConfig,
                 record_logs: dict[int, AccessLog] | None = None) -> tuple[float, float]:
    """Held-out loss/perplexity in eval mode with fixed evaluation masks.

    The mask stream is re-created from the seed on every call, so successive
    evaluations of one run score the exact same prediction problem.
    """
    rng = nm.make_rng(cfg.seed, nm.STREAM_EVAL)
    n_batches = max(1, min(cfg.eval_batches, len(blocks) // cfg.batch_size or 1))
    total_loss = 0.0
    total_targets = 0
    for b in range(n_batches):
        batch = blocks[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        if len(batch) == 0:
            break
        eligible = batch >= NUM_RESERVED
        corrupted, is_target, originals = mlm_mask(
            batch, cfg.mask_prob, rng, model.config.vocab_size, eligible=eligible
        )
        if not is_target.any():
            continue
        hidden, accesses, _ = encoder_forward(model, corrupted, train_mode=False)
        logits = mlm_logits(model, hidden)
        loss, _ = nm.softmax_cross_entropy(
            logits.reshape(-1, model.config.vocab_size),
            originals.reshape(-1),
            is_target.reshape(-1),
        )
        n_t = int(is_target.sum())
        total_loss += loss * n_t
        total_targets += n_t
        if record_logs is not None:
            for pos, access in accesses:
                record_logs[pos].record(access)
    if total_targets == 0:
        raise ValueError("evaluation produced zero masked positions")
    mean = total_loss / total_targets
    return mean, perplexity(mean)


def _fresh_logs(model: Encoder) -> dict[int, AccessLog]:
    return {
        layer + 1: AccessLog(model.memories[layer].cfg.num_slots)
        for layer in model.config.memory_layers()
    }


@dataclass
class PretrainResult:
    checkpoints: list[tuple[int, Path]]
    metrics: list[dict]
    staleness: dict[int, np.ndarray] = field(default_factory=dict)
    staleness_topk: dict[int, np.ndarray] = field(default_factory=dict)
    final_eval_logs: dict[int, AccessLog] = field(default_factory=dict)


def pretrain(model: Encoder, train_blocks: np.ndarray, eval_blocks: np.ndarray,
             cfg: TrainConfig, out_dir) -> PretrainResult:
    """Run the masked-prediction training loop.

    Emits a checkpoint series under out_dir/checkpoints, a metrics row per
    evaluation, and per-interval access snapshots that feed the staleness
    histograms. steps == 0 writes only the initial checkpoint.
    """
    out_dir = Path(out_dir)
    ckpt_root = out_dir / "checkpoints"
    if len(train_blocks) < cfg.batch_size:
        raise ValueError(
            f"corpus too small: {len(train_blocks)} blocks < batch size {cfg.batch_size}"
        )
    data_rng = nm.make_rng(cfg.seed, nm.STREAM_DATA)
    mask_rng = nm.make_rng(cfg.seed, nm.STREAM_MASK)
    drop_rng = nm.make_rng(cfg.seed, nm.STREAM_DROPOUT)
    optimizer = Optimizer(model, cfg)

    checkpoints: list[tuple[int, Path]] = []
    metrics_rows: list[dict] = []
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_file = open(out_dir / "metrics.jsonl", "w")

    def checkpoint(step: int) -> None:
        path = ckpt_root / f"step_{step:08d}"
        save_checkpoint(model, path, step)
        checkpoints.append((step, path))

    interval_logs = _fresh_logs(model)
    t_snapshots: dict[int, list[np.ndarray]] = {pos: [] for pos in interval_logs}
    u_snapshots: dict[int, list[np.ndarray]] = {pos: [] for pos in interval_logs}

    def snapshot_interval() -> None:
        for pos, log in interval_logs.items():
            t_snapshots[pos].append(log.t_raw.copy())
            u_snapshots[pos].append(log.u_raw.copy())
        for pos in interval_logs:
            interval_logs[pos] = AccessLog(interval_logs[pos].num_slots)

    checkpoint(0)
    final_eval_logs: dict[int, AccessLog] = {}
    try:
        for step in range(1, cfg.steps + 1):
            idx = data_rng.integers(0, len(train_blocks), size=cfg.batch_size)
            batch = train_blocks[idx]
            loss, grads, value_grads, accesses = mlm_step(
                model, batch, mask_rng, drop_rng, cfg.mask_prob
            )
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            for pos, access in accesses:
                interval_logs[pos].record(access)
            optimizer.step(step, grads, value_grads)

            if cfg.eval_interval and step % cfg.eval_interval == 0:
                eval_logs = _fresh_logs(model)
                eval_loss, ppl = evaluate_mlm(model, eval_blocks, cfg, record_logs=eval_logs)
                row = {
                    "step": step,
                    "train_loss": float(loss),
                    "mlm_loss": float(eval_loss),
                    "ppl": float(ppl),
                    "utilization": utilization_report(eval_logs),
                }
                metrics_rows.append(row)
                metrics_file.write(json.dumps(row) + "\n")
                metrics_file.flush()
                final_eval_logs = eval_logs
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                snapshot_interval()
                checkpoint(step)
        if cfg.steps and (not cfg.checkpoint_interval or cfg.steps % cfg.checkpoint_interval):
            snapshot_interval()
            checkpoint(cfg.steps)
    finally:
        metrics_file.close()

    result = PretrainResult(checkpoints, metrics_rows, final_eval_logs=final_eval_logs)
    for pos, snaps in t_snapshots.items():
        if snaps:
            result.staleness[pos] = staleness_histogram(snaps)
            result.staleness_topk[pos] = staleness_histogram(u_snapshots[pos])
    if result.staleness:
        for pos, hist in result.staleness.items():
            write_staleness_csv(out_dir / f"staleness_layer{pos}.csv", hist)
        for pos, hist in result.staleness_topk.items():
            write_staleness_csv(out_dir / f"staleness_topk_layer{pos}.csv", hist)
        merged = sum(result.staleness.values())
        write_staleness_csv(out_dir / "staleness.csv", merged)
    if final_eval_logs:
        write_utilization_csv(out_dir / "utilization.csv", utilization_report(final_eval_logs))
    return result


def graft_from_checkpoint(base_ckpt, cfg: TrainConfig, memory: MemoryConfig,
                          value_init: str | None = None) -> Encoder:
    """Load a memory-free checkpoint and initialize the requested variant from it."""
    base, _ = load_checkpoint(base_ckpt)
    variant = "pkm" if cfg.variant == "pkm" else "resm"
    return init_from_pretrained(
        base,
        variant,
        memory,
        seed=cfg.seed,
        reinit_ffn=(cfg.variant == "resm_reinit_ffn"),
        value_init=value_init,
    )


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    accuracy: float
    eval_logs: dict[int, AccessLog]
    class_logs: dict[int, tuple[np.ndarray, np.ndarray]]  # layer -> (t_pos, t_neg)


def classification_accuracy(model: Encoder, tokens, labels, pad_mask,
                            batch_size: int = 64) -> float:
    correct = 0
    for start in range(0, len(tokens), batch_size):
        sl = slice(start, start + batch_size)
        logits, _, _ = classify_forward(model, tokens[sl], train_mode=False,
                                        pad_mask=pad_mask[sl])
        correct += int((logits.argmax(axis=1) == labels[sl]).sum())
    return correct / len(tokens)


def finetune(model: Encoder, tokens: np.ndarray, labels: np.ndarray,
             pad_mask: np.ndarray, cfg: TrainConfig,
             eval_tokens=None, eval_labels=None, eval_pad_mask=None) -> FinetuneResult:
    """Train the classification head plus trunk (memory too unless frozen).

    With freeze_memory set, every memory parameter (keys, values, query nets,
    batch-norm affine and running stats) is bit-identical afterwards; the
    memory batch norm then runs on its running statistics.
    """
    if model.config.num_classes is None:
        raise ValueError("attach a classification head before finetuning")
    if np.unique(labels).size < 2:
        raise ValueError("degenerate task: finetuning needs at least two classes")
    data_rng = nm.make_rng(cfg.seed, nm.STREAM_DATA)
    drop_rng = nm.make_rng(cfg.seed, nm.STREAM_DROPOUT)
    optimizer = Optimizer(model, cfg)
    memory_train = False if cfg.freeze_memory else None

    for step in range(1, cfg.steps + 1):
        idx = data_rng.integers(0, len(tokens), size=min(cfg.batch_size, len(tokens)))
        logits, _, cache = classify_forward(
            model, tokens[idx], train_mode=True, rng=drop_rng,
            pad_mask=pad_mask[idx], memory_train=memory_train,
        )
        loss, dlogits = nm.softmax_cross_entropy(
            logits, labels[idx], np.ones(len(idx), dtype=bool)
        )
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at finetune step {step}")
        grads, value_grads = classify_backward(model, dlogits, cache)
        optimizer.step(step, grads, value_grads)

    if eval_tokens is None:
        eval_tokens, eval_labels, eval_pad_mask = tokens, labels, pad_mask
    accuracy = classification_accuracy(model, eval_tokens, eval_labels, eval_pad_mask)

    eval_logs = _fresh_logs(model)
    per_label_logs = class_usage_logs(
        model, eval_tokens, eval_labels, eval_pad_mask, cfg.batch_size
    )
    for per_label in per_label_logs.values():
        for pos, log in per_label.items():
            eval_logs[pos].merge(log)

    class_logs = {}
    labels_seen = sorted(per_label_logs)
    if len(labels_seen) >= 2:
        hi, lo = labels_seen[-1], labels_seen[0]
        for pos in eval_logs:
            class_logs[pos] = (per_label_logs[hi][pos].t_raw, per_label_logs[lo][pos].t_raw)
    return FinetuneResult(accuracy=accuracy, eval_logs=eval_logs, class_logs=class_logs)


def class_usage_logs(model: Encoder, tokens, labels, pad_mask,
                     batch_size: int = 64) -> dict[int, dict[int, AccessLog]]:
    """Per-label access logs: label -> (1-based memory layer -> AccessLog)."""
    out: dict[int, dict[int, AccessLog]] = {}
    for label in np.unique(labels):
        rows = np.flatnonzero(labels == label)
        logs = _fresh_logs(model)
        for start in range(0, len(rows), batch_size):
            pick = rows[start : start + batch_size]
            _, accesses, _ = classify_forward(
                model, tokens[pick], train_mode=False, pad_mask=pad_mask[pick]
            )
            for pos, access in accesses:
                logs[pos].record(access)
        out[int(label)] = logs
    return out
