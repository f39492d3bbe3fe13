"""Bidirectional transformer encoder with swappable token-mixing blocks.

Each layer is a post-norm pair: a self-attention sub-layer, then a mixing
block computing LN(x + alpha*FFN(x) + beta*PKM(x)). (alpha, beta) = (1, 0)
is a plain feed-forward block, (0, 1) a memory-only block, (1, 1) a residual
memory block that keeps the feed-forward path and adds the memory term.

Parameters live in a flat name -> array dict and are always mutated in
place, never rebound, so the per-layer `ProductKeyMemory` objects and the
dict stay views of the same storage. Every parameter is initialized from its
own name-keyed random stream, which makes init independent of construction
order (two configs sharing a trunk draw identical trunk weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .pkm import MemoryConfig, ProductKeyMemory, memory_backward, memory_forward

# Reserved vocabulary ids, fixed across the toolkit.
PAD_ID, MASK_ID, UNK_ID, CLS_ID = 0, 1, 2, 3
NUM_RESERVED = 4

VARIANTS = ("ffn", "pkm", "resm")


@dataclass(frozen=True)
class BlockVariant:
    """Mixing-block switches: alpha gates the feed-forward term, beta the memory term."""

    alpha: int
    beta: int

    def __post_init__(self):
        if self.alpha not in (0, 1) or self.beta not in (0, 1):
            raise ValueError(f"alpha/beta must be 0 or 1, got ({self.alpha}, {self.beta})")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("a block must keep at least one of the FFN and memory terms")


FFN_BLOCK = BlockVariant(1, 0)
PKM_BLOCK = BlockVariant(0, 1)
RESM_BLOCK = BlockVariant(1, 1)

_VARIANT_BLOCKS = {"ffn": FFN_BLOCK, "pkm": PKM_BLOCK, "resm": RESM_BLOCK}


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    model_dim: int = 128
    attn_heads: int = 4
    ffn_dim: int = 512
    max_seq_len: int = 64
    memory_positions: tuple[int, ...] = (2, 4)  # 1-based layer indices
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    memory_variant: str = "ffn"  # "ffn" = memory-free trunk
    dropout: float = 0.1
    num_classes: int | None = None

    def __post_init__(self):
        if self.vocab_size <= NUM_RESERVED:
            raise ValueError(f"vocab_size must exceed {NUM_RESERVED}, got {self.vocab_size}")
        if self.model_dim % self.attn_heads:
            raise ValueError("model_dim must be divisible by attn_heads")
        if self.memory_variant not in VARIANTS:
            raise ValueError(f"unknown memory_variant {self.memory_variant!r}")
        positions = tuple(sorted(self.memory_positions))
        object.__setattr__(self, "memory_positions", positions)
        if positions and (positions[0] < 1 or positions[-1] > self.layers):
            raise ValueError(f"memory positions {positions} outside [1, {self.layers}]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.memory_variant != "ffn" and self.memory.value_dim != self.model_dim:
            raise ValueError("memory value_dim must equal model_dim")

    def block_variant(self, layer: int) -> BlockVariant:
        """Mixing-block variant at 0-based layer index."""
        if self.memory_variant != "ffn" and (layer + 1) in self.memory_positions:
            return _VARIANT_BLOCKS[self.memory_variant]
        return FFN_BLOCK

    def memory_layers(self) -> tuple[int, ...]:
        """0-based indices of layers that host a memory, in order."""
        if self.memory_variant == "ffn":
            return ()
        return tuple(p - 1 for p in self.memory_positions)


def default_memory_positions(layers: int, count: int = 2) -> tuple[int, ...]:
    """Spread `count` memory layers at regular intervals, e.g. {2, 4} for 4 layers."""
    count = min(count, layers)
    step = layers / count
    return tuple(sorted({round(step * (i + 1)) for i in range(count)}))


class Encoder:
    """A built model: config plus named parameter/buffer arrays.

    `params` holds trainable arrays, `buffers` the batch-norm running stats;
    `memories` maps 0-based layer index to the ProductKeyMemory whose arrays
    alias entries of those dicts.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray],
                 buffers: dict[str, np.ndarray], memories: dict[int, ProductKeyMemory]):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.memories = memories

    @property
    def dtype(self):
        return self.params["embed.tok"].dtype

    def memory_param_names(self) -> list[str]:
        return [name for name in self.params if ".mem." in name]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values into existing storage (in place, shapes must match)."""
        own = {**self.params, **self.buffers}
        for name, value in arrays.items():
            if name not in own:
                raise KeyError(f"unknown tensor {name!r}")
            if own[name].shape != value.shape:
                raise ValueError(
                    f"{name}: shape {value.shape} does not match {own[name].shape}"
                )
            own[name][...] = value


def _normal(seed: int, name: str, shape, std: float, dtype) -> np.ndarray:
    rng = nm.make_rng(seed, nm.STREAM_PARAMS, nm.name_stream(name))
    return rng.normal(0.0, std, shape).astype(dtype)


def build_encoder(config: EncoderConfig, seed: int, dtype=np.float32) -> Encoder:
    """Initialize a model; same (config, seed, dtype) gives bit-identical arrays."""
    d, ffn = config.model_dim, config.ffn_dim
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    memories: dict[int, ProductKeyMemory] = {}

    def normal(name, shape, std=0.02):
        params[name] = _normal(seed, name, shape, std, dtype)

    def zeros(name, shape):
        params[name] = np.zeros(shape, dtype=dtype)

    def ones(name, shape):
        params[name] = np.ones(shape, dtype=dtype)

    normal("embed.tok", (config.vocab_size, d))
    normal("embed.pos", (config.max_seq_len, d))
    ones("embed.ln_g", d)
    zeros("embed.ln_b", d)

    for i in range(config.layers):
        p = f"layer{i}"
        for kind in ("wq", "wk", "wv", "wo"):
            normal(f"{p}.attn.{kind}", (d, d))
        for kind in ("bq", "bk", "bv", "bo"):
            zeros(f"{p}.attn.{kind}", d)
        ones(f"{p}.attn.ln_g", d)
        zeros(f"{p}.attn.ln_b", d)

        variant = config.block_variant(i)
        if variant.alpha:
            normal(f"{p}.ffn.w1", (d, ffn))
            zeros(f"{p}.ffn.b1", ffn)
            normal(f"{p}.ffn.w2", (ffn, d))
            zeros(f"{p}.ffn.b2", d)
        if variant.beta:
            mem_rng = nm.make_rng(seed, nm.STREAM_PARAMS, nm.name_stream(f"{p}.mem"))
            mem = ProductKeyMemory(config.memory, d, mem_rng, dtype=dtype)
            memories[i] = mem
            for local, arr in mem.params().items():
                params[f"{p}.mem.{local}"] = arr
            for local, arr in mem.buffers().items():
                buffers[f"{p}.mem.{local}"] = arr
        ones(f"{p}.block.ln_g", d)
        zeros(f"{p}.block.ln_b", d)

    normal("mlm.w", (d, config.vocab_size))
    zeros("mlm.b", config.vocab_size)

    if config.num_classes is not None:
        normal("cls.pool_w", (d, d))
        zeros("cls.pool_b", d)
        normal("cls.out_w", (d, config.num_classes))
        zeros("cls.out_b", config.num_classes)

    return Encoder(config, params, buffers, memories)


# ---------------------------------------------------------------------------
# Attention / FFN sub-layers
# ---------------------------------------------------------------------------


def _attention_forward(x, p, prefix, n_heads, pad_bias):
    """Multi-head bidirectional self-attention; pad_bias (B, 1, 1, T) or None."""
    bsz, t, d = x.shape
    dh = d // n_heads
    q = nm.linear_forward(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = nm.linear_forward(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = nm.linear_forward(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])

    def heads(a):
        return a.reshape(bsz, t, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scale = np.asarray(dh, dtype=x.dtype) ** -0.5
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if pad_bias is not None:
        scores = scores + pad_bias
    attn = nm.softmax(scores, axis=-1)
    ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(bsz, t, d)
    y = nm.linear_forward(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    cache = {"x": x, "qh": qh, "kh": kh, "vh": vh, "attn": attn, "ctx": ctx}
    return y, cache


def _attention_backward(dy, p, prefix, cache, grads):
    x, qh, kh, vh, attn, ctx = (
        cache["x"], cache["qh"], cache["kh"], cache["vh"], cache["attn"], cache["ctx"],
    )
    bsz, t, d = x.shape
    n_heads = qh.shape[1]
    dh = d // n_heads
    scale = np.asarray(dh, dtype=x.dtype) ** -0.5

    dctx, dwo, dbo = nm.linear_backward(dy, ctx, p[f"{prefix}.wo"])
    grads[f"{prefix}.wo"] += dwo
    grads[f"{prefix}.bo"] += dbo

    dctx_h = dctx.reshape(bsz, t, n_heads, dh).transpose(0, 2, 1, 3)
    dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dqh = dscores @ kh * scale
    dkh = dscores.transpose(0, 1, 3, 2) @ qh * scale

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(bsz, t, d)

    dx = np.zeros_like(x)
    for name, da in (("q", merge(dqh)), ("k", merge(dkh)), ("v", merge(dvh))):
        dxi, dw, db = nm.linear_backward(da, x, p[f"{prefix}.w{name}"])
        grads[f"{prefix}.w{name}"] += dw
        grads[f"{prefix}.b{name}"] += db
        dx += dxi
    return dx


def _ffn_forward(x, p, prefix):
    h1 = nm.linear_forward(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])
    a, gelu_cache = nm.gelu_forward(h1)
    y = nm.linear_forward(a, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return y, {"x": x, "a": a, "gelu": gelu_cache}


def _ffn_backward(dy, p, prefix, cache, grads):
    da, dw2, db2 = nm.linear_backward(dy, cache["a"], p[f"{prefix}.w2"])
    grads[f"{prefix}.w2"] += dw2
    grads[f"{prefix}.b2"] += db2
    dh1 = nm.gelu_backward(da, cache["gelu"])
    dx, dw1, db1 = nm.linear_backward(dh1, cache["x"], p[f"{prefix}.w1"])
    grads[f"{prefix}.w1"] += dw1
    grads[f"{prefix}.b1"] += db1
    return dx


def memory_block_forward(x, model: Encoder, layer: int, train_mode: bool,
                         rng=None, memory_train: bool | None = None):
    """One mixing block: LN(x + alpha*FFN(x) + beta*PKM(x)).

    Returns (y, access_or_None, cache). `memory_train` lets finetuning run
    the memory batch norm in eval mode while the trunk still trains.
    """
    cfg = model.config
    p = model.params
    variant = cfg.block_variant(layer)
    prefix = f"layer{layer}"
    total = x
    cache = {"variant": variant, "x": x}
    access = None

    if variant.alpha:
        ffn_out, ffn_cache = _ffn_forward(x, p, f"{prefix}.ffn")
        ffn_out, drop_mask = nm.dropout_forward(ffn_out, cfg.dropout, rng, train_mode)
        total = total + ffn_out
        cache["ffn"] = ffn_cache
        cache["ffn_drop"] = drop_mask
    if variant.beta:
        mem_mode = train_mode if memory_train is None else memory_train
        mem_out, access, mem_cache = memory_forward(x, model.memories[layer], mem_mode)
        mem_out, drop_mask = nm.dropout_forward(mem_out, cfg.dropout, rng, train_mode)
        total = total + mem_out
        cache["mem"] = mem_cache
        cache["mem_drop"] = drop_mask

    y, ln_cache = nm.layer_norm_forward(
        total, p[f"{prefix}.block.ln_g"], p[f"{prefix}.block.ln_b"]
    )
    cache["ln"] = ln_cache
    return y, access, cache


def memory_block_backward(dy, model: Encoder, layer: int, cache, grads, value_grads):
    p = model.params
    prefix = f"layer{layer}"
    variant = cache["variant"]

    dtotal, dg, db = nm.layer_norm_backward(dy, cache["ln"])
    grads[f"{prefix}.block.ln_g"] += dg
    grads[f"{prefix}.block.ln_b"] += db

    dx = dtotal.copy()
    if variant.alpha:
        dffn = nm.dropout_backward(dtotal, cache["ffn_drop"])
        dx += _ffn_backward(dffn, p, f"{prefix}.ffn", cache["ffn"], grads)
    if variant.beta:
        dmem = nm.dropout_backward(dtotal, cache["mem_drop"])
        dxm, mem_grads, rows, row_grads = memory_backward(
            dmem, model.memories[layer], cache["mem"]
        )
        dx += dxm
        for local, g in mem_grads.items():
            grads[f"{prefix}.mem.{local}"] += g
        value_grads[layer] = (rows, row_grads)
    return dx


# ---------------------------------------------------------------------------
# Full encoder
# ---------------------------------------------------------------------------


def _pad_bias(pad_mask, dtype):
    """pad_mask (B, T) bool, True = real token -> additive (B, 1, 1, T) bias."""
    if pad_mask is None:
        return None
    bias = np.where(pad_mask[:, None, None, :], 0.0, -1e9)
    return bias.astype(dtype)


def encoder_forward(model: Encoder, tokens: np.ndarray, train_mode: bool,
                    rng=None, pad_mask=None, memory_train: bool | None = None):
    """tokens (B, T) int -> (hidden (B, T, d), accesses, cache).

    `accesses` is a list of (1-based layer position, MemoryAccess), one entry
    per configured memory layer, in depth order.
    """
    cfg = model.config
    p = model.params
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (B, T), got shape {tokens.shape}")
    bsz, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds maximum {cfg.max_seq_len}")
    if bsz == 0:
        return np.zeros((0, t, cfg.model_dim), dtype=model.dtype), [], None
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")

    x = p["embed.tok"][tokens] + p["embed.pos"][:t]
    x, emb_ln = nm.layer_norm_forward(x, p["embed.ln_g"], p["embed.ln_b"])
    x, emb_drop = nm.dropout_forward(x, cfg.dropout, rng, train_mode)
    bias = _pad_bias(pad_mask, x.dtype)

    layer_caches = []
    accesses = []
    for i in range(cfg.layers):
        attn_out, attn_cache = _attention_forward(x, p, f"layer{i}.attn", cfg.attn_heads, bias)
        attn_out, attn_drop = nm.dropout_forward(attn_out, cfg.dropout, rng, train_mode)
        h, attn_ln = nm.layer_norm_forward(
            x + attn_out, p[f"layer{i}.attn.ln_g"], p[f"layer{i}.attn.ln_b"]
        )
        y, access, block_cache = memory_block_forward(
            h, model, i, train_mode, rng=rng, memory_train=memory_train
        )
        if access is not None:
            accesses.append((i + 1, access))
        layer_caches.append(
            {"attn": attn_cache, "attn_drop": attn_drop, "attn_ln": attn_ln, "block": block_cache}
        )
        x = y

    cache = {"tokens": tokens, "emb_ln": emb_ln, "emb_drop": emb_drop, "layers": layer_caches}
    return x, accesses, cache


def encoder_backward(model: Encoder, dhidden: np.ndarray, cache):
    """Backprop through the full encoder.

    Returns (grads, value_grads); `grads` maps dense parameter names to
    arrays (value tables excluded), `value_grads` maps 0-based memory layer
    index to (touched_rows, row_grads).
    """
    cfg = model.config
    p = model.params
    grads = {
        name: np.zeros_like(arr)
        for name, arr in model.params.items()
        if not name.endswith(".mem.values")
    }
    value_grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    dx = dhidden
    for i in reversed(range(cfg.layers)):
        lc = cache["layers"][i]
        dh = memory_block_backward(dx, model, i, lc["block"], grads, value_grads)
        dsum, dg, db = nm.layer_norm_backward(dh, lc["attn_ln"])
        grads[f"layer{i}.attn.ln_g"] += dg
        grads[f"layer{i}.attn.ln_b"] += db
        dattn = nm.dropout_backward(dsum, lc["attn_drop"])
        dx = dsum + _attention_backward(dattn, p, f"layer{i}.attn", lc["attn"], grads)

    dx = nm.dropout_backward(dx, cache["emb_drop"])
    dx, dg, db = nm.layer_norm_backward(dx, cache["emb_ln"])
    grads["embed.ln_g"] += dg
    grads["embed.ln_b"] += db
    tokens = cache["tokens"]
    np.add.at(grads["embed.tok"], tokens.reshape(-1), dx.reshape(-1, cfg.model_dim))
    grads["embed.pos"][: tokens.shape[1]] += dx.sum(axis=0)
    return grads, value_grads


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


def mlm_logits(model: Encoder, hidden: np.ndarray):
    """hidden (B, T, d) -> logits (B, T, V)."""
    return nm.linear_forward(hidden, model.params["mlm.w"], model.params["mlm.b"])


def mlm_logits_backward(model: Encoder, dlogits, hidden, grads):
    dh, dw, db = nm.linear_backward(dlogits, hidden, model.params["mlm.w"])
    grads["mlm.w"] += dw
    grads["mlm.b"] += db
    return dh


def classify_forward(model: Encoder, tokens, train_mode: bool, rng=None, pad_mask=None,
                     memory_train: bool | None = None):
    """Class logits from the first-position representation (tanh pooler + linear).

    Returns (logits (B, n_classes), accesses, cache).
    """
    if model.config.num_classes is None:
        raise ValueError("model has no classification head")
    hidden, accesses, enc_cache = encoder_forward(
        model, tokens, train_mode, rng=rng, pad_mask=pad_mask,
        memory_train=memory_train,
    )
    if hidden.shape[0] == 0:
        return np.zeros((0, model.config.num_classes), dtype=model.dtype), accesses, None
    first = hidden[:, 0, :]
    pre = nm.linear_forward(first, model.params["cls.pool_w"], model.params["cls.pool_b"])
    pooled = np.tanh(pre)
    logits = nm.linear_forward(pooled, model.params["cls.out_w"], model.params["cls.out_b"])
    cache = {"enc": enc_cache, "hidden": hidden, "first": first, "pooled": pooled}
    return logits, accesses, cache


def classify_backward(model: Encoder, dlogits, cache):
    """Returns (grads, value_grads) for a classification forward."""
    p = model.params
    dpooled, dow, dob = nm.linear_backward(dlogits, cache["pooled"], p["cls.out_w"])
    dpre = dpooled * (1.0 - cache["pooled"] ** 2)
    dfirst, dpw, dpb = nm.linear_backward(dpre, cache["first"], p["cls.pool_w"])
    dhidden = np.zeros_like(cache["hidden"])
    dhidden[:, 0, :] = dfirst
    grads, value_grads = encoder_backward(model, dhidden, cache["enc"])
    grads["cls.out_w"] += dow
    grads["cls.out_b"] += dob
    grads["cls.pool_w"] += dpw
    grads["cls.pool_b"] += dpb
    return grads, value_grads


# ---------------------------------------------------------------------------
# Masked-language-model objective
# ---------------------------------------------------------------------------


def mlm_mask(tokens: np.ndarray, mask_prob: float, rng: np.random.Generator,
             vocab_size: int, mask_id: int = MASK_ID, eligible=None,
             mask_token_prob: float = 0.8, random_token_prob: float = 0.1):
    """Corrupt tokens for the masked-prediction objective.

    Each (eligible) position is independently selected with `mask_prob`;
    a selected position becomes `mask_id` with `mask_token_prob`, a random
    non-reserved token with `random_token_prob`, and stays unchanged
    otherwise. Returns (corrupted, is_target (bool), original tokens).
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError(f"mask_prob must be in [0, 1], got {mask_prob}")
    if mask_token_prob + random_token_prob > 1.0 + 1e-9:
        raise ValueError("mask/random sub-rule probabilities exceed 1")
    if not 0 <= mask_id < vocab_size:
        raise ValueError("vocabulary has no mask symbol")
    tokens = np.asarray(tokens)
    selected = rng.random(tokens.shape) < mask_prob
    if eligible is not None:
        selected &= np.asarray(eligible, dtype=bool)
    sub = rng.random(tokens.shape)
    randoms = rng.integers(NUM_RESERVED, max(vocab_size, NUM_RESERVED + 1), size=tokens.shape)
    corrupted = tokens.copy()
    corrupted[selected & (sub < mask_token_prob)] = mask_id
    use_random = selected & (sub >= mask_token_prob) & (sub < mask_token_prob + random_token_prob)
    corrupted[use_random] = randoms[use_random]
    return corrupted, selected, tokens.copy()


def mlm_loss(model: Encoder, tokens: np.ndarray, rng: np.random.Generator,
             mask_prob: float = 0.15, train_mode: bool = False, drop_rng=None):
    """Masked-prediction loss on a batch; returns (mean loss, target count).

    Corpus perplexity is exp of the loss averaged over all targets, so the
    (loss, count) pair is the aggregation-ready contribution of this batch.
    """
    eligible = tokens >= NUM_RESERVED
    corrupted, is_target, originals = mlm_mask(
        tokens, mask_prob, rng, model.config.vocab_size, eligible=eligible
    )
    if not is_target.any():
        raise ValueError("batch produced zero masked positions")
    hidden, _, _ = encoder_forward(model, corrupted, train_mode, rng=drop_rng)
    logits = mlm_logits(model, hidden)
    loss, _ = nm.softmax_cross_entropy(
        logits.reshape(-1, model.config.vocab_size),
        originals.reshape(-1),
        is_target.reshape(-1),
    )
    return loss, int(is_target.sum())


def perplexity(mean_loss: float) -> float:
    return float(np.exp(mean_loss))


# ---------------------------------------------------------------------------
# Grafting
# ---------------------------------------------------------------------------


def init_from_pretrained(base: Encoder, variant: str, memory: MemoryConfig,
                         seed: int, reinit_ffn: bool = False,
                         value_init: str | None = None) -> Encoder:
    """Build a memory-augmented model initialized from a memory-free trunk.

    All trunk parameters are copied; memory parameters are fresh. For the
    "pkm" variant the feed-forward sub-blocks at memory positions are dropped
    (alpha = 0); for "resm" they are kept, or re-randomized when `reinit_ffn`
    is set. Copying twice from the same base is idempotent on the trunk.
    """
    if base.config.memory_variant != "ffn":
        raise ValueError("grafting requires a memory-free base model")
    if variant not in ("pkm", "resm"):
        raise ValueError(f"graft variant must be pkm or resm, got {variant!r}")
    if memory.value_dim != base.config.model_dim:
        raise ValueError("memory value_dim must match the base model width")

    mem_cfg = memory if value_init is None else replace(memory, value_init=value_init)
    target_cfg = replace(base.config, memory_variant=variant, memory=mem_cfg)
    target = build_encoder(target_cfg, seed, dtype=base.dtype)

    reinit_names = set()
    if variant == "resm" and reinit_ffn:
        reinit_names = {
            f"layer{i}.ffn.{kind}"
            for i in target_cfg.memory_layers()
            for kind in ("w1", "b1", "w2", "b2")
        }
    for name, arr in target.params.items():
        if ".mem." in name or name in reinit_names:
            continue
        if name not in base.params:
            raise ValueError(f"base model lacks trunk parameter {name!r}")
        if base.params[name].shape != arr.shape:
            raise ValueError(f"trunk shape mismatch on {name!r}")
        arr[...] = base.params[name]
    return target


def attach_classifier(model: Encoder, num_classes: int, seed: int) -> Encoder:
    """Return a copy of `model` with a fresh classification head attached."""
    cfg = replace(model.config, num_classes=num_classes)
    target = build_encoder(cfg, seed, dtype=model.dtype)
    for name, arr in target.params.items():
        if name.startswith("cls."):
            continue
        arr[...] = model.params[name]
    for name, arr in target.buffers.items():
        arr[...] = model.buffers[name]
    return target
