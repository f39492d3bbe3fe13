"""Desk-scale laboratory for product-key memory layers in masked-LM transformers."""

from .encoder import (
    BlockVariant,
    Encoder,
    EncoderConfig,
    build_encoder,
    init_from_pretrained,
)
from .metrics import AccessLog, class_divergence, kl_uniform, memory_usage, staleness_histogram
from .numerics import AdamState, adam_step, make_rng
from .pkm import MemoryAccess, MemoryConfig, ProductKeyMemory, product_topk, subkey_topk
from .train import TrainConfig, finetune, load_checkpoint, pretrain, save_checkpoint

__all__ = [
    "AccessLog",
    "AdamState",
    "BlockVariant",
    "Encoder",
    "EncoderConfig",
    "MemoryAccess",
    "MemoryConfig",
    "ProductKeyMemory",
    "TrainConfig",
    "adam_step",
    "build_encoder",
    "class_divergence",
    "finetune",
    "init_from_pretrained",
    "kl_uniform",
    "load_checkpoint",
    "make_rng",
    "memory_usage",
    "pretrain",
    "product_topk",
    "save_checkpoint",
    "staleness_histogram",
    "subkey_topk",
]
