"""Attention variants: softmax reference, LCHA (linear + causal conv), strided and KV-compressed."""

from .blocks import (
    AdaLN,
    AdaLnParams,
    BlockContext,
    FullAttention,
    KvCompressAttention,
    LayerNorm,
    LchaAttention,
    LchaConfig,
    Linear,
    Mlp,
    PixelDown,
    PixelUp,
    SsaConfig,
    StrideAttention,
    TransformerBlock,
    full_block,
    lcha_block,
    merge_heads,
    split_heads,
    ssa_block,
)
from .conv import local_conv_path
from .grid import TokenGrid
from .kernels import (
    DegenerateDenominatorWarning,
    KernelParams,
    full_attention,
    kernel_map,
    kv_compress_attention,
    linear_attention,
    linear_attention_map,
    pool_tokens,
)
from .rope import rope3d, rope_angles, rope_pair_split

__all__ = [
    "AdaLN", "AdaLnParams", "BlockContext", "FullAttention", "KvCompressAttention", "LayerNorm",
    "LchaAttention", "LchaConfig", "Linear", "Mlp", "PixelDown", "PixelUp", "SsaConfig", "StrideAttention",
    "TransformerBlock", "full_block", "lcha_block", "merge_heads", "split_heads", "ssa_block",
    "local_conv_path", "TokenGrid", "DegenerateDenominatorWarning", "KernelParams", "full_attention",
    "kernel_map", "kv_compress_attention", "linear_attention", "linear_attention_map", "pool_tokens",
    "rope3d", "rope_angles", "rope_pair_split",
]
