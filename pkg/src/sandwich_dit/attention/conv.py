from __future__ import annotations

from ..numerics import ops
from ..numerics.tensor import Tensor


def local_conv_path(x, conv_weight, conv_bias, mix_weight, mix_bias=None, *, causal: bool = True,
                    history=None) -> Tensor:
    """Depthwise 3-D convolution followed by a linear channel mix, on ``x[T, H, W, C]``.

    Causal mode left-pads time by ``kt - 1`` so output frame t sees input frames <= t.
    ``history`` (``[kt-1, H, W, C]``, streaming only) replaces that padding with real past frames.
    """
    kt, kh, kw, _ = conv_weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"spatial conv kernel must be odd, got {kh}x{kw}")
    if history is not None:
        if history.shape[0] != kt - 1:
            raise ValueError(f"history must hold {kt - 1} frames, got {history.shape[0]}")
        y = ops.depthwise_conv3d(ops.concat([history, x], axis=0), conv_weight, temporal="valid")
    else:
        y = ops.depthwise_conv3d(x, conv_weight, temporal="causal" if causal else "same")
    y = ops.add(y, conv_bias)
    return ops.linear(y, mix_weight, mix_bias)
