"""Class-score saliency maps and the bridge tensor handed to the decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelParams, classify, encode

BRIDGE_DOWNSAMPLE_STEPS = 3


@dataclass
class SaliencyOutput:
    y: Tensor
    b: Tensor
    b_down: Tensor
    predicted: np.ndarray
    confidence: np.ndarray


def minmax_per_sample(g: np.ndarray) -> np.ndarray:
    """Scale each sample to [0, 1]; constant samples become all zeros."""
    flat = g.reshape(g.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(g.shape).astype(g.dtype)


def raw_saliency(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """|d logit[argmax] / d x| per sample, unnormalized; also argmax class and confidence."""
    frozen = params.detached()
    with ad.enable_grad():
        xt = Tensor(np.array(x, dtype=frozen["head.fc.weight"].dtype), requires_grad=True)
        logits = classify(frozen, encode(frozen, xt, training=False))
        pred = logits.data.argmax(axis=1)
        ad._check_finite(logits.data, "saliency")
        # samples are independent in eval mode, so one sweep over the sum yields every per-sample gradient
        score = ad.gather_rows(logits, pred).sum()
        grad = ad.backward(score)[xt]
    if not np.all(np.isfinite(grad)):
        raise ad.NonFiniteError("saliency: non-finite input gradient")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return np.abs(grad), pred, probs.max(axis=1)


def compute_saliency(params: ModelParams, x: np.ndarray) -> Tensor:
    """Normalized, detached saliency map with the same shape as ``x``."""
    g, _, _ = raw_saliency(params, x)
    return ad.stop_gradient(minmax_per_sample(g))


def build_bridge(y: Tensor, x) -> Tensor:
    """Concatenate saliency with the image and average-pool by 8."""
    x = ad.as_tensor(x, like=y)
    if y.shape != x.shape:
        raise ValueError(f"saliency {y.shape} and image {x.shape} differ")
    b = ad.concat_channels([y, x])
    for _ in range(BRIDGE_DOWNSAMPLE_STEPS):
        b = ad.avgpool2(b)
    return b


def saliency_output(params: ModelParams, x: np.ndarray) -> SaliencyOutput:
    g, pred, conf = raw_saliency(params, x)
    y = ad.stop_gradient(minmax_per_sample(g))
    xt = Tensor(np.asarray(x, dtype=y.dtype))
    b = ad.concat_channels([y, xt])
    return SaliencyOutput(y=y, b=b, b_down=build_bridge(y, xt), predicted=pred, confidence=conf)


def bridge_for(params: ModelParams, x: np.ndarray) -> tuple[Tensor, Tensor]:
    y = compute_saliency(params, x)
    return y, build_bridge(y, x)
