"""Classification, segmentation and combined training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DICE_EPS = 1e-6
PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class HyperParams:
    t: float = 0.7
    lam: float = 0.25
    alpha: float = 5.0
    beta: float = 0.01
    m: int = 10
    eps_dice: float = DICE_EPS
    eps_kl: float = PROB_CLAMP
    unsup_normalization: str = "full"  # "full" | "retained"

    def validate(self) -> None:
        if not 0.5 < self.t <= 1.0:
            raise ValueError(f"t must lie in (0.5, 1], got {self.t}")
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.m < 1:
            raise ValueError("minibatch size must be >= 1")
        if self.unsup_normalization not in ("full", "retained"):
            raise ValueError(f"unknown normalization {self.unsup_normalization!r}")


@dataclass
class PseudoLabelBatch:
    labels: np.ndarray
    mask: np.ndarray
    confidence: np.ndarray

    @property
    def retained(self) -> int:
        return int(self.mask.sum())


@dataclass
class LossReport:
    """Per-step scalars. The ``L_c_unsup``, ``L_s_dice`` and ``L_s_kl`` fields
    hold weighted contributions (already multiplied by lambda, alpha, beta)."""

    L_total: float
    L_c_sup: float
    L_c_unsup: float
    L_s_dice: float
    L_s_kl: float
    retained_count: int

    def recomposed(self) -> float:
        return self.L_c_sup + self.L_c_unsup + self.L_s_dice + self.L_s_kl


def cross_entropy(logits: Tensor, labels, mask=None, normalization: str = "full") -> Tensor:
    """Mean negative log-likelihood; masked-out samples contribute zero.

    With ``normalization="full"`` the sum is divided by the whole stream size,
    otherwise by the number of retained samples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[0]
    if m == 0:
        raise ValueError("cross_entropy on an empty batch")
    if np.any((labels < 0) | (labels > 1)):
        raise ValueError("labels must be 0 or 1")
    nll = ad.gather_rows(ad.log_softmax(logits), labels) * -1.0
    if mask is None:
        return nll.mean()
    w = np.asarray(mask, dtype=logits.dtype)
    denom = m if normalization == "full" else max(float(w.sum()), 1.0)
    return (nll * w).sum() * (1.0 / denom)


def pseudo_label(probs, t: float) -> PseudoLabelBatch:
    """Argmax labels (lowest index on ties), retained where confidence >= t."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    labels = p.argmax(axis=1)
    conf = p.max(axis=1)
    return PseudoLabelBatch(labels=labels, mask=conf >= t, confidence=conf)


def classification_objective(c_l: Tensor, labels, c_g: Tensor | None, plb: PseudoLabelBatch | None, lam: float,
                             normalization: str = "full") -> tuple[Tensor, dict]:
    sup = cross_entropy(c_l, labels)
    if c_g is None or plb is None:
        unsup = Tensor(np.zeros((), dtype=c_l.dtype))
    else:
        unsup = cross_entropy(c_g, plb.labels, plb.mask, normalization)
    total = sup + unsup * lam
    return total, {"L_c_sup": sup, "L_c_unsup": unsup}


def dice_loss(s_hat: Tensor, s, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss averaged over the batch."""
    s = ad.as_tensor(s, like=s_hat)
    if s.shape != s_hat.shape:
        raise ValueError(f"dice_loss: prediction {s_hat.shape} vs mask {s.shape}")
    axes = tuple(range(1, s_hat.ndim))
    inter = (s_hat * s).sum(axis=axes)
    denom = s_hat.sum(axis=axes) + s.sum(axis=axes) + eps
    return (1.0 - (inter * 2.0 + eps) / denom).mean()


def kl_consistency(s_l: Tensor, s_u: Tensor, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean Bernoulli KL(p || q) with the labeled prediction p as a detached target."""
    if s_l.shape != s_u.shape:
        raise ValueError(f"kl_consistency: {s_l.shape} vs {s_u.shape}")
    p = np.clip(ad.stop_gradient(s_l).data, clamp, 1.0 - clamp)
    q = ad.clamp(s_u, clamp, 1.0 - clamp)
    pt = Tensor(p)
    term1 = pt * (np.log(p) - ad.log(q))
    term2 = (1.0 - pt) * (np.log(1.0 - p) - ad.log(1.0 - q))
    return (term1 + term2).mean()


def segmentation_objective(s_l, s_hat_l: Tensor, s_hat_u: Tensor | None, alpha: float, beta: float,
                           eps_dice: float = DICE_EPS, eps_kl: float = PROB_CLAMP) -> tuple[Tensor, dict]:
    dice = dice_loss(s_hat_l, s_l, eps_dice)
    if s_hat_u is None:
        kl = Tensor(np.zeros((), dtype=s_hat_l.dtype))
    else:
        kl = kl_consistency(s_hat_l, s_hat_u, eps_kl)
    return dice * alpha + kl * beta, {"L_s_dice": dice, "L_s_kl": kl}


def total_loss(cls_terms: dict, seg_terms: dict, hp: HyperParams, retained: int = 0) -> tuple[Tensor, LossReport]:
    """Combined minibatch loss.

    Each component is already a per-batch mean, so the outer ``1/m`` average
    reduces to a plain weighted sum of the components.
    """
    parts = [
        cls_terms["L_c_sup"],
        cls_terms["L_c_unsup"] * hp.lam,
        seg_terms["L_s_dice"] * hp.alpha,
        seg_terms["L_s_kl"] * hp.beta,
    ]
    total = parts[0] + parts[1] + parts[2] + parts[3]
    report = LossReport(
        float(total.data), *(float(p.data) for p in parts), retained_count=int(retained)
    )
    if not np.isfinite(report.L_total):
        raise ad.NonFiniteError("total loss is not finite")
    return total, report
