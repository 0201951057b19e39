"""Training losses: masked cross-entropy and the dual-KL divergence anchor.

The supervised loss is mean token-level cross-entropy over masked positions.
The divergence loss compares the adapting model's next-token distributions
against the frozen reference model's on pre-generated continuation positions:
per position KL(p_ref || p_cur) + KL(p_cur || p_ref), averaged over positions.
Probabilities pass through the clamped softmax (>= 1e-12) before any log, so
both directions stay finite for any finite logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_FLOOR, ShapeError, Tensor


def ref_probs(logits: np.ndarray) -> np.ndarray:
    """Clamped row softmax for the no-gradient reference side.

    Mirrors softmax_rows exactly, so identical logits on the two sides
    produce bitwise-identical probabilities (and a divergence of exactly 0).
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def sft_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean cross-entropy of logits[t] against targets[t] where mask[t].

    With every position masked in, this is ordinary sequence cross-entropy;
    padding positions are excluded by the mask.  An empty mask is rejected.
    """
    if logits.ndim != 2:
        raise ShapeError(f"sft_loss expects (T, V) logits, got {logits.shape}")
    n_pos, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    msk = np.asarray(mask, dtype=bool)
    if tgt.shape != (n_pos,) or msk.shape != (n_pos,):
        raise ShapeError(
            f"sft_loss: logits {logits.shape} vs targets {tgt.shape} / mask {msk.shape}")
    n_masked = int(msk.sum())
    if n_masked == 0:
        raise ValueError("sft_loss: mask selects no positions")
    if tgt[msk].min() < 0 or tgt[msk].max() >= vocab:
        raise ValueError(f"sft_loss: target id out of range [0, {vocab})")
    pick = np.zeros((n_pos, vocab))
    pick[msk, tgt[msk]] = 1.0
    log_probs = ad.log_softmax_rows(logits)
    total = ad.reduce_sum(ad.mul(log_probs, Tensor(pick)))
    return ad.mul_scalar(total, -1.0 / n_masked)


def div_loss(cur_logits: Tensor, ref_logits: np.ndarray) -> Tensor:
    """Mean over positions of KL(ref || cur) + KL(cur || ref).

    The reference side is a plain array: it is the frozen model's output and
    receives no gradient.  Non-negative by construction; exactly zero when the
    two sides carry identical logits.
    """
    ref = np.asarray(ref_logits, dtype=np.float64)
    if cur_logits.ndim != 2 or ref.shape != cur_logits.shape:
        raise ShapeError(
            f"div_loss: cur {cur_logits.shape} vs ref {ref.shape}")
    n_pos = cur_logits.shape[0]
    p_ref = Tensor(ref_probs(ref))
    log_ref = Tensor(np.log(p_ref.data))
    p_cur = ad.softmax_rows(cur_logits)
    log_cur = ad.log(p_cur)
    kl_ref_cur = ad.reduce_sum(ad.mul(p_ref, ad.sub(log_ref, log_cur)))
    kl_cur_ref = ad.reduce_sum(ad.mul(p_cur, ad.sub(log_cur, log_ref)))
    return ad.mul_scalar(ad.add(kl_ref_cur, kl_cur_ref), 1.0 / n_pos)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-item loss report; exactly one of sft/div is set for a train item."""

    sft: float | None
    div: float | None
    alpha: float
    combined: float


def combine(sft: float | None, div: float | None, alpha: float) -> LossBreakdown:
    """combined = sft + alpha * div, with absent terms contributing zero."""
    if sft is None and div is None:
        raise ValueError("combine: no loss terms present")
    combined = (sft or 0.0) + alpha * (div or 0.0)
    return LossBreakdown(sft=sft, div=div, alpha=alpha, combined=combined)
