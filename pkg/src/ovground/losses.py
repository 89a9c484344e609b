"""The composite training objective: span boundaries, relevance, consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    LOG_CLAMP,
    ContractError,
    Tensor,
    add,
    bce,
    clip,
    div,
    kl_divergence,
    log,
    mul,
    neg,
    scale,
    sub,
    take_per_row,
    tmean,
    tsum,
)
from .metrics import Span


@dataclass(frozen=True)
class LossBreakdown:
    l_tsgv: float
    l_rs: float
    l_cl: float
    total: float
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        parts = (self.l_tsgv, self.l_rs, self.l_cl, self.total)
        if not all(np.isfinite(parts)):
            raise ContractError(f"non-finite loss components: {parts}")
        if min(self.l_tsgv, self.l_rs, self.l_cl) < 0:
            raise ContractError(f"negative loss component: {parts}")
        want = self.l_tsgv + self.lambda1 * self.l_rs + self.lambda2 * self.l_cl
        if abs(self.total - want) > 1e-12:
            raise ContractError(f"total {self.total} != assembled {want}")


def _as_rows(t: Tensor) -> Tensor:
    from .autograd import reshape

    return reshape(t, (1, t.data.shape[0])) if t.data.ndim == 1 else t


def _check_spans(spans: list[Span], frames: int) -> None:
    for sp in spans:
        if sp.e >= frames:
            raise ContractError(f"span ({sp.s},{sp.e}) out of range for {frames} frames")


def relevance_target(spans: list[Span], frames: int) -> np.ndarray:
    """(B, T) indicator: 1 inside the ground-truth span (inclusive), else 0."""
    _check_spans(spans, frames)
    out = np.zeros((len(spans), frames))
    for i, sp in enumerate(spans):
        out[i, sp.s:sp.e + 1] = 1.0
    return out


def loss_tsgv(p_s: Tensor, p_e: Tensor, gt: Span | list[Span],
              clamp: float = LOG_CLAMP) -> Tensor:
    """Boundary cross-entropy -log P_s(s) - log P_e(e), meaned over samples."""
    spans = [gt] if isinstance(gt, Span) else list(gt)
    ps, pe = _as_rows(p_s), _as_rows(p_e)
    frames = ps.data.shape[1]
    if len(spans) != ps.data.shape[0]:
        raise ContractError(f"{len(spans)} spans for {ps.data.shape[0]} samples")
    _check_spans(spans, frames)
    s_idx = np.array([sp.s for sp in spans])
    e_idx = np.array([sp.e for sp in spans])
    at_s = clip(take_per_row(ps, s_idx), clamp, None)
    at_e = clip(take_per_row(pe, e_idx), clamp, None)
    return neg(add(tmean(log(at_s)), tmean(log(at_e))))


def loss_rs(rs: Tensor, rs_m: Tensor | None, gt: Span | list[Span]) -> Tensor:
    """Mean of the clean and masked BCE against the inside-span indicator.

    Without a masked branch (consistency training disabled), the clean BCE
    stands alone.
    """
    spans = [gt] if isinstance(gt, Span) else list(gt)
    r = _as_rows(rs)
    target = Tensor(relevance_target(spans, r.data.shape[1]))
    clean = bce(r, target)
    if rs_m is None:
        return clean
    masked = bce(_as_rows(rs_m), target)
    return scale(add(clean, masked), 0.5)


def loss_cl(rs: Tensor, rs_m: Tensor, clamp: float = LOG_CLAMP,
            bernoulli: bool = False) -> Tensor:
    """Consistency between clean and masked relevance scores.

    Default: normalize each score vector over time into a distribution and
    take KL(clean || masked). The `bernoulli` variant instead sums per-frame
    Bernoulli KLs, treating each score as an independent probability.
    """
    r, m = _as_rows(rs), _as_rows(rs_m)
    if r.data.shape != m.data.shape:
        raise ContractError(f"score shapes differ: {r.data.shape} vs {m.data.shape}")
    if bernoulli:
        p = clip(r, clamp, 1.0 - clamp)
        q = clip(m, clamp, 1.0 - clamp)
        one_minus_p = sub(Tensor(1.0), p)
        one_minus_q = sub(Tensor(1.0), q)
        per = add(mul(p, sub(log(p), log(q))),
                  mul(one_minus_p, sub(log(one_minus_p), log(one_minus_q))))
        return tmean(tsum(per, axis=-1))
    sums_r = r.data.sum(axis=-1)
    sums_m = m.data.sum(axis=-1)
    if np.any(sums_r <= 0) or np.any(sums_m <= 0):
        raise ContractError("relevance scores must have positive temporal mass")
    p = div(r, tsum(r, axis=-1, keepdims=True))
    q = div(m, tsum(m, axis=-1, keepdims=True))
    return kl_divergence(p, q, clamp=clamp)


def total_loss(l_tsgv_t: Tensor, l_rs_t: Tensor | None, l_cl_t: Tensor | None,
               lambda1: float = 0.1, lambda2: float = 0.1
               ) -> tuple[Tensor, LossBreakdown]:
    """Assemble total = l_tsgv + λ1 l_rs + λ2 l_cl; returns graph node + floats."""
    total = l_tsgv_t
    v_rs = v_cl = 0.0
    if l_rs_t is not None:
        total = add(total, scale(l_rs_t, lambda1))
        v_rs = l_rs_t.item()
    if l_cl_t is not None:
        total = add(total, scale(l_cl_t, lambda2))
        v_cl = l_cl_t.item()
    breakdown = LossBreakdown(l_tsgv=l_tsgv_t.item(), l_rs=v_rs, l_cl=v_cl,
                              total=total.item(), lambda1=lambda1, lambda2=lambda2)
    return total, breakdown
