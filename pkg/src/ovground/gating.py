"""Video projection and the parameter-free semantic gate.

The gate scores each projected frame against every real text token with a
single softmax over raw dot products (no learned projections, temperature
1/sqrt(d)), pools the token vectors it attends to, and squashes the result
through a sigmoid into per-coordinate relevance in (0,1). Multiplying the
projected video by that gate suppresses query-irrelevant content and can
never amplify a coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    ContractError,
    ShapeError,
    Tensor,
    affine,
    attention,
    block_attention,
    matmul,
    mul,
    parameter,
    relu,
    sigmoid,
)


class VideoProjector:
    """Trainable frame-feature alignment: d_v -> d with a relu."""

    def __init__(self, d_v: int, d: int, rng: np.random.Generator):
        self.w = parameter(rng.normal(size=(d_v, d)) / np.sqrt(d_v))
        self.b = parameter(np.zeros(d))

    def params(self, prefix: str = "vproj.") -> dict[str, Tensor]:
        return {prefix + "w": self.w, prefix + "b": self.b}

    def __call__(self, v) -> Tensor:
        v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
        return relu(affine(v, self.w, self.b))


@dataclass
class SgvfProjections:
    """Optional learned query/key/value maps for the gate (off by default)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def fresh(cls, d: int, rng: np.random.Generator) -> "SgvfProjections":
        s = 1.0 / np.sqrt(d)
        return cls(parameter(s * rng.normal(size=(d, d))),
                   parameter(s * rng.normal(size=(d, d))),
                   parameter(s * rng.normal(size=(d, d))))

    def params(self, prefix: str = "gate.") -> dict[str, Tensor]:
        return {prefix + "wq": self.wq, prefix + "wk": self.wk, prefix + "wv": self.wv}


@dataclass
class FilteredVisual:
    v_hat: Tensor
    gate: Tensor


def semantic_gate(v_proj: Tensor, q: Tensor, bias: np.ndarray,
                  proj: SgvfProjections | None = None) -> FilteredVisual:
    """Gate stacked video rows by stacked text rows under additive `bias` logits."""
    if v_proj.data.shape[1] != q.data.shape[1]:
        raise ShapeError(
            f"video width {v_proj.data.shape[1]} != text width {q.data.shape[1]}")
    if not np.all(np.isfinite(bias).any(axis=1)):
        raise ContractError("a video row has no attendable text token")
    if proj is None:
        pooled = attention(v_proj, q, q, 1, bias=bias)
    else:
        pooled = attention(matmul(v_proj, proj.wq), matmul(q, proj.wk),
                           matmul(q, proj.wv), 1, bias=bias)
    gate = sigmoid(pooled)
    return FilteredVisual(v_hat=mul(v_proj, gate), gate=gate)


def semantic_gate_blocks(v_proj: Tensor, q: Tensor, blocks: int,
                         key_pad: np.ndarray,
                         proj: SgvfProjections | None = None) -> FilteredVisual:
    """Batched gate over row-stacked samples; equals `semantic_gate` under a
    block-diagonal bias but avoids materializing cross-sample logits."""
    if v_proj.data.shape[1] != q.data.shape[1]:
        raise ShapeError(
            f"video width {v_proj.data.shape[1]} != text width {q.data.shape[1]}")
    if proj is None:
        pooled = block_attention(v_proj, q, q, 1, blocks, key_pad)
    else:
        pooled = block_attention(matmul(v_proj, proj.wq), matmul(q, proj.wk),
                                 matmul(q, proj.wv), 1, blocks, key_pad)
    gate = sigmoid(pooled)
    return FilteredVisual(v_hat=mul(v_proj, gate), gate=gate)


def sgvf(v_proj: Tensor, q_i: Tensor, pad: np.ndarray,
         proj: SgvfProjections | None = None) -> FilteredVisual:
    """Single-sample gate: PAD text positions are excluded from the softmax."""
    pad = np.asarray(pad, dtype=bool)
    if pad.all():
        raise ContractError("query is entirely PAD")
    bias = np.zeros((v_proj.data.shape[0], pad.shape[0]))
    bias[:, pad] = -np.inf
    return semantic_gate(v_proj, q_i, bias, proj=proj)


def cfre_branch(v_proj: Tensor, q_i: Tensor, q_i_masked: Tensor | None,
                pad: np.ndarray, proj: SgvfProjections | None = None
                ) -> tuple[FilteredVisual, FilteredVisual | None]:
    """Filter with clean and (when given) masked text, sharing all weights."""
    clean = sgvf(v_proj, q_i, pad, proj=proj)
    if q_i_masked is None:
        return clean, None
    if q_i_masked.data.shape != q_i.data.shape:
        raise ShapeError("masked text must match the clean text's shape")
    return clean, sgvf(v_proj, q_i_masked, pad, proj=proj)
