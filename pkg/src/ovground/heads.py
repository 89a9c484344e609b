"""Per-level grounding heads and the learnable level aggregation.

The fuser folds gated video features together with level text through cross
attention, then a short temporal convolution (kernel 3) so boundary frames
can see their neighbors; both are pre-norm residual blocks and the result is
closed by a layer norm. Span and relevance heads are small per-frame MLPs;
level outputs are combined by a convex combination whose weights come from
trainable seed vectors pushed through a shared scoring MLP and a softmax.

All heads run on row-stacked batches: features arrive as (B*T, d) with each
consecutive block of `frames` rows one sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    affine,
    attention,
    convex_mix,
    cross_attn_conv_layer,
    layer_norm,
    parameter,
    relu,
    reshape,
    sigmoid,
    slice_cols,
    softmax,
    temporal_conv,
)
from .metrics import Span


@dataclass
class BranchOutput:
    """Span distributions plus relevance scores, (T,) or (B, T) each."""

    p_s: Tensor
    p_e: Tensor
    rs: Tensor
    rs_m: Tensor | None = None

    def __post_init__(self):
        shape = self.p_s.data.shape
        for name, t in (("p_e", self.p_e), ("rs", self.rs)):
            if t.data.shape != shape:
                raise ShapeError(f"{name} shape {t.data.shape} != p_s shape {shape}")
        if self.rs_m is not None and self.rs_m.data.shape != shape:
            raise ShapeError("rs_m shape mismatch")
        for name, t in (("p_s", self.p_s), ("p_e", self.p_e)):
            sums = t.data.sum(axis=-1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise ContractError(f"{name} rows must sum to 1 within 1e-6")
        for name, t in (("rs", self.rs), ("rs_m", self.rs_m)):
            if t is not None and not np.all((t.data > 0) & (t.data < 1)):
                raise ContractError(f"{name} entries must lie strictly in (0,1)")

    @property
    def frames(self) -> int:
        return self.p_s.data.shape[-1]


class FeatureFuser:
    """Cross-attention + temporal conv residual blocks, shared across levels."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        sd, sc = 1.0 / np.sqrt(d), 1.0 / np.sqrt(3 * d)
        self.heads = heads
        p: dict[str, Tensor] = {}
        for w in ("wq", "wk", "wv", "wo"):
            p[w] = parameter(sd * rng.normal(size=(d, d)))
            p[w.replace("w", "b")] = parameter(np.zeros(d))
        for ln in ("ln1", "lnc", "ln2"):
            p[ln + "_g"] = parameter(np.ones(d))
            p[ln + "_b"] = parameter(np.zeros(d))
        p["conv_w"] = parameter(sc * rng.normal(size=(3, d, d)))
        p["conv_b"] = parameter(np.zeros(d))
        self._p = p

    def params(self, prefix: str = "fuser.") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self._p.items()}

    def fuse(self, v_hat: Tensor, q: Tensor, bias: np.ndarray, frames: int) -> Tensor:
        qh, kh, vh = self._qkv(v_hat, q)
        a = attention(qh, kh, vh, self.heads, bias=bias)
        return self._finish(v_hat, a, frames)

    def fuse_blocks(self, v_hat: Tensor, q: Tensor, blocks: int,
                    key_pad: np.ndarray, frames: int) -> Tensor:
        """Batched variant over row-stacked samples (block-diagonal access)."""
        p = self._p
        return cross_attn_conv_layer(
            v_hat, q, p["ln1_g"], p["ln1_b"],
            p["wq"], p["bq"], p["wk"], p["bk"], p["wv"], p["bv"],
            p["wo"], p["bo"], p["lnc_g"], p["lnc_b"],
            p["conv_w"], p["conv_b"], p["ln2_g"], p["ln2_b"],
            self.heads, blocks, frames, key_pad)

    def _qkv(self, v_hat: Tensor, q: Tensor):
        if v_hat.data.shape[1] != q.data.shape[1]:
            raise ShapeError(
                f"video width {v_hat.data.shape[1]} != text width {q.data.shape[1]}")
        p = self._p
        h = layer_norm(v_hat, p["ln1_g"], p["ln1_b"])
        return (affine(h, p["wq"], p["bq"]),
                affine(q, p["wk"], p["bk"]),
                affine(q, p["wv"], p["bv"]))

    def _finish(self, v_hat: Tensor, a: Tensor, frames: int) -> Tensor:
        p = self._p
        x = add(v_hat, affine(a, p["wo"], p["bo"]))
        c = layer_norm(x, p["lnc_g"], p["lnc_b"])
        x = add(x, relu(temporal_conv(c, p["conv_w"], p["conv_b"], frames)))
        return layer_norm(x, p["ln2_g"], p["ln2_b"])

    def fuse_single(self, v_hat: Tensor, q: Tensor, pad: np.ndarray) -> Tensor:
        pad = np.asarray(pad, dtype=bool)
        if pad.all():
            raise ContractError("query is entirely PAD")
        bias = np.zeros((v_hat.data.shape[0], pad.shape[0]))
        bias[:, pad] = -np.inf
        return self.fuse(v_hat, q, bias, frames=v_hat.data.shape[0])


class SpanPredictor:
    """Per-frame MLP d -> hidden -> 2; softmax over frames per sample."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int = 64):
        s = 1.0 / np.sqrt(d)
        self.w1 = parameter(s * rng.normal(size=(d, hidden)))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(rng.normal(size=(hidden, 2)) / np.sqrt(hidden))
        self.b2 = parameter(np.zeros(2))

    def params(self, prefix: str = "span.") -> dict[str, Tensor]:
        return {prefix + "w1": self.w1, prefix + "b1": self.b1,
                prefix + "w2": self.w2, prefix + "b2": self.b2}

    def __call__(self, f: Tensor, frames: int) -> tuple[Tensor, Tensor]:
        rows = f.data.shape[0]
        if frames < 2 or rows % frames:
            raise ShapeError(f"{rows} rows do not split into {frames}-frame samples")
        h = relu(affine(f, self.w1, self.b1))
        logits = affine(h, self.w2, self.b2)
        nb = rows // frames
        p_s = softmax(reshape(slice_cols(logits, 0, 1), (nb, frames)), axis=-1)
        p_e = softmax(reshape(slice_cols(logits, 1, 2), (nb, frames)), axis=-1)
        return p_s, p_e

    def single(self, f: Tensor) -> tuple[Tensor, Tensor]:
        t = f.data.shape[0]
        p_s, p_e = self(f, t)
        return reshape(p_s, (t,)), reshape(p_e, (t,))


class RelevancePredictor:
    """Per-frame MLP d -> hidden -> 1 with a sigmoid."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int = 64):
        s = 1.0 / np.sqrt(d)
        self.w1 = parameter(s * rng.normal(size=(d, hidden)))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(rng.normal(size=(hidden, 1)) / np.sqrt(hidden))
        self.b2 = parameter(np.zeros(1))

    def params(self, prefix: str = "rel.") -> dict[str, Tensor]:
        return {prefix + "w1": self.w1, prefix + "b1": self.b1,
                prefix + "w2": self.w2, prefix + "b2": self.b2}

    def __call__(self, f: Tensor, frames: int) -> Tensor:
        rows = f.data.shape[0]
        if rows % frames:
            raise ShapeError(f"{rows} rows do not split into {frames}-frame samples")
        h = relu(affine(f, self.w1, self.b1))
        score = affine(h, self.w2, self.b2)
        return sigmoid(reshape(score, (rows // frames, frames)))

    def single(self, f: Tensor) -> Tensor:
        t = f.data.shape[0]
        return reshape(self(f, t), (t,))


class WeightedAggregator:
    """Convex combination of level outputs, weighted by scored seed vectors.

    Each level owns a trainable seed in R^d; a shared MLP maps seeds to
    scalars and a softmax turns those into weights, so the weights are
    data-independent but learned.
    """

    def __init__(self, n_levels: int, d: int, rng: np.random.Generator,
                 hidden: int = 32):
        if n_levels < 1:
            raise ShapeError("need at least one level")
        self.n_levels = n_levels
        self.seeds = parameter(rng.normal(size=(n_levels, d)) / np.sqrt(d))
        s = 1.0 / np.sqrt(d)
        self.w1 = parameter(s * rng.normal(size=(d, hidden)))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(rng.normal(size=(hidden, 1)) / np.sqrt(hidden))
        self.b2 = parameter(np.zeros(1))

    def params(self, prefix: str = "agg.") -> dict[str, Tensor]:
        return {prefix + "seeds": self.seeds, prefix + "w1": self.w1,
                prefix + "b1": self.b1, prefix + "w2": self.w2, prefix + "b2": self.b2}

    def weights(self) -> Tensor:
        """(n_levels,) positive weights summing to 1."""
        h = relu(affine(self.seeds, self.w1, self.b1))
        scores = affine(h, self.w2, self.b2)
        return softmax(reshape(scores, (self.n_levels,)))

    def aggregate(self, branches: list[BranchOutput]) -> BranchOutput:
        if len(branches) != self.n_levels:
            raise ShapeError(f"{len(branches)} branches for {self.n_levels} seeds")
        shapes = {b.p_s.data.shape for b in branches}
        if len(shapes) != 1:
            raise ShapeError(f"branches disagree on shape: {shapes}")
        w = self.weights()
        has_masked = all(b.rs_m is not None for b in branches)

        def combine(parts: list[Tensor]) -> Tensor:
            return convex_mix(parts, w)

        return BranchOutput(
            p_s=combine([b.p_s for b in branches]),
            p_e=combine([b.p_e for b in branches]),
            rs=combine([b.rs for b in branches]),
            rs_m=combine([b.rs_m for b in branches]) if has_masked else None,
        )


def decode_span(p_s, p_e) -> Span:
    """Best (s, e) with s <= e under the product P_s(s) * P_e(e).

    Ties resolve to the smallest s, then the smallest e, which is exactly
    the first maximum in a row-major scan of the score matrix.
    """
    ps = p_s.data if isinstance(p_s, Tensor) else np.asarray(p_s, dtype=np.float64)
    pe = p_e.data if isinstance(p_e, Tensor) else np.asarray(p_e, dtype=np.float64)
    if ps.ndim != 1 or ps.shape != pe.shape:
        raise ShapeError(f"decode_span expects matching vectors, got {ps.shape}/{pe.shape}")
    t = ps.shape[0]
    scores = np.where(np.triu(np.ones((t, t), dtype=bool)), np.outer(ps, pe), -1.0)
    flat = int(np.argmax(scores))
    return Span(flat // t, flat % t)


def decode_batch(p_s: Tensor, p_e: Tensor) -> list[Span]:
    return [decode_span(p_s.data[i], p_e.data[i]) for i in range(p_s.data.shape[0])]
