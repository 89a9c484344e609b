"""Hierarchical text encoder: a pre-norm transformer tapped every two layers.

Level 0 is the raw token embedding sequence; level i is the encoder state
after 2i layers, so n_levels taps need 2*(n_levels-1) layers. All samples in
a batch are row-stacked and isolated from each other (and from PAD keys)
through additive -inf attention logits, which keeps batched and per-sample
encoding numerically equivalent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ShapeError,
    Tensor,
    add,
    affine,
    attention,
    encoder_layer,
    layer_norm,
    parameter,
    relu,
    take_rows,
)


@dataclass
class HemConfig:
    n_levels: int = 4
    d: int = 128
    heads: int = 4
    ffn: int | None = None
    max_len: int = 32

    def __post_init__(self):
        if self.ffn is None:
            self.ffn = 4 * self.d
        if self.n_levels < 2:
            raise ShapeError(f"need at least 2 levels, got {self.n_levels}")
        if self.d % self.heads != 0:
            raise ShapeError(f"width {self.d} not divisible by {self.heads} heads")

    @property
    def depth(self) -> int:
        return 2 * (self.n_levels - 1)


@dataclass
class HierarchicalTextSet:
    """N per-level text representations sharing one padding mask."""

    levels: list[Tensor]
    pad: np.ndarray

    def __post_init__(self):
        shapes = {lv.data.shape for lv in self.levels}
        if len(shapes) != 1:
            raise ShapeError(f"levels disagree on shape: {shapes}")


def block_key_bias(lengths: list[int], pad: np.ndarray) -> np.ndarray:
    """(R, R) additive logits: 0 within a sample, -inf across samples or at PAD keys."""
    r = int(np.sum(lengths))
    if pad.shape != (r,):
        raise ShapeError(f"pad mask of {pad.shape} for {r} stacked rows")
    bias = np.full((r, r), -np.inf)
    at = 0
    for ln in lengths:
        bias[at:at + ln, at:at + ln] = 0.0
        at += ln
    bias[:, pad] = -np.inf
    return bias


class HierarchicalTextEncoder:
    def __init__(self, cfg: HemConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, f = cfg.d, cfg.ffn
        self._p: dict[str, Tensor] = {"pos": parameter(0.02 * rng.normal(size=(cfg.max_len, d)))}
        sd, sf = 1.0 / np.sqrt(d), 1.0 / np.sqrt(f)
        for l in range(cfg.depth):
            p = f"l{l}."
            for w in ("wq", "wk", "wv", "wo"):
                self._p[p + w] = parameter(sd * rng.normal(size=(d, d)))
                self._p[p + w.replace("w", "b")] = parameter(np.zeros(d))
            self._p[p + "ln1_g"] = parameter(np.ones(d))
            self._p[p + "ln1_b"] = parameter(np.zeros(d))
            self._p[p + "ln2_g"] = parameter(np.ones(d))
            self._p[p + "ln2_b"] = parameter(np.zeros(d))
            self._p[p + "w1"] = parameter(sd * rng.normal(size=(d, f)))
            self._p[p + "b1"] = parameter(np.zeros(f))
            self._p[p + "w2"] = parameter(sf * rng.normal(size=(f, d)))
            self._p[p + "b2"] = parameter(np.zeros(d))

    def params(self, prefix: str = "text_enc.") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self._p.items()}

    def _layer(self, x: Tensor, l: int, bias: np.ndarray | None,
               blocks: int | None = None, key_pad: np.ndarray | None = None) -> Tensor:
        p = self._p
        pre = f"l{l}."
        if blocks is not None:
            return encoder_layer(
                x, p[pre + "ln1_g"], p[pre + "ln1_b"],
                p[pre + "wq"], p[pre + "bq"], p[pre + "wk"], p[pre + "bk"],
                p[pre + "wv"], p[pre + "bv"], p[pre + "wo"], p[pre + "bo"],
                p[pre + "ln2_g"], p[pre + "ln2_b"],
                p[pre + "w1"], p[pre + "b1"], p[pre + "w2"], p[pre + "b2"],
                self.cfg.heads, blocks, key_pad)
        h = layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = affine(h, p[pre + "wq"], p[pre + "bq"])
        k = affine(h, p[pre + "wk"], p[pre + "bk"])
        v = affine(h, p[pre + "wv"], p[pre + "bv"])
        a = attention(q, k, v, self.cfg.heads, bias=bias)
        x = add(x, affine(a, p[pre + "wo"], p[pre + "bo"]))
        h = layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        ff = affine(relu(affine(h, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"],
                    p[pre + "b2"])
        return add(x, ff)

    def encode_stacked(self, x: Tensor, pad: np.ndarray, lengths: list[int]) -> list[Tensor]:
        """Run row-stacked queries through the encoder, tapping every 2 layers.

        Level 0 is `x` itself, bit for bit; learned positional embeddings
        enter after the tap, so they shape deeper levels only.
        """
        if max(lengths) > self.cfg.max_len:
            raise ShapeError(
                f"query length {max(lengths)} exceeds positional table {self.cfg.max_len}")
        if x.data.shape[1] != self.cfg.d:
            raise ShapeError(f"embedding width {x.data.shape[1]} != configured {self.cfg.d}")
        if len(set(lengths)) == 1:
            # equal-length queries batch as blocks, skipping the dense bias
            bias, blocks, key_pad = None, len(lengths), np.asarray(pad, dtype=bool)
        else:
            bias, blocks, key_pad = block_key_bias(lengths, pad), None, None
        taps = [x]
        posidx = np.concatenate([np.arange(n) for n in lengths])
        h = add(x, take_rows(self._p["pos"], posidx))
        for l in range(self.cfg.depth):
            h = self._layer(h, l, bias, blocks=blocks, key_pad=key_pad)
            if (l + 1) % 2 == 0:
                taps.append(h)
        return taps

    def encode(self, q_embed: Tensor, pad: np.ndarray) -> HierarchicalTextSet:
        """Single-query convenience wrapper around encode_stacked."""
        if pad.shape[0] != q_embed.data.shape[0]:
            raise ShapeError(
                f"mask length {pad.shape[0]} != query length {q_embed.data.shape[0]}")
        levels = self.encode_stacked(q_embed, pad, [q_embed.data.shape[0]])
        return HierarchicalTextSet(levels=levels, pad=pad)
