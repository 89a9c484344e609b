"""Full grounding model: frozen token embeddings, a hierarchical text
encoder tapped at several depths, per-level semantic gating of the video,
cross-modal fusion, span/relevance heads, and a learned convex combination
of the per-level outputs.

Batches are processed as row-stacked super-samples under block-diagonal
attention biases, so one forward pass covers the whole batch; in training
mode the clean and masked text branches ride in a single stacked pass that
shares every weight, which is exactly equivalent to two separate passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .autograd import (
    ContractError,
    ShapeError,
    Tensor,
    affine,
    mul,
    parameter,
    concat_rows,
    take_rows,
)
from .data import Sample
from .encoder import HemConfig, HierarchicalTextEncoder
from .gating import SgvfProjections, VideoProjector, semantic_gate_blocks
from .heads import (
    BranchOutput,
    FeatureFuser,
    RelevancePredictor,
    SpanPredictor,
    WeightedAggregator,
)
from .text import MASK, EmbeddingTable, Query, Vocabulary, embed_ids, random_mask

MASK_MODES = ("reencode", "zero")


@dataclass
class ModelConfig:
    d: int = 128
    n_levels: int = 4
    heads: int = 4
    max_query_len: int = 32
    mask_ratio: float = 0.15
    disable_hem: bool = False     # use only the deepest text level
    disable_sgvf: bool = False    # gate == 1: video passes unfiltered
    disable_cmtr: bool = False    # no masked branch, no consistency loss
    learned_gate_proj: bool = False
    # how the masked branch is realized: re-encode masked token ids from
    # the input, or zero the masked positions in each clean text level
    mask_mode: str = "reencode"

    def validate(self) -> None:
        if self.n_levels < 1:
            raise ContractError(f"n_levels must be >= 1, got {self.n_levels}")
        if self.d < self.heads or self.d % self.heads:
            raise ContractError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0 < self.mask_ratio <= 1:
            raise ContractError(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if self.mask_mode not in MASK_MODES:
            raise ContractError(f"mask_mode must be one of {MASK_MODES}")


@dataclass
class ForwardResult:
    final: BranchOutput
    branches: list[BranchOutput]


class GroundingModel:
    """Owns every trainable tensor; wiring follows the module docstring."""

    def __init__(self, cfg: ModelConfig, table: np.ndarray, vocab: Vocabulary,
                 seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.embed = EmbeddingTable(table, frozen=True)
        self.d_v = self.embed.d
        rng = np.random.default_rng(seed)
        # fixed construction order keeps init bitwise-reproducible per seed
        self.tproj_w = parameter(rng.normal(size=(self.d_v, cfg.d)) / np.sqrt(self.d_v))
        self.tproj_b = parameter(np.zeros(cfg.d))
        self.enc = HierarchicalTextEncoder(
            HemConfig(n_levels=cfg.n_levels, d=cfg.d, heads=cfg.heads,
                      max_len=cfg.max_query_len), rng)
        self.vproj = VideoProjector(self.d_v, cfg.d, rng)
        self.gproj = SgvfProjections.fresh(cfg.d, rng) if cfg.learned_gate_proj else None
        self.fuser = FeatureFuser(cfg.d, cfg.heads, rng)
        self.span_head = SpanPredictor(cfg.d, rng)
        self.rel_head = RelevancePredictor(cfg.d, rng)
        self.n_branches = 1 if cfg.disable_hem else cfg.n_levels
        self.agg = WeightedAggregator(self.n_branches, cfg.d, rng)

    # ------------------------------------------------------------ state

    def params(self) -> dict[str, Tensor]:
        p = dict(self.embed.params())
        p["tproj.w"] = self.tproj_w
        p["tproj.b"] = self.tproj_b
        p.update(self.enc.params())
        p.update(self.vproj.params())
        if self.gproj is not None:
            p.update(self.gproj.params())
        p.update(self.fuser.params())
        p.update(self.span_head.params())
        p.update(self.rel_head.params())
        p.update(self.agg.params())
        return p

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ContractError(
                f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ShapeError(f"{k}: shape {a.shape} != {t.data.shape}")
            t.data = a.copy()

    def meta(self) -> dict:
        return {"model_cfg": asdict(self.cfg), "d_v": self.d_v,
                "vocab_rows": self.embed.rows}

    # ------------------------------------------------------------ forward

    def queries_for(self, samples: list[Sample]) -> list[Query]:
        width = max(len(s.tokens) for s in samples)
        if width > self.cfg.max_query_len:
            raise ShapeError(
                f"query of {width} tokens exceeds max_query_len "
                f"{self.cfg.max_query_len}")
        return [self.vocab.make_query(s.tokens, pad_to=width) for s in samples]

    def _encode_text(self, queries, masked):
        """Stacked text levels; masked branch appended as extra samples."""
        width = queries[0].ids.shape[0]
        ids = np.concatenate([q.ids for q in queries])
        pad = np.concatenate([q.pad for q in queries])
        if masked is not None and self.cfg.mask_mode == "reencode":
            ids = np.concatenate([ids] + [q.ids for q in masked])
            pad = np.concatenate([pad] + [q.pad for q in masked])
        x = affine(embed_ids(ids, self.embed), self.tproj_w, self.tproj_b)
        lengths = [width] * (ids.shape[0] // width)
        taps = self.enc.encode_stacked(x, pad, lengths)
        if masked is not None and self.cfg.mask_mode == "zero":
            # blank the masked positions of each clean level instead of
            # re-encoding; the masked ids only mark which rows to drop
            keep = np.concatenate(
                [(q.ids != MASK).astype(np.float64) for q in masked])[:, None]
            taps = [concat_rows([t, mul(t, Tensor(keep))]) for t in taps]
            pad = np.concatenate([pad, pad])
        return taps, pad

    def forward_batch(self, samples: list[Sample],
                      masked: list[Query] | None = None) -> ForwardResult:
        if not samples:
            raise ContractError("empty batch")
        if masked is not None and self.cfg.disable_cmtr:
            raise ContractError("masked queries passed with disable_cmtr set")
        frames = samples[0].video.shape[0]
        for s in samples:
            if s.video.shape != (frames, self.d_v):
                raise ShapeError(
                    f"sample {s.id}: video {s.video.shape}, expected "
                    f"{(frames, self.d_v)}")
        b = len(samples)
        queries = self.queries_for(samples)
        width = queries[0].ids.shape[0]
        if masked is not None:
            if len(masked) != b or any(q.ids.shape[0] != width for q in masked):
                raise ShapeError("masked queries do not mirror the clean batch")

        taps, pad = self._encode_text(queries, masked)
        nb = b if masked is None else 2 * b

        v = self.vproj(np.concatenate([s.video for s in samples]))
        if nb != b:
            v = concat_rows([v, v])  # same projected video feeds both branches

        levels = taps[-1:] if self.cfg.disable_hem else taps
        head = np.arange(b)
        tail = np.arange(b, nb)
        clean_rows = np.arange(b * frames)
        branches = []
        for q_i in levels:
            v_hat = v if self.cfg.disable_sgvf else \
                semantic_gate_blocks(v, q_i, nb, pad, proj=self.gproj).v_hat
            fused = self.fuser.fuse_blocks(v_hat, q_i, nb, pad, frames)
            rs = self.rel_head(fused, frames)
            if nb == b:
                p_s, p_e = self.span_head(fused, frames)
                branches.append(BranchOutput(p_s=p_s, p_e=p_e, rs=rs))
            else:
                # the span loss only reads the clean branch; skip masked rows
                p_s, p_e = self.span_head(take_rows(fused, clean_rows), frames)
                branches.append(BranchOutput(
                    p_s=p_s, p_e=p_e,
                    rs=take_rows(rs, head), rs_m=take_rows(rs, tail)))
        return ForwardResult(final=self.agg.aggregate(branches), branches=branches)


def forward_sample(model: GroundingModel, sample: Sample, mode: str = "eval",
                   seed: int = 0) -> ForwardResult:
    """Single-sample convenience pass.

    In train mode (with the masked branch enabled) one masked variant of
    the query is drawn from `seed`; eval mode consumes no randomness and
    emits no masked relevance scores.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be train or eval, got {mode!r}")
    masked = None
    if mode == "train" and not model.cfg.disable_cmtr:
        (q,) = model.queries_for([sample])
        masked = [random_mask(q, model.cfg.mask_ratio, np.random.default_rng(seed))]
    return model.forward_batch([sample], masked=masked)
