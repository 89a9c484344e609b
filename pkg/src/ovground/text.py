"""Vocabulary, frozen token embeddings, and the random masking primitive."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor, add, mul, parameter, reshape, take_rows

PAD, MASK, UNK = 0, 1, 2
PAD_TOKEN, MASK_TOKEN, UNK_TOKEN = "<pad>", "<mask>", "<unk>"
RESERVED = (PAD_TOKEN, MASK_TOKEN, UNK_TOKEN)


class Vocabulary:
    """Token <-> id bijection with reserved PAD=0, MASK=1, UNK=2 slots."""

    def __init__(self, tokens: list[str] = ()):
        self._id_to_token: list[str] = list(RESERVED)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token in self._token_to_id:
            return self._token_to_id[token]
        nid = len(self._id_to_token)
        self._id_to_token.append(token)
        self._token_to_id[token] = nid
        return nid

    def id_of(self, token: str) -> int:
        """Unknown tokens map to UNK, never fail."""
        return self._token_to_id.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self._id_to_token[3:]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"tokens": self.tokens}, f, indent=0)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        return cls(payload["tokens"])

    def make_query(self, tokens: list[str], pad_to: int | None = None) -> "Query":
        ids = [self.id_of(t) for t in tokens]
        toks = list(tokens)
        if pad_to is not None:
            if pad_to < len(ids):
                raise ContractError(f"pad_to={pad_to} shorter than query of {len(ids)}")
            ids += [PAD] * (pad_to - len(ids))
            toks += [PAD_TOKEN] * (pad_to - len(tokens))
        return Query(tokens=toks, ids=np.array(ids, dtype=np.int64))


@dataclass
class Query:
    """A tokenized sentence; `pad` is True exactly at PAD positions."""

    tokens: list[str]
    ids: np.ndarray
    pad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.pad = self.ids == PAD
        if len(self.tokens) != self.ids.shape[0]:
            raise ContractError(
                f"{len(self.tokens)} tokens but {self.ids.shape[0]} ids")
        if int((~self.pad).sum()) < 1:
            raise ContractError("query has no non-PAD tokens")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_real(self) -> int:
        return int((~self.pad).sum())


class EmbeddingTable:
    """Token embedding matrix, frozen except for an always-trainable MASK row.

    With frozen=True (the default) the stored matrix never receives
    gradients; the MASK embedding is a separate trainable vector initialized
    from the supplied MASK row. With frozen=False the whole matrix trains.
    The PAD row reads as zero either way.
    """

    def __init__(self, table: np.ndarray, frozen: bool = True):
        t = np.array(table, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 3:
            raise ContractError(f"embedding table shape {t.shape} lacks reserved rows")
        t[PAD] = 0.0
        self.frozen = frozen
        self.d = t.shape[1]
        if frozen:
            self.mask_row = parameter(t[MASK].copy())
            t[MASK] = 0.0
            self.base = t
            self.weights = None
        else:
            self.weights = parameter(t)
            self.base = None
            self.mask_row = None

    @property
    def rows(self) -> int:
        m = self.base if self.frozen else self.weights.data
        return m.shape[0]

    def params(self) -> dict[str, Tensor]:
        if self.frozen:
            return {"embed.mask_row": self.mask_row}
        return {"embed.weights": self.weights}

    def matrix(self) -> np.ndarray:
        """Current effective table as a plain array (reads, not training)."""
        if self.frozen:
            m = self.base.copy()
            m[MASK] = self.mask_row.data
            return m
        m = self.weights.data.copy()
        m[PAD] = 0.0
        return m


def embed_ids(ids: np.ndarray, table: EmbeddingTable) -> Tensor:
    """Embedding rows for an id sequence; PAD positions come out zero."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise ContractError(
            f"token id out of range for table with {table.rows} rows")
    if table.frozen:
        out = take_rows(Tensor(table.base), ids)
        hit = (ids == MASK)
        if hit.any():
            ind = hit.astype(np.float64)[:, None]
            out = add(out, mul(Tensor(ind), reshape(table.mask_row, (1, table.d))))
    else:
        out = mul(take_rows(table.weights, ids),
                  Tensor((ids != PAD).astype(np.float64)[:, None]))
    return out


def embed(query: Query, table: EmbeddingTable) -> Tensor:
    return embed_ids(query.ids, table)


def random_mask(query: Query, ratio: float, rng: np.random.Generator | int) -> Query:
    """Replace max(1, ceil(ratio * non-PAD count)) real tokens with MASK.

    PAD positions are never touched; the same seed always picks the same
    positions.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must be in (0, 1), got {ratio}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    real = np.flatnonzero(~query.pad)
    if real.size == 0:
        raise ContractError("cannot mask a query with no non-PAD tokens")
    k = max(1, int(np.ceil(ratio * real.size)))
    chosen = rng.choice(real, size=k, replace=False)
    ids = query.ids.copy()
    ids[chosen] = MASK
    tokens = list(query.tokens)
    for i in chosen:
        tokens[i] = MASK_TOKEN
    return Query(tokens=tokens, ids=ids)


def save_embeddings(bin_path: str, matrix: np.ndarray) -> None:
    """Little-endian f32 matrix plus a {rows, dim} JSON sidecar."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    with open(bin_path, "wb") as f:
        f.write(m.tobytes())
    with open(_sidecar(bin_path), "w", encoding="utf-8") as f:
        json.dump({"rows": int(m.shape[0]), "dim": int(m.shape[1])}, f)
        f.write("\n")


def load_embeddings(bin_path: str) -> np.ndarray:
    with open(_sidecar(bin_path), "r", encoding="utf-8") as f:
        meta = json.load(f)
    raw = open(bin_path, "rb").read()
    expect = meta["rows"] * meta["dim"] * 4
    if len(raw) != expect:
        raise ValueError(
            f"embeddings blob has {len(raw)} bytes, manifest implies {expect}")
    flat = np.frombuffer(raw, dtype="<f4")
    return flat.reshape(meta["rows"], meta["dim"]).astype(np.float64)


def _sidecar(bin_path: str) -> str:
    if not bin_path.endswith(".bin"):
        raise ValueError(f"embeddings path must end in .bin, got {bin_path!r}")
    return bin_path[: -len(".bin")] + ".json"
