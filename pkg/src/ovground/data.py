"""Planted-signal concept worlds with a controlled open-vocabulary split.

Each concept owns a unit-norm visual signature and two disjoint token
pools: "seen" tokens may appear in train/val/test_iid queries, "unseen"
tokens only in test_ov queries. Token embeddings are frozen draws inside
a radius-sigma_syn ball around the owning signature, so a model that
never saw an unseen token at train time can still ground it through
embedding proximity. Videos plant the target span as the mean of the
queried signatures; frames outside the span show distractor concepts.
The construction is solvable by a known nearest-signature oracle, which
is what makes desk-scale learnability checks meaningful.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError
from .metrics import Span
from .text import Vocabulary, load_embeddings, save_embeddings

SPLITS = ("train", "val", "test_iid", "test_ov")
SCHEMA_VERSION = 1

# Charades-OV novel-token histogram: 982 / 1338 / 1044 test queries carry
# one / two / three-plus unseen classes. test_ov mirrors the proportions.
OV_BUCKET_COUNTS = (982, 1338, 1044)


class ParseError(Exception):
    """Malformed dataset file; message carries file and line number."""


class VersionError(Exception):
    """Dataset schema version not understood by this code."""


@dataclass(eq=False)
class ConceptWorld:
    signatures: np.ndarray        # (K, d_v) unit rows, f32-representable
    seen: list[list[str]]         # per-concept seen token pool
    unseen: list[list[str]]       # per-concept unseen (OV-only) pool
    vocab: Vocabulary
    table: np.ndarray             # (3 + n_tokens, d_v) embedding rows
    sigma_syn: float
    seed: int
    _owner: dict = field(init=False, repr=False)

    def __post_init__(self):
        owner: dict[str, int] = {}
        for k, pool in enumerate(self.seen):
            for tok in pool:
                if tok in owner:
                    raise ContractError(f"token {tok!r} owned by two concepts")
                owner[tok] = k
        for k, pool in enumerate(self.unseen):
            for tok in pool:
                if tok in owner:
                    raise ContractError(f"token {tok!r} owned by two concepts")
                owner[tok] = k
        self._owner = owner

    @property
    def k(self) -> int:
        return self.signatures.shape[0]

    @property
    def d_v(self) -> int:
        return self.signatures.shape[1]

    def concept_of(self, token: str) -> int:
        if token not in self._owner:
            raise ContractError(f"token {token!r} not in this world")
        return self._owner[token]


@dataclass(eq=False)
class Sample:
    id: str
    video: np.ndarray             # (T, d_v), f32-representable values
    tokens: list[str]
    span: Span
    split: str

    def __post_init__(self):
        self.video = np.asarray(self.video, dtype=np.float64)
        if self.video.ndim != 2:
            raise ContractError(f"video must be T x d_v, got {self.video.shape}")
        if self.span.e >= self.video.shape[0]:
            raise ContractError(
                f"span {self.span} exceeds {self.video.shape[0]} frames")
        if not self.tokens:
            raise ContractError("query must have at least one token")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")


def _f32(a: np.ndarray) -> np.ndarray:
    # round to f32 at creation so in-memory arrays match the serialized form
    return a.astype(np.float32).astype(np.float64)


def build_world(k: int, d_v: int, synonyms_per_concept: int,
                sigma_syn: float, seed: int) -> ConceptWorld:
    """Sample K unit signatures and a frozen token-embedding table.

    Every concept gets `synonyms_per_concept` seen and as many unseen
    tokens; each token's embedding is the concept signature plus a noise
    vector rescaled to stay strictly inside the sigma_syn ball (so the
    proximity bound survives f32 rounding).
    """
    if k < 2:
        raise ContractError(f"k_concepts must be >= 2, got {k}")
    if synonyms_per_concept < 1:
        raise ContractError(
            f"synonyms_per_concept must be >= 1, got {synonyms_per_concept}")
    if sigma_syn < 0:
        raise ContractError(f"sigma_syn must be >= 0, got {sigma_syn}")
    if d_v < 1:
        raise ContractError(f"d_v must be >= 1, got {d_v}")

    rng = np.random.default_rng(seed)
    sigs = rng.normal(size=(k, d_v))
    sigs = _f32(sigs / np.linalg.norm(sigs, axis=1, keepdims=True))

    seen = [[f"c{c:02d}s{j}" for j in range(synonyms_per_concept)]
            for c in range(k)]
    unseen = [[f"c{c:02d}u{j}" for j in range(synonyms_per_concept)]
              for c in range(k)]

    vocab = Vocabulary()
    n_tokens = 2 * synonyms_per_concept * k
    table = np.zeros((3 + n_tokens, d_v))
    # mask row: small but nonzero so a masked query is not the padding vector
    table[1] = rng.normal(0.0, 0.1, size=d_v)

    def place(pools):
        for c, pool in enumerate(pools):
            for tok in pool:
                idx = vocab.add(tok)
                raw = rng.normal(size=d_v)
                u = rng.uniform()
                norm = np.linalg.norm(raw)
                if sigma_syn > 0 and norm > 0:
                    # uniform radius in [0, 0.999 sigma_syn]: the backoff
                    # keeps f32 rounding from breaching the advertised bound
                    table[idx] = sigs[c] + raw * (0.999 * sigma_syn * u / norm)
                else:
                    table[idx] = sigs[c]

    place(seen)
    place(unseen)
    return ConceptWorld(signatures=sigs, seen=seen, unseen=unseen,
                        vocab=vocab, table=_f32(table),
                        sigma_syn=sigma_syn, seed=seed)


def _allocate(count: int, weights) -> list[int]:
    """Largest-remainder split of `count` into len(weights) integer parts."""
    total = float(sum(weights))
    exact = [count * w / total for w in weights]
    parts = [int(x) for x in exact]
    rema = sorted(range(len(weights)),
                  key=lambda i: (exact[i] - parts[i], -i), reverse=True)
    for i in rema[: count - sum(parts)]:
        parts[i] += 1
    return parts


def generate_split(world: ConceptWorld, count: int, frames: int,
                   sigma_v: float, split: str, seed: int) -> list[Sample]:
    """Plant `count` samples: span frames show the mean of the queried
    concept signatures, the rest show per-frame distractor signatures."""
    if count <= 0:
        raise ContractError(f"count must be positive, got {count}")
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")
    if sigma_v < 0:
        raise ContractError(f"sigma_v must be >= 0, got {sigma_v}")
    if frames < 2:
        raise ContractError(f"frames must be >= 2, got {frames}")
    if split == "test_ov" and world.k < 3:
        raise ContractError("test_ov needs >= 3 concepts for the 3-novel bucket")

    rng = np.random.default_rng(seed)
    min_len = -(-frames // 8)     # ceil(T/8)
    max_len = frames // 2

    buckets = [0] * count
    if split == "test_ov":
        buckets = []
        for b, n in zip((1, 2, 3), _allocate(count, OV_BUCKET_COUNTS)):
            buckets += [b] * n
        rng.shuffle(buckets)

    samples = []
    for i in range(count):
        b = buckets[i]
        n_c = int(rng.integers(max(2, b), min(4, world.k) + 1))
        concepts = rng.choice(world.k, size=n_c, replace=False)
        length = int(rng.integers(min_len, max_len + 1))
        s = int(rng.integers(0, frames - length + 1))
        e = s + length - 1

        pool = np.setdiff1d(np.arange(world.k), concepts)
        if pool.size == 0:        # degenerate tiny worlds: reuse everything
            pool = np.arange(world.k)
        distractors = rng.choice(pool, size=frames - length, replace=True)

        video = np.empty((frames, world.d_v))
        video[s:e + 1] = world.signatures[concepts].mean(axis=0)
        outside = np.concatenate([np.arange(0, s), np.arange(e + 1, frames)])
        video[outside] = world.signatures[distractors]
        video = _f32(video + sigma_v * rng.normal(size=video.shape))

        tokens = []
        novel_slots = set(rng.choice(n_c, size=b, replace=False).tolist())
        for slot, c in enumerate(concepts):
            src = world.unseen[c] if slot in novel_slots else world.seen[c]
            tokens.append(src[int(rng.integers(len(src)))])

        samples.append(Sample(id=f"{split}-{i:05d}", video=video,
                              tokens=tokens, span=Span(s, e), split=split))
    return samples


def oracle_decode(sample: Sample, world: ConceptWorld) -> Span:
    """Nearest-signature decoder: label each frame by cosine argmax over
    {query concept mean} + all signatures, return the longest run of
    query-labeled frames. Recovers planted spans exactly at sigma_v = 0,
    which is the pre-build solvability check for the whole construction."""
    ks = sorted({world.concept_of(t) for t in sample.tokens})
    cands = np.vstack([world.signatures[ks].mean(axis=0), world.signatures])
    cands = cands / np.linalg.norm(cands, axis=1, keepdims=True)
    v = sample.video
    sims = (v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)) @ cands.T
    hit = sims.argmax(axis=1) == 0

    best, run = None, None
    for t in range(len(hit)):
        if hit[t]:
            run = (run[0], t) if run else (t, t)
            if best is None or run[1] - run[0] > best[1] - best[0]:
                best = run
        else:
            run = None
    if best is None:              # noisy fallback: best single frame
        t = int(sims[:, 0].argmax())
        best = (t, t)
    return Span(best[0], best[1])


@dataclass
class DataConfig:
    k_concepts: int = 20
    d_v: int = 48
    frames: int = 12
    synonyms_per_concept: int = 3
    sigma_syn: float = 0.1
    sigma_v: float = 0.05
    n_train: int = 2000
    n_val: int = 200
    n_test_iid: int = 400
    n_test_ov: int = 400
    seed: int = 0

    def validate(self) -> None:
        if self.sigma_v < 0:
            raise ContractError(f"sigma_v must be >= 0, got {self.sigma_v}")
        if self.sigma_syn < 0:
            raise ContractError(f"sigma_syn must be >= 0, got {self.sigma_syn}")
        for name in ("n_train", "n_val", "n_test_iid", "n_test_ov"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.frames < 2:
            raise ContractError(f"frames must be >= 2, got {self.frames}")
        if self.k_concepts < 3:
            raise ContractError(f"k_concepts must be >= 3, got {self.k_concepts}")


def generate_dataset(cfg: DataConfig) -> tuple[list[Sample], ConceptWorld]:
    """All four splits with fixed per-split seed offsets from cfg.seed."""
    cfg.validate()
    world = build_world(cfg.k_concepts, cfg.d_v, cfg.synonyms_per_concept,
                        cfg.sigma_syn, cfg.seed)
    counts = (cfg.n_train, cfg.n_val, cfg.n_test_iid, cfg.n_test_ov)
    samples = []
    for off, (split, n) in enumerate(zip(SPLITS, counts), start=1):
        samples += generate_split(world, n, cfg.frames, cfg.sigma_v,
                                  split, cfg.seed + off)
    return samples, world


def split_samples(samples: list[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for s in samples:
        out[s.split].append(s)
    return out


def write_dataset(samples: list[Sample], world: ConceptWorld, out_dir: str) -> None:
    """JSONL per split (header line first) plus vocab/embedding/world sidecars."""
    os.makedirs(out_dir, exist_ok=True)
    by_split = split_samples(samples)
    for split, rows in by_split.items():
        if not rows:
            continue
        frames = {r.video.shape[0] for r in rows}
        if len(frames) != 1:
            raise ContractError(f"{split} mixes frame counts {sorted(frames)}")
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w",
                  encoding="utf-8", newline="\n") as f:
            head = {"schema": SCHEMA_VERSION, "d_v": world.d_v,
                    "T": frames.pop()}
            f.write(json.dumps(head, separators=(",", ":")) + "\n")
            for r in rows:
                rec = {"id": r.id, "video": r.video.tolist(),
                       "tokens": r.tokens, "span": [r.span.s, r.span.e],
                       "split": r.split}
                f.write(json.dumps(rec, separators=(",", ":")) + "\n")

    world.vocab.save(os.path.join(out_dir, "vocab.json"))
    save_embeddings(os.path.join(out_dir, "embeddings.bin"), world.table)
    meta = {"schema": SCHEMA_VERSION, "sigma_syn": world.sigma_syn,
            "seed": world.seed, "seen": world.seen, "unseen": world.unseen,
            "signatures": world.signatures.tolist()}
    with open(os.path.join(out_dir, "world.json"), "w",
              encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, separators=(",", ":"))
        f.write("\n")


def _read_split_file(path: str, split: str) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        return samples
    name = os.path.basename(path)
    try:
        head = json.loads(lines[0])
        schema = head["schema"]
    except Exception as exc:
        raise ParseError(f"{name}: line 1: bad header ({exc})") from exc
    if schema != SCHEMA_VERSION:
        raise VersionError(f"{name}: schema {schema}, expected {SCHEMA_VERSION}")
    for no, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            video = np.asarray(rec["video"], dtype=np.float64)
            if video.shape != (head["T"], head["d_v"]):
                raise ValueError(f"video shape {video.shape} does not match header")
            samples.append(Sample(id=rec["id"], video=video,
                                  tokens=list(rec["tokens"]),
                                  span=Span(int(rec["span"][0]), int(rec["span"][1])),
                                  split=rec["split"]))
        except (ValueError, KeyError, TypeError, IndexError, ContractError) as exc:
            raise ParseError(f"{name}: line {no}: {exc}") from exc
    return samples


def read_dataset(in_dir: str) -> tuple[list[Sample], ConceptWorld]:
    with open(os.path.join(in_dir, "world.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("schema") != SCHEMA_VERSION:
        raise VersionError(f"world.json: schema {meta.get('schema')}, "
                           f"expected {SCHEMA_VERSION}")
    world = ConceptWorld(
        signatures=np.asarray(meta["signatures"], dtype=np.float64),
        seen=[list(p) for p in meta["seen"]],
        unseen=[list(p) for p in meta["unseen"]],
        vocab=Vocabulary.load(os.path.join(in_dir, "vocab.json")),
        table=load_embeddings(os.path.join(in_dir, "embeddings.bin")),
        sigma_syn=float(meta["sigma_syn"]), seed=int(meta["seed"]))

    samples: list[Sample] = []
    for split in SPLITS:
        path = os.path.join(in_dir, f"{split}.jsonl")
        if os.path.exists(path):
            samples += _read_split_file(path, split)
    return samples, world
