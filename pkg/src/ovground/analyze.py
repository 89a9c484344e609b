"""Vocabulary-novelty analysis of a query corpus against a training vocabulary.

Answers two questions about any tokenized corpus: how many words per sentence
were never seen at training time (a histogram, plus the fraction of sentences
fully covered by the training vocabulary), and which unseen terms dominate (a
frequency ranking). A corpus is open-vocabulary exactly when every sentence
carries at least one unseen word.

Tokens are normalized before any counting: lowercased, ASCII punctuation
stripped, split on whitespace. No part-of-speech filtering happens here, so
function words count the same as content words.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass

from .autograd import ContractError
from .text import Vocabulary

_PUNCT = str.maketrans("", "", string.punctuation)


def normalize(tokens: list[str]) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace; drop empties."""
    out = []
    for t in tokens:
        out.extend(w for w in t.lower().translate(_PUNCT).split() if w)
    return out


@dataclass
class NoveltyReport:
    """Unseen-word statistics for one corpus.

    histogram maps per-sentence unseen-word count to number of sentences (its
    values sum to the corpus size); top_unseen and top_overall rank terms by
    frequency with lexicographic tie-breaks, the latter over all terms with a
    per-term seen flag.
    """

    histogram: dict[int, int]
    fraction_all_seen: float
    top_unseen: list[tuple[str, int]]
    top_overall: list[tuple[str, int, bool]]

    def __post_init__(self):
        total = sum(self.histogram.values())
        if total <= 0:
            raise ContractError("novelty histogram is empty")
        want = self.histogram.get(0, 0) / total
        if abs(self.fraction_all_seen - want) > 1e-12:
            raise ContractError(
                f"fraction_all_seen {self.fraction_all_seen} != "
                f"histogram[0]/total {want}")

    def to_dict(self) -> dict:
        return {
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "fraction_all_seen": self.fraction_all_seen,
            "top_unseen": [[t, n] for t, n in self.top_unseen],
            "top_overall": [[t, n, seen] for t, n, seen in self.top_overall],
        }

    def histogram_csv(self) -> str:
        lines = ["unseen_words,sentences"]
        lines += [f"{k},{v}" for k, v in sorted(self.histogram.items())]
        return "\n".join(lines) + "\n"


def build_vocab(corpus: list[list[str]]) -> Vocabulary:
    """Vocabulary of every normalized lexical unit in the corpus.

    Duplicates collapse; empty sentences are skipped.
    """
    if not corpus:
        raise ContractError("build_vocab needs a nonempty corpus")
    vocab = Vocabulary()
    for sent in corpus:
        for tok in normalize(sent):
            vocab.add(tok)
    return vocab


def _ranked(freq: Counter) -> list[tuple[str, int]]:
    # frequency descending, lexicographic within a frequency
    return sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))


def novelty_report(test: list[list[str]], train_vocab: Vocabulary,
                   k: int = 10) -> NoveltyReport:
    """Per-sentence unseen-token counts plus top-k term rankings."""
    if not test:
        raise ContractError("novelty_report needs a nonempty corpus")
    if k < 0:
        raise ContractError(f"k must be nonnegative, got {k}")
    hist: Counter = Counter()
    unseen_freq: Counter = Counter()
    all_freq: Counter = Counter()
    for sent in test:
        n_unseen = 0
        for tok in normalize(sent):
            all_freq[tok] += 1
            if tok not in train_vocab:
                unseen_freq[tok] += 1
                n_unseen += 1
        hist[n_unseen] += 1
    total = sum(hist.values())
    return NoveltyReport(
        histogram=dict(sorted(hist.items())),
        fraction_all_seen=hist.get(0, 0) / total,
        top_unseen=_ranked(unseen_freq)[:k],
        top_overall=[(t, n, t in train_vocab)
                     for t, n in _ranked(all_freq)[:k]],
    )


def fully_seen_ids(test: list[list[str]], train_vocab: Vocabulary) -> list[int]:
    """Indices of sentences with no unseen token, i.e. the OV violators."""
    return [i for i, sent in enumerate(test)
            if all(t in train_vocab for t in normalize(sent))]


def assert_ov_split(test: list[list[str]], train_vocab: Vocabulary) -> bool:
    """True iff every sentence contains at least one unseen token."""
    return not fully_seen_ids(test, train_vocab)


def read_corpus(path: str) -> list[list[str]]:
    """Load sentences from JSON-Lines {"tokens": [...]} or plain text.

    Plain-text lines split on whitespace. JSON object lines must carry a
    "tokens" list; dataset split headers (objects with a "schema" key) are
    skipped so split files work as corpora directly.
    """
    sents: list[list[str]] = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line[0] in "{[":
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{ln}: bad JSON line") from e
                if not isinstance(row, dict):
                    raise ValueError(f"{path}:{ln}: expected a JSON object")
                if "tokens" not in row:
                    if "schema" in row:
                        continue
                    raise ValueError(f"{path}:{ln}: object has no 'tokens'")
                toks = row["tokens"]
                if not isinstance(toks, list):
                    raise ValueError(f"{path}:{ln}: 'tokens' is not a list")
                sents.append([str(t) for t in toks])
            else:
                sents.append(line.split())
    return sents
