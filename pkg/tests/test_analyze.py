import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovground.analyze import (
    NoveltyReport,
    assert_ov_split,
    build_vocab,
    fully_seen_ids,
    normalize,
    novelty_report,
    read_corpus,
)
from ovground.autograd import ContractError
from ovground.data import DataConfig, generate_dataset, split_samples

TRAIN = [["person", "hold", "a", "box"]]
TEST = [["human", "hold", "a", "box"], ["kid", "grabs", "toy"]]


def test_normalize_lowercases_and_strips_punctuation():
    assert normalize(["Person,", "HOLDS", "a!", "box."]) == \
        ["person", "holds", "a", "box"]


def test_normalize_splits_embedded_whitespace_and_drops_empties():
    assert normalize(["two words", "...", ""]) == ["two", "words"]


def test_build_vocab_collects_all_tokens():
    v = build_vocab(TRAIN)
    assert sorted(v.tokens) == ["a", "box", "hold", "person"]


def test_build_vocab_collapses_duplicates():
    v = build_vocab([["run", "run"], ["run"]])
    assert v.tokens == ["run"]


def test_build_vocab_skips_empty_sentences():
    v = build_vocab([[], ["walk"]])
    assert v.tokens == ["walk"]


def test_build_vocab_rejects_empty_corpus():
    with pytest.raises(ContractError):
        build_vocab([])


def test_hand_corpus_histogram():
    rep = novelty_report(TEST, build_vocab(TRAIN))
    assert rep.histogram == {1: 1, 3: 1}
    assert rep.fraction_all_seen == 0.0
    assert rep.top_unseen == [("grabs", 1), ("human", 1), ("kid", 1), ("toy", 1)]


def test_fully_seen_corpus():
    rep = novelty_report(TRAIN * 3, build_vocab(TRAIN))
    assert rep.histogram == {0: 3}
    assert rep.fraction_all_seen == 1.0
    assert rep.top_unseen == []


def test_top_k_truncates():
    rep = novelty_report(TEST, build_vocab(TRAIN), k=3)
    assert rep.top_unseen == [("grabs", 1), ("human", 1), ("kid", 1)]
    assert len(rep.top_overall) == 3


def test_top_overall_flags_seen_terms():
    rep = novelty_report(TEST, build_vocab(TRAIN), k=10)
    flags = {t: seen for t, _, seen in rep.top_overall}
    assert flags["hold"] and flags["box"]
    assert not flags["human"] and not flags["kid"]


def test_frequency_ranking_breaks_ties_lexicographically():
    test = [["zebra", "apple"], ["zebra", "mango"], ["apple"]]
    rep = novelty_report(test, build_vocab([["nothing"]]))
    assert rep.top_unseen == [("apple", 2), ("zebra", 2), ("mango", 1)]


def test_novelty_report_rejects_empty_corpus():
    with pytest.raises(ContractError):
        novelty_report([], build_vocab(TRAIN))


def test_report_invariant_to_sentence_order():
    vocab = build_vocab(TRAIN)
    fwd = novelty_report(TEST, vocab)
    rev = novelty_report(list(reversed(TEST)), vocab)
    assert fwd == rev


def test_unseeing_one_word_shifts_affected_sentences_one_bucket():
    vocab = build_vocab(TRAIN)
    smaller = build_vocab([[t for t in TRAIN[0] if t != "box"]])
    before = novelty_report(TEST, vocab).histogram
    after = novelty_report(TEST, smaller).histogram
    # "box" occurs once, in the sentence with 1 unseen word: 1 -> 2
    assert before == {1: 1, 3: 1} and after == {2: 1, 3: 1}


def test_report_contract_checks_fraction():
    with pytest.raises(ContractError):
        NoveltyReport(histogram={0: 1, 1: 1}, fraction_all_seen=1.0,
                      top_unseen=[], top_overall=[])


def test_assert_ov_split_cases():
    vocab = build_vocab(TRAIN)
    assert assert_ov_split(TEST, vocab)
    assert not assert_ov_split(TRAIN, vocab)


def test_mixed_corpus_reports_offender():
    vocab = build_vocab(TRAIN)
    mixed = [["human", "walks"], ["person", "hold", "a", "box"], ["kid", "runs"]]
    assert not assert_ov_split(mixed, vocab)
    assert fully_seen_ids(mixed, vocab) == [1]


def test_generated_test_ov_split_is_open_vocabulary():
    samples, world = generate_dataset(DataConfig(seed=11))
    splits = split_samples(samples)
    vocab = build_vocab([s.tokens for s in splits["train"]])
    assert assert_ov_split([s.tokens for s in splits["test_ov"]], vocab)
    # and the IID test split is its mirror image: nothing unseen anywhere
    iid = novelty_report([s.tokens for s in splits["test_iid"]], vocab)
    assert iid.fraction_all_seen == 1.0


@settings(max_examples=30)
@given(st.lists(st.lists(st.sampled_from(["cat", "dog", "new1", "new2"]),
                         min_size=1, max_size=5), min_size=1, max_size=12))
def test_histogram_sums_to_sentence_count(corpus):
    vocab = build_vocab([["cat", "dog"]])
    rep = novelty_report(corpus, vocab)
    assert sum(rep.histogram.values()) == len(corpus)
    for term, _ in rep.top_unseen:
        assert term not in vocab


def test_to_dict_and_csv_shapes():
    rep = novelty_report(TEST, build_vocab(TRAIN))
    d = rep.to_dict()
    assert d["histogram"] == {"1": 1, "3": 1}
    assert d["top_overall"][0][2] in (True, False)
    lines = rep.histogram_csv().strip().split("\n")
    assert lines[0] == "unseen_words,sentences"
    assert lines[1:] == ["1,1", "3,1"]


def test_read_corpus_plain_text(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_text("A person holds a box.\n\nkid grabs toy\n", encoding="utf-8")
    assert read_corpus(str(p)) == [["A", "person", "holds", "a", "box."],
                                   ["kid", "grabs", "toy"]]


def test_read_corpus_jsonl(tmp_path):
    p = tmp_path / "corpus.jsonl"
    rows = [{"tokens": ["person", "hold"]}, {"tokens": ["kid"]}]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    assert read_corpus(str(p)) == [["person", "hold"], ["kid"]]


def test_read_corpus_skips_dataset_header(tmp_path):
    p = tmp_path / "split.jsonl"
    p.write_text('{"schema":1,"d_v":64,"T":12}\n'
                 '{"id":"x","tokens":["walk"],"span":[0,1]}\n', encoding="utf-8")
    assert read_corpus(str(p)) == [["walk"]]


@pytest.mark.parametrize("line", [
    '{"bad json',
    '["not", "an", "object"]',
    '{"no_tokens_key": 1}',
    '{"tokens": "not-a-list"}',
])
def test_read_corpus_rejects_malformed_lines(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text(line + "\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_corpus(str(p))
