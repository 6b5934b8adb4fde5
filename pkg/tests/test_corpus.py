import json

import pytest

from paramark.corpus import (
    CorpusError,
    Document,
    SplitSpec,
    compute_stats,
    count_words,
    filter_by_length,
    load_corpus,
    split_corpus,
    write_corpus,
)
from paramark.textcodec import ParaType, train_codec


def make_doc(i, paragraphs, prompt="", lang="english"):
    return Document(id=f"d{i}", prompt=prompt, paragraphs=paragraphs, lang=lang)


def test_load_jsonl_basic(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"d1","prompt":"p","paragraphs":["a","b"]}\n', encoding="utf-8")
    docs = load_corpus(p, "jsonl")
    assert len(docs) == 1
    assert docs[0].id == "d1"
    assert docs[0].prompt == "p"
    assert docs[0].paragraphs == ("a", "b")
    assert docs[0].lang == "english"


def test_load_twofile_blank_line_split(tmp_path):
    (tmp_path / "c.prompts").write_text("p1\np2\n", encoding="utf-8")
    (tmp_path / "c.stories").write_text("x\n\ny\n<|doc|>\nz only\n", encoding="utf-8")
    docs = load_corpus(tmp_path / "c", "prompt_story_twofile")
    assert [d.paragraphs for d in docs] == [("x", "y"), ("z only",)]
    assert docs[0].prompt == "p1"


def test_load_empty_paragraphs_names_record(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"ok","paragraphs":["a"]}\n{"id":"bad","paragraphs":[]}\n', encoding="utf-8")
    with pytest.raises(CorpusError, match="record 1.*empty document bad"):
        load_corpus(p)


def test_load_missing_paragraphs_field(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"d0","prompt":"x"}\n', encoding="utf-8")
    with pytest.raises(CorpusError, match="record 0"):
        load_corpus(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(CorpusError, match="missing corpus"):
        load_corpus(tmp_path / "nope.jsonl")


def test_duplicate_ids_rejected(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"d","paragraphs":["a"]}\n{"id":"d","paragraphs":["b"]}\n', encoding="utf-8")
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(p)


def test_roundtrip_identity(tmp_path):
    docs = [
        make_doc(0, ["alpha beta", "gamma"], prompt="the prompt"),
        make_doc(1, ["one\ninner line", "two", "three"], lang="chinese", prompt=""),
    ]
    path = tmp_path / "out.jsonl"
    write_corpus(docs, path)
    assert load_corpus(path) == docs


def test_trailing_whitespace_stripped(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"id": "d", "prompt": "p ", "paragraphs": ["a \n", "b\t"]}) + "\n")
    (doc,) = load_corpus(p)
    assert doc.prompt == "p"
    assert doc.paragraphs == ("a", "b")


def test_count_words():
    assert count_words("two words") == 2
    assert count_words("  spaced   out  ") == 2
    assert count_words("你好 世界", "chinese") == 4
    assert count_words("abc", "chinese") == 3


def test_compute_stats_hand_counts():
    docs = [make_doc(0, ["a b"]), make_doc(1, ["c d e", "f"])]
    stats = compute_stats(docs)
    assert stats.num_samples == 2
    assert stats.avg_words_per_sample == pytest.approx(3.0)

    one = compute_stats([make_doc(2, ["x", "y", "z"])])
    assert one.avg_paragraphs_per_sample == pytest.approx(3.0)


def test_compute_stats_empty():
    with pytest.raises(CorpusError):
        compute_stats([])


@pytest.fixture(scope="module")
def char_codec():
    docs = [make_doc(i, ["ab" * 400]) for i in range(2)]
    return train_codec(docs, "char")


def test_filter_by_length_boundary(char_codec):
    # ids under ParaType.NONE with EOS: len(paragraph) + 1
    doc_1024 = make_doc(0, ["x" * 1023])  # 1023 chars + EOS = 1024
    doc_1025 = make_doc(1, ["x" * 1024])
    doc_tiny = make_doc(2, ["x"])
    kept = filter_by_length([doc_1024, doc_1025, doc_tiny], char_codec, ParaType.NONE, 1024)
    assert kept == [doc_1024, doc_tiny]


def test_filter_counts_markers_and_prompt(char_codec):
    # 4 paragraphs of 2 chars: none -> 8+1, eop-diy -> 8+4+1
    codec = char_codec.with_specials(["EOP"])
    doc = make_doc(0, ["ab", "ab", "ab", "ab"])
    assert filter_by_length([doc], codec, ParaType.NONE, 9) == [doc]
    assert filter_by_length([doc], codec, ParaType.EOP_DIY, 12) == []
    assert filter_by_length([doc], codec, ParaType.EOP_DIY, 13) == [doc]
    # prompt adds its own tokens + NL joiner
    doc_p = make_doc(1, ["ab", "ab", "ab", "ab"], prompt="ab")
    assert filter_by_length([doc_p], codec, ParaType.NONE, 11) == []
    assert filter_by_length([doc_p], codec, ParaType.NONE, 12) == [doc_p]


def test_filter_preserves_subsequence(char_codec):
    docs = [make_doc(i, ["a" * (10 * (i + 1))]) for i in range(10)]
    kept = filter_by_length(docs, char_codec, ParaType.NONE, 55)
    assert kept == docs[:5]


def test_split_sizes_and_partition():
    docs = [make_doc(i, ["a b"]) for i in range(10)]
    train, valid, test = split_corpus(docs, SplitSpec(0.8, 0.1, 0.1, seed=7))
    assert (len(train), len(valid), len(test)) == (8, 1, 1)
    ids = [d.id for d in train + valid + test]
    assert sorted(ids) == sorted(d.id for d in docs)

    t2, v2, s2 = split_corpus(docs, SplitSpec(0.8, 0.1, 0.1, seed=7))
    assert (t2, v2, s2) == (train, valid, test)


def test_split_seed_changes_membership():
    docs = [make_doc(i, ["a b"]) for i in range(30)]
    a = split_corpus(docs, SplitSpec(0.5, 0.25, 0.25, seed=1))
    b = split_corpus(docs, SplitSpec(0.5, 0.25, 0.25, seed=2))
    # floor(frac*N) for valid/test, remainder to train
    assert [len(x) for x in a] == [len(x) for x in b] == [16, 7, 7]
    assert a != b


def test_split_all_train():
    docs = [make_doc(i, ["a"]) for i in range(5)]
    train, valid, test = split_corpus(docs, SplitSpec(1.0, 0.0, 0.0, seed=0))
    assert len(train) == 5 and not valid and not test


def test_split_spec_validation():
    with pytest.raises(CorpusError):
        SplitSpec(0.5, 0.5, 0.5)
    with pytest.raises(CorpusError):
        SplitSpec(-0.1, 0.6, 0.5)


def test_document_invariants():
    with pytest.raises(CorpusError, match="empty document"):
        Document(id="d", prompt="", paragraphs=[])
    with pytest.raises(CorpusError, match="paragraph 1"):
        Document(id="d", prompt="", paragraphs=["ok", "\n"])
    with pytest.raises(CorpusError, match="lang"):
        Document(id="d", prompt="", paragraphs=["ok"], lang="klingon")
