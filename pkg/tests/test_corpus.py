import json

import numpy as np
import pytest

from hsg.corpus import (CorpusFormatError, Vocabulary, generate_corpus,
                        load_records, record_to_json, save_records,
                        MAX_CAPTION_LEN)
from hsg.metrics import cider, rouge_l


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(13, 30, 6, 6)


def test_generation_is_deterministic(tmp_path, small_corpus):
    train, val, test, vocab, df = small_corpus
    train2, val2, test2, vocab2, df2 = generate_corpus(13, 30, 6, 6)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_records(p1, train)
    save_records(p2, train2)
    assert p1.read_bytes() == p2.read_bytes()
    assert vocab.tokens == vocab2.tokens
    assert df.to_json() == df2.to_json()


def test_split_ids_are_disjoint():
    train, val, test, _, _ = generate_corpus(5, 100, 20, 20)
    ids = [r.scene_id for split in (train, val, test) for r in split]
    assert len(ids) == 140
    assert len(set(ids)) == 140


def test_captions_score_against_own_references(small_corpus):
    train, _, _, _, df = small_corpus
    for rec in train[:10]:
        for cap in rec.captions:
            assert cider(cap, rec.captions, df) > 0.0


def test_references_differ_and_are_consistent(small_corpus):
    train, _, _, _, _ = small_corpus
    for rec in train:
        caps = [tuple(c) for c in rec.captions]
        assert len(set(caps)) == len(caps)
        for i in range(len(caps)):
            for j in range(i + 1, len(caps)):
                assert rouge_l(rec.captions[i], [rec.captions[j]]) > 0.0


def test_caption_length_bound_and_vbar(small_corpus):
    train, val, test, _, _ = small_corpus
    for rec in train + val + test:
        for cap in rec.captions:
            assert len(cap) <= MAX_CAPTION_LEN
        assert np.allclose(rec.vbar, rec.features.mean(axis=0), atol=1e-12)


def test_vocabulary_reserved_layout(small_corpus):
    _, _, _, vocab, _ = small_corpus
    assert vocab.tokens[:4] == ["pad", "bos", "eos", "unk"]
    assert vocab.PAD == 0 and vocab.BOS == 1 and vocab.EOS == 2 and vocab.UNK == 3


def test_encode_decode_round_trip(small_corpus):
    _, _, _, vocab, _ = small_corpus
    assert vocab.encode([]) == [vocab.BOS, vocab.EOS]
    words = ["a", "red", "cat"] if "red" in vocab.index else None
    for rec_words in ([], ["a"], words or ["a"]):
        ids = vocab.encode(rec_words)
        assert len(ids) == len(rec_words) + 2
        assert vocab.decode(ids) == rec_words
    unk = vocab.encode(["zzz"])
    assert unk[1] == vocab.UNK


def test_min_count_filters_rare_words():
    caps = [["hello", "world"], ["hello", "there"]]
    vocab = Vocabulary.from_captions(caps, min_count=2)
    assert "hello" in vocab.index
    assert "world" not in vocab.index
    assert "there" not in vocab.index


def test_save_load_round_trip(tmp_path, small_corpus):
    train, _, _, _, _ = small_corpus
    path = tmp_path / "train.jsonl"
    save_records(path, train)
    loaded = load_records(path)
    assert len(loaded) == len(train)
    for a, b in zip(train, loaded):
        assert a.scene_id == b.scene_id
        assert a.captions == b.captions
        assert np.array_equal(a.features, b.features)  # bit-exact decimals


def test_load_error_names_the_line(tmp_path, small_corpus):
    train, _, _, _, _ = small_corpus
    path = tmp_path / "broken.jsonl"
    lines = [record_to_json(r) for r in train[:3]]
    lines[1] = lines[1][: len(lines[1]) // 2]  # truncate mid-record
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_records(path)


def test_load_rejects_mismatched_k(tmp_path):
    rec = {"scene_id": 0, "K": 3,
           "features": [[0.0, 1.0]], "captions": [["a", "cat"]]}
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(CorpusFormatError, match="line 1"):
        load_records(path)


def test_vocab_json_round_trip_and_hash(small_corpus):
    _, _, _, vocab, _ = small_corpus
    again = Vocabulary.from_json(vocab.to_json())
    assert again.tokens == vocab.tokens
    assert again.content_hash() == vocab.content_hash()


def test_vocabulary_stable_across_runs():
    _, _, _, v1, _ = generate_corpus(21, 40, 4, 4)
    _, _, _, v2, _ = generate_corpus(21, 40, 4, 4)
    assert v1.tokens == v2.tokens


def test_configurable_captions_per_scene():
    train, _, _, _, _ = generate_corpus(3, 5, 1, 1, captions_per_scene=2)
    assert all(len(r.captions) == 2 for r in train)
