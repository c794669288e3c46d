import string

import numpy as np
import pytest
from hypothesis import given, strategies as st

from domsot.core import (ConfigError, ExperimentConfig, TokenSequence, Utterance, VocabularyError,
                         build_vocabulary, encode_tokens, encode_transcript, substream)


def test_vocabulary_sizes():
    assert len(build_vocabulary(["a", "b"])) == 6
    assert len(build_vocabulary(list("abcdefghij"))) == 14


def test_reserved_ids_follow_content(vocab):
    assert [vocab.id(s) for s in "abcd"] == [0, 1, 2, 3]
    assert (vocab.blank_id, vocab.sc_id, vocab.eos_id, vocab.pad_id) == (4, 5, 6, 7)


def test_duplicate_symbol_rejected():
    with pytest.raises(VocabularyError, match="duplicate.*'a'"):
        build_vocabulary(["a", "a"])


def test_encode_examples(vocab):
    assert encode_transcript("a b a", vocab).ids == (0, 1, 0)
    assert encode_transcript("", vocab).ids == ()


def test_unknown_symbol_names_position(vocab):
    with pytest.raises(VocabularyError, match=r"'z'.*position 2"):
        encode_transcript("a z", vocab)


def test_reserved_symbols_not_allowed_in_transcripts(vocab):
    with pytest.raises(VocabularyError):
        encode_transcript("a <sc> b", vocab)
    assert encode_tokens("a <sc> b", vocab).ids == (0, vocab.sc_id, 1)


def test_vocab_file_round_trip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    assert type(vocab).load(tmp_path / "v.txt") == vocab


@given(st.lists(st.sampled_from(list(string.ascii_lowercase[:6])), max_size=20))
def test_encode_decode_round_trip(tokens):
    v = build_vocabulary(list(string.ascii_lowercase[:6]))
    text = " ".join(tokens)
    seq = encode_transcript(text, v)
    assert seq.text() == text
    assert v.decode(seq.ids) == text


def test_token_sequence_checks_range(vocab):
    with pytest.raises(ValueError):
        TokenSequence((99,), vocab)


def test_utterance_features_read_only(vocab):
    u = Utterance("u", encode_transcript("a", vocab), np.zeros((4, 2)), 1.0, 0, 4)
    with pytest.raises(ValueError):
        u.features[0, 0] = 1.0


configs = st.builds(
    ExperimentConfig,
    alpha=st.floats(0, 1),
    learning_rate=st.floats(1e-6, 1.0),
    epochs=st.integers(5, 100),
    warmup_epochs=st.integers(0, 5),
    batch_size=st.integers(1, 64),
    seed=st.integers(0, 2**31),
    checkpoint_average_last=st.integers(1, 5),
    subsample_factor=st.integers(1, 16),
    strategy=st.sampled_from(["fifo", "pit", "dom"]),
    hidden_size=st.integers(1, 64),
)


@given(configs)
def test_config_round_trip(cfg):
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


def test_config_file_round_trip(tmp_path):
    cfg = ExperimentConfig(alpha=0.25, strategy="pit")
    cfg.save(tmp_path / "c.txt")
    assert ExperimentConfig.load(tmp_path / "c.txt") == cfg


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.loads("alpha = 0.1\nbogus = 3\n")


def test_config_defaults():
    c = ExperimentConfig()
    assert (c.alpha, c.learning_rate, c.epochs, c.warmup_epochs, c.batch_size,
            c.checkpoint_average_last) == (0.1, 1e-3, 40, 4, 8, 5)


@pytest.mark.parametrize("bad", [dict(alpha=1.5), dict(strategy="lifo"), dict(batch_size=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_substreams_are_independent_and_reproducible():
    a = substream(3, "corpus").random(4)
    assert np.array_equal(a, substream(3, "corpus").random(4))
    assert not np.array_equal(a, substream(3, "mixing").random(4))
    other = substream(3, "custom").random(4)
    assert np.array_equal(other, substream(3, "custom").random(4))
    assert not np.array_equal(a, other)
