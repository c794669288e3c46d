import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from domsot.core import build_vocabulary, encode_transcript, Utterance
from domsot.data import (DataError, MixPolicy, SynthSpec, balanced_pairs, build_eval_conditions,
                         draw_weights, generate_corpus, mix, mix_corpus, mix_waveforms,
                         read_corpus, read_features, read_manifest, render_features,
                         seconds_to_frames, write_corpus, write_features, write_manifest)


def test_seconds_to_frames():
    assert seconds_to_frames(0.25) == 25
    assert seconds_to_frames(4) == 400
    assert seconds_to_frames(3) == 300


def test_zero_noise_equals_prototypes():
    spec = SynthSpec(prototype_noise_std=0.0, gender_offsets=(0.0, 0.0))
    feats = render_features(spec, [1, 3], [2, 3], 1.0, 0, None)
    protos = spec.prototypes()
    assert np.array_equal(feats, np.vstack([protos[[1, 1]], protos[[3, 3, 3]]]))


def test_gain_is_linear_without_noise():
    spec = SynthSpec(prototype_noise_std=0.0, gender_offsets=(0.0, 0.0))
    one = render_features(spec, [0, 2], [3, 4], 1.0, 1, None)
    two = render_features(spec, [0, 2], [3, 4], 2.0, 1, None)
    assert np.array_equal(two, 2 * one)


def test_gender_offset_on_its_channel_only():
    spec = SynthSpec(prototype_noise_std=0.0)
    f0 = render_features(spec, [0], [5], 1.0, 0, None)
    f1 = render_features(spec, [0], [5], 1.0, 1, None)
    diff = f1 - f0
    assert np.allclose(diff[:, spec.gender_channel], 1.0)
    assert np.all(np.delete(diff, spec.gender_channel, axis=1) == 0)


def test_corpus_determinism():
    spec = SynthSpec(seed=5)
    a, b = generate_corpus(spec, 10), generate_corpus(spec, 10)
    for u, v in zip(a, b):
        assert u.id == v.id and u.transcript == v.transcript
        assert np.array_equal(u.features, v.features)
    c = generate_corpus(SynthSpec(seed=6), 10)
    assert not all(np.array_equal(u.features, w.features) for u, w in zip(a, c))


@pytest.mark.parametrize("bad", [dict(frames_per_token=(5, 2)), dict(utterance_length_range=(0, 3)),
                                 dict(loudness_range=(1.0, 0.5)), dict(vocab_size=1)])
def test_degenerate_spec_rejected(bad):
    with pytest.raises(DataError):
        SynthSpec(**bad)


def _utt(vocab, uid, text, feats, gain=1.0, gender=0):
    return Utterance(uid, encode_transcript(text, vocab), np.asarray(feats, dtype=float), gain, gender,
                     len(feats))


def test_single_speaker_mixture_is_identity(small_corpus, rng):
    _, corpus = small_corpus
    m = mix([corpus[0]], MixPolicy(num_speakers=1), rng)
    assert m.components[0].weight == 1.0 and m.components[0].start_frame == 0
    assert np.array_equal(m.features, corpus[0].features)


def test_zero_speakers_rejected(rng):
    with pytest.raises(DataError):
        MixPolicy(num_speakers=0)
    with pytest.raises(DataError):
        mix([], MixPolicy(num_speakers=1), rng)


def test_always_offset_gaps_within_range(small_corpus, rng):
    _, corpus = small_corpus
    lo, hi = seconds_to_frames(0.25), seconds_to_frames(4)
    policy = MixPolicy(num_speakers=3, offset_mode="always_offset", offset_range_frames=(lo, hi))
    for m in mix_corpus(corpus, policy, 300, rng):
        starts = [c.start_frame for c in m.components]
        assert starts[0] == 0
        assert all(lo <= b - a <= hi for a, b in zip(starts, starts[1:]))


def test_partial_offset_fraction(small_corpus):
    _, corpus = small_corpus
    rng = np.random.default_rng(0)
    policy = MixPolicy(num_speakers=2, offset_mode="partial_offset", offset_probability=0.4)
    utts = corpus[:2]
    shifted = sum(mix(utts, policy, rng).components[1].start_frame > 0 for _ in range(10000))
    assert abs(shifted / 10000 - 0.40) <= 0.02


def test_eval_conditions_layout(small_corpus, rng):
    _, corpus = small_corpus
    pairs = [corpus[2 * i:2 * i + 2] for i in range(5)]
    conds = build_eval_conditions(pairs, [0, 1, 2, 3], rng)
    assert sorted(conds) == [(2, 0), (2, 1), (2, 2), (2, 3)]
    assert all(c.start_frame == 0 for m in conds[(2, 0)] for c in m.components)
    # same weights in every condition
    w0 = [[c.weight for c in m.components] for m in conds[(2, 0)]]
    w3 = [[c.weight for c in m.components] for m in conds[(2, 3)]]
    assert w0 == w3
    triples = build_eval_conditions([corpus[:3]], [3], rng)
    assert [c.start_frame for c in triples[(3, 3)][0].components] == [0, 300, 600]


def naive_mix(feats, starts, weights):
    total = max(s + len(f) for f, s in zip(feats, starts))
    out = np.zeros((total, feats[0].shape[1]))
    for f, s, w in zip(feats, starts, weights):
        for t in range(len(f)):
            for d in range(f.shape[1]):
                out[s + t, d] += w * f[t, d]
    return out


def test_mixture_linearity_against_naive_loop(small_corpus, rng):
    _, corpus = small_corpus
    policy = MixPolicy(num_speakers=3, offset_mode="always_offset", offset_range_frames=(1, 6))
    for m in mix_corpus(corpus, policy, 20, rng):
        by_id = {u.id: u for u in corpus}
        expected = naive_mix([by_id[c.utt_id].features for c in m.components],
                             [c.start_frame for c in m.components], [c.weight for c in m.components])
        assert np.array_equal(m.features, expected)


@settings(max_examples=200)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_weight_normalization(n, seed):
    w = draw_weights(n, 0.1, np.random.default_rng(seed))
    assert abs(w.sum() - 1) < 1e-9
    # a floored draw can be at most n times smaller than the largest possible total
    assert np.all(w >= 0.1 / n - 1e-12)


def test_overlap_bookkeeping(vocab, rng):
    a = _utt(vocab, "a", "a", np.ones((10, 2)))
    b = _utt(vocab, "b", "b c", np.ones((6, 2)))
    m = mix([a, b], MixPolicy(2, "fixed_offset", fixed_offset_frames=7), rng, weights=[0.5, 0.5])
    ca, cb = m.components
    assert (ca.overlapped_frames, cb.overlapped_frames) == (3, 3)
    assert cb.start_frame == 7 and cb.content_length == 2
    assert m.features.shape == (13, 2)


def test_feature_file_round_trip(tmp_path, rng):
    x = rng.standard_normal((7, 3)).astype(np.float32)
    write_features(tmp_path / "f.bin", x)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"SOTF" and len(raw) == 16 + 7 * 3 * 4
    assert np.array_equal(read_features(tmp_path / "f.bin"), x)


def test_feature_file_bad_magic(tmp_path):
    (tmp_path / "f.bin").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DataError):
        read_features(tmp_path / "f.bin")


def test_manifest_round_trip(tmp_path, small_corpus, rng):
    spec, corpus = small_corpus
    samples = mix_corpus(corpus, MixPolicy(2), 6, rng)
    write_manifest(tmp_path / "m.jsonl", samples)
    back = read_manifest(tmp_path / "m.jsonl", spec.vocabulary())
    assert [s.id for s in back] == [s.id for s in samples]
    for s, t in zip(samples, back):
        assert s.components == t.components
        assert np.array_equal(t.features, s.features.astype(np.float32))


def test_corpus_round_trip(tmp_path, small_corpus):
    spec, corpus = small_corpus
    write_corpus(tmp_path / "c.jsonl", corpus[:5])
    back = read_corpus(tmp_path / "c.jsonl", spec.vocabulary())
    assert [u.transcript for u in back] == [u.transcript for u in corpus[:5]]


def test_balanced_pairs_strata(small_corpus, rng):
    _, corpus = small_corpus
    pairs = balanced_pairs(corpus, 64, rng, loudness_ratio=2.0)
    louder_first = 0
    for m in pairs:
        a, b = m.components
        loud, quiet = (a, b) if a.effective_loudness > b.effective_loudness else (b, a)
        assert loud.effective_loudness == pytest.approx(2 * quiet.effective_loudness)
        assert a.gender != b.gender and a.content_length != b.content_length
        louder_first += loud is a
    assert louder_first == 32


def _write_wav(path, samples, rate=16000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def _read_wav(path):
    with wave.open(str(path), "rb") as wf:
        return np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")


def test_waveform_identity(tmp_path, rng):
    x = rng.integers(-3000, 3000, size=500)
    _write_wav(tmp_path / "a.wav", x)
    mix_waveforms([tmp_path / "a.wav"], [1.0], [0], tmp_path / "o.wav")
    assert (tmp_path / "o.wav").read_bytes() == (tmp_path / "a.wav").read_bytes()


def test_waveform_silence(tmp_path):
    _write_wav(tmp_path / "a.wav", np.zeros(100))
    _write_wav(tmp_path / "b.wav", np.zeros(80))
    mix_waveforms([tmp_path / "a.wav", tmp_path / "b.wav"], [0.5, 0.5], [0, 0], tmp_path / "o.wav")
    assert not _read_wav(tmp_path / "o.wav").any()


def test_waveform_concatenation(tmp_path, rng):
    a = rng.integers(-3000, 3000, size=300)
    b = rng.integers(-3000, 3000, size=200)
    _write_wav(tmp_path / "a.wav", a)
    _write_wav(tmp_path / "b.wav", b)
    mix_waveforms([tmp_path / "a.wav", tmp_path / "b.wav"], [1.0, 1.0], [0, len(a)], tmp_path / "o.wav")
    assert np.array_equal(_read_wav(tmp_path / "o.wav"), np.concatenate([a, b]))


def test_waveform_clipping_counted(tmp_path):
    _write_wav(tmp_path / "a.wav", np.full(10, 30000))
    n = mix_waveforms([tmp_path / "a.wav"] * 2, [1.0, 1.0], [0, 0], tmp_path / "o.wav")
    assert n == 10
    assert np.all(_read_wav(tmp_path / "o.wav") == 32767)
