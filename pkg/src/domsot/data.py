"""Synthetic single-talker corpus and weighted/offset multi-talker mixing."""
from __future__ import annotations

import json
import logging
import string
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import TokenSequence, Utterance, Vocabulary, build_vocabulary, encode_transcript

log = logging.getLogger(__name__)

FRAME_RATE = 100
FEATURE_MAGIC = b"SOTF"
FEATURE_VERSION = 1
OFFSET_MODES = ("always_offset", "partial_offset", "fixed_offset")


class DataError(ValueError):
    pass


def seconds_to_frames(seconds: float, frame_rate: int = FRAME_RATE) -> int:
    frames = seconds * frame_rate
    if abs(frames - round(frames)) > 1e-9:
        raise DataError(f"{seconds}s is not a whole number of frames at {frame_rate} fps")
    return int(round(frames))


def symbol_names(n: int) -> list[str]:
    if n <= 26:
        return list(string.ascii_lowercase[:n])
    return [f"w{i}" for i in range(n)]


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 8
    feature_dim: int = 12
    frames_per_token: tuple[int, int] = (20, 30)
    prototype_noise_std: float = 0.05
    gender_channel: int = 0
    gender_offsets: tuple[float, float] = (-0.5, 0.5)
    loudness_range: tuple[float, float] = (0.7, 1.3)
    utterance_length_range: tuple[int, int] = (2, 4)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise DataError(f"empty frames_per_token range {self.frames_per_token}")
        lo, hi = self.utterance_length_range
        if not 1 <= lo <= hi:
            raise DataError(f"empty utterance_length_range {self.utterance_length_range}")
        lo, hi = self.loudness_range
        if not 0 < lo <= hi:
            raise DataError(f"loudness_range {self.loudness_range} must be positive and ordered")
        if not 0 <= self.gender_channel < self.feature_dim:
            raise DataError("gender_channel must index a feature dimension")
        if self.vocab_size < 2:
            raise DataError("vocab_size must be at least 2")
        if self.prototype_noise_std < 0:
            raise DataError("prototype_noise_std must be non-negative")

    def vocabulary(self) -> Vocabulary:
        return build_vocabulary(symbol_names(self.vocab_size))

    def prototypes(self) -> np.ndarray:
        """Unit-norm token prototypes; the gender channel is left empty."""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0,)))
        protos = rng.standard_normal((self.vocab_size, self.feature_dim))
        protos[:, self.gender_channel] = 0.0
        return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def render_features(spec: SynthSpec, token_ids: Sequence[int], durations: Sequence[int],
                    loudness_gain: float, gender: int, rng: np.random.Generator | None,
                    prototypes: np.ndarray | None = None) -> np.ndarray:
    protos = spec.prototypes() if prototypes is None else prototypes
    clean = np.repeat(protos[list(token_ids)], list(durations), axis=0)
    if spec.prototype_noise_std > 0:
        clean = clean + spec.prototype_noise_std * rng.standard_normal(clean.shape)
    feats = loudness_gain * clean
    feats[:, spec.gender_channel] += spec.gender_offsets[gender]
    return feats


def generate_corpus(spec: SynthSpec, count: int, rng: np.random.Generator | None = None,
                    prefix: str = "utt") -> list[Utterance]:
    """Draw ``count`` synthetic utterances.

    Without an explicit generator the corpus is a pure function of
    ``spec.seed``.
    """
    if count < 1:
        raise DataError("count must be at least 1")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
    vocab = spec.vocabulary()
    protos = spec.prototypes()
    out = []
    width = max(4, len(str(count - 1)))
    for k in range(count):
        n_tok = int(rng.integers(spec.utterance_length_range[0], spec.utterance_length_range[1] + 1))
        tokens = rng.integers(0, spec.vocab_size, size=n_tok)
        durations = rng.integers(spec.frames_per_token[0], spec.frames_per_token[1] + 1, size=n_tok)
        gain = float(rng.uniform(*spec.loudness_range))
        gender = int(rng.integers(0, 2))
        feats = render_features(spec, tokens, durations, gain, gender, rng, protos)
        out.append(Utterance(
            id=f"{prefix}{k:0{width}d}",
            transcript=TokenSequence(tuple(int(t) for t in tokens), vocab),
            features=feats,
            loudness_gain=gain,
            gender_proxy=gender,
            duration_frames=int(durations.sum()),
        ))
    return out


@dataclass(frozen=True)
class MixPolicy:
    num_speakers: int = 2
    offset_mode: str = "partial_offset"
    offset_range_frames: tuple[int, int] = (25, 400)
    offset_probability: float = 0.4
    fixed_offset_frames: int = 0
    weight_floor: float = 0.1

    def __post_init__(self):
        if self.num_speakers < 1:
            raise DataError("num_speakers must be at least 1")
        if self.offset_mode not in OFFSET_MODES:
            raise DataError(f"offset_mode must be one of {OFFSET_MODES}")
        lo, hi = self.offset_range_frames
        if not 0 <= lo <= hi:
            raise DataError(f"bad offset_range_frames {self.offset_range_frames}")
        if not 0.0 <= self.offset_probability <= 1.0:
            raise DataError("offset_probability must lie in [0, 1]")
        if self.fixed_offset_frames < 0:
            raise DataError("fixed_offset_frames must be non-negative")
        if not 0.0 <= self.weight_floor < 1.0:
            raise DataError("weight_floor must lie in [0, 1)")


@dataclass(frozen=True)
class Component:
    utt_id: str
    transcript: TokenSequence
    start_frame: int
    weight: float
    loudness_gain: float
    gender: int
    content_length: int
    overlapped_frames: int
    duration_frames: int

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.duration_frames

    @property
    def effective_loudness(self) -> float:
        return self.weight * self.loudness_gain

    def to_json(self) -> dict:
        return {
            "utt_id": self.utt_id,
            "transcript": self.transcript.text(),
            "start_frame": self.start_frame,
            "weight": self.weight,
            "loudness_gain": self.loudness_gain,
            "gender": self.gender,
            "content_length": self.content_length,
            "overlapped_frames": self.overlapped_frames,
            "duration_frames": self.duration_frames,
        }


@dataclass(frozen=True, eq=False)
class MixtureSample:
    id: str
    features: np.ndarray
    components: tuple[Component, ...]
    feature_path: str | None = field(default=None, compare=False)

    @property
    def n_speakers(self) -> int:
        return len(self.components)

    @property
    def transcripts(self) -> list[TokenSequence]:
        return [c.transcript for c in self.components]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "n_speakers": self.n_speakers,
            "components": [c.to_json() for c in self.components],
            "feature_path": self.feature_path,
        }


def draw_weights(n: int, floor: float, rng: np.random.Generator) -> np.ndarray:
    raw = np.maximum(rng.uniform(0.0, 1.0, size=n), floor)
    return raw / raw.sum()


def overlap_counts(starts: Sequence[int], durations: Sequence[int]) -> list[int]:
    """Frames of each component that are covered by at least one other."""
    total = max(s + d for s, d in zip(starts, durations))
    cover = np.zeros(total, dtype=np.int64)
    for s, d in zip(starts, durations):
        cover[s:s + d] += 1
    return [int(np.count_nonzero(cover[s:s + d] > 1)) for s, d in zip(starts, durations)]


def place(features: Sequence[np.ndarray], starts: Sequence[int], weights: Sequence[float]) -> np.ndarray:
    total = max(s + f.shape[0] for s, f in zip(starts, features))
    out = np.zeros((total, features[0].shape[1]))
    for feat, s, w in zip(features, starts, weights):
        out[s:s + feat.shape[0]] += w * feat
    return out


def _draw_gap(policy: MixPolicy, rng: np.random.Generator, offset_on: bool) -> int:
    if policy.offset_mode == "fixed_offset":
        return policy.fixed_offset_frames
    if not offset_on:
        return 0
    lo, hi = policy.offset_range_frames
    return int(rng.integers(lo, hi + 1))


def mix(utts: Sequence[Utterance], policy: MixPolicy, rng: np.random.Generator,
        mixture_id: str | None = None, weights: Sequence[float] | None = None) -> MixtureSample:
    """Weighted, offset sum of ``policy.num_speakers`` utterances.

    Each start is measured from the previous component's start, so the
    first component always starts at frame 0.
    """
    if len(utts) == 0:
        raise DataError("cannot mix zero utterances")
    if len(utts) != policy.num_speakers:
        raise DataError(f"policy expects {policy.num_speakers} utterances, got {len(utts)}")
    n = len(utts)
    if weights is None:
        weights = draw_weights(n, policy.weight_floor, rng)
    weights = [float(w) for w in weights]
    if policy.offset_mode == "partial_offset":
        offset_on = bool(rng.random() < policy.offset_probability)
    else:
        offset_on = True
    starts = [0]
    for _ in range(1, n):
        starts.append(starts[-1] + _draw_gap(policy, rng, offset_on))
    durations = [u.duration_frames for u in utts]
    overlaps = overlap_counts(starts, durations)
    comps = tuple(
        Component(
            utt_id=u.id, transcript=u.transcript, start_frame=s, weight=w,
            loudness_gain=u.loudness_gain, gender=u.gender_proxy,
            content_length=len(u.transcript), overlapped_frames=o, duration_frames=d)
        for u, s, w, o, d in zip(utts, starts, weights, overlaps, durations))
    feats = place([u.features for u in utts], starts, weights)
    return MixtureSample(id=mixture_id or "+".join(u.id for u in utts), features=feats,
                         components=comps)


def mix_corpus(corpus: Sequence[Utterance], policy: MixPolicy, count: int,
               rng: np.random.Generator, prefix: str = "mix") -> list[MixtureSample]:
    """Draw ``count`` mixtures of distinct random utterances from ``corpus``."""
    if len(corpus) < policy.num_speakers:
        raise DataError("corpus smaller than the number of speakers per mixture")
    out = []
    for k in range(count):
        idx = rng.choice(len(corpus), size=policy.num_speakers, replace=False)
        out.append(mix([corpus[i] for i in idx], policy, rng, mixture_id=f"{prefix}{k:05d}"))
    return out


def build_eval_conditions(utt_lists: Sequence[Sequence[Utterance]], offsets: Sequence[float],
                          rng: np.random.Generator, weight_floor: float = 0.1,
                          frame_rate: int = FRAME_RATE) -> dict[tuple[int, float], list[MixtureSample]]:
    """One list of fixed-offset mixtures per (speaker count, offset seconds).

    Every condition reuses the same utterance groups and weights so that only
    the offset differs between conditions.
    """
    for off in offsets:
        if off < 0:
            raise DataError(f"negative offset {off}")
    weights = [draw_weights(len(g), weight_floor, rng) for g in utt_lists]
    out: dict[tuple[int, float], list[MixtureSample]] = {}
    for off in offsets:
        gap = seconds_to_frames(off, frame_rate)
        for group, w in zip(utt_lists, weights):
            n = len(group)
            policy = MixPolicy(num_speakers=n, offset_mode="fixed_offset",
                               fixed_offset_frames=gap, weight_floor=weight_floor)
            sample = mix(group, policy, rng, weights=w,
                         mixture_id=f"{n}mix-{off:g}s-" + "+".join(u.id for u in group))
            out.setdefault((n, off), []).append(sample)
    return out


def balanced_pairs(corpus: Sequence[Utterance], count: int, rng: np.random.Generator,
                   offset_frames: int = 0, loudness_ratio: float = 2.0,
                   prefix: str = "bal") -> list[MixtureSample]:
    """Two-talker mixtures whose dominance factors vary independently.

    Sample ``k`` takes stratum ``k % 8`` which fixes, independently: whether
    the louder talker is also the longer one, whether it carries gender 1,
    and whether it sits in component slot 0. Pairs always contrast in
    gender and content length; the louder talker's effective loudness is
    ``loudness_ratio`` times the other's.
    """
    if loudness_ratio <= 0:
        raise DataError("loudness_ratio must be positive")
    by_gender = {g: [u for u in corpus if u.gender_proxy == g] for g in (0, 1)}
    if not by_gender[0] or not by_gender[1]:
        raise DataError("corpus must contain both gender categories")
    out = []
    for k in range(count):
        stratum = k % 8
        loud_is_longer = bool(stratum & 1)
        loud_gender = (stratum >> 1) & 1
        loud_first = not (stratum >> 2) & 1
        for _ in range(10000):
            loud = by_gender[loud_gender][rng.integers(len(by_gender[loud_gender]))]
            quiet = by_gender[1 - loud_gender][rng.integers(len(by_gender[1 - loud_gender]))]
            if len(loud.transcript) != len(quiet.transcript) and \
                    (len(loud.transcript) > len(quiet.transcript)) == loud_is_longer:
                break
        else:
            raise DataError("corpus lacks the length contrast needed for balancing")
        w_loud = loudness_ratio / loud.loudness_gain
        w_quiet = 1.0 / quiet.loudness_gain
        total = w_loud + w_quiet
        pair = [loud, quiet] if loud_first else [quiet, loud]
        weights = [w_loud / total, w_quiet / total] if loud_first else [w_quiet / total, w_loud / total]
        policy = MixPolicy(num_speakers=2, offset_mode="fixed_offset",
                           fixed_offset_frames=offset_frames, weight_floor=0.0)
        out.append(mix(pair, policy, rng, weights=weights, mixture_id=f"{prefix}{k:05d}"))
    return out


# ---------------------------------------------------------------------------
# File formats


def write_features(path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype="<f4")
    t, f = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, f))
        fh.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file (bad magic)")
    version, t, f = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    body = raw[16:]
    if len(body) != 4 * t * f:
        raise DataError(f"{path}: truncated feature payload")
    return np.frombuffer(body, dtype="<f4").reshape(t, f).astype(np.float64)


def write_manifest(path, samples: Sequence[MixtureSample], feature_dir=None) -> None:
    """Write a JSON-lines manifest; features go to ``feature_dir`` as .sotf files."""
    path = Path(path)
    feature_dir = Path(feature_dir) if feature_dir is not None else path.parent / (path.stem + "_feats")
    feature_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fpath = feature_dir / f"{s.id}.sotf"
            write_features(fpath, s.features)
            rec = s.to_json()
            rec["feature_path"] = str(fpath.relative_to(path.parent)) \
                if fpath.is_relative_to(path.parent) else str(fpath)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path, vocab: Vocabulary, load_features: bool = True) -> list[MixtureSample]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                comps = []
                feats = None
                if load_features:
                    fpath = Path(rec["feature_path"])
                    feats = read_features(fpath if fpath.is_absolute() else path.parent / fpath)
                for c in rec["components"]:
                    transcript = encode_transcript(c["transcript"], vocab)
                    comps.append(Component(
                        utt_id=c["utt_id"], transcript=transcript, start_frame=int(c["start_frame"]),
                        weight=float(c["weight"]), loudness_gain=float(c["loudness_gain"]),
                        gender=int(c["gender"]), content_length=int(c["content_length"]),
                        overlapped_frames=int(c["overlapped_frames"]),
                        duration_frames=int(c["duration_frames"])))
                if len(comps) != rec["n_speakers"]:
                    raise DataError("n_speakers disagrees with component count")
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            out.append(MixtureSample(id=rec["id"], features=feats, components=tuple(comps),
                                     feature_path=rec["feature_path"]))
    return out


def write_corpus(path, utts: Sequence[Utterance]) -> None:
    """Single-talker corpus as a manifest of one-component mixtures."""
    samples = [MixtureSample(
        id=u.id, features=u.features,
        components=(Component(u.id, u.transcript, 0, 1.0, u.loudness_gain, u.gender_proxy,
                              len(u.transcript), 0, u.duration_frames),))
        for u in utts]
    write_manifest(path, samples)


def read_corpus(path, vocab: Vocabulary) -> list[Utterance]:
    out = []
    for s in read_manifest(path, vocab):
        c = s.components[0]
        out.append(Utterance(id=s.id, transcript=c.transcript, features=s.features,
                             loudness_gain=c.loudness_gain, gender_proxy=c.gender,
                             duration_frames=s.features.shape[0]))
    return out


def mix_waveforms(paths: Sequence, weights: Sequence[float], offsets: Sequence[int], out_path) -> int:
    """Weighted sum of mono 16-bit WAV files, each delayed by ``offsets`` samples.

    Returns the number of clipped samples.
    """
    if not (len(paths) == len(weights) == len(offsets)) or not paths:
        raise DataError("paths, weights and offsets must be non-empty and equally long")
    signals = []
    rate = None
    for p in paths:
        with wave.open(str(p), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2 or wf.getcomptype() != "NONE":
                raise DataError(f"{p}: only mono 16-bit PCM is supported")
            if rate is None:
                rate = wf.getframerate()
            elif wf.getframerate() != rate:
                raise DataError(f"{p}: sample rate {wf.getframerate()} differs from {rate}")
            signals.append(np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2"))
    if any(o < 0 for o in offsets):
        raise DataError("offsets must be non-negative")
    total = max(o + len(s) for o, s in zip(offsets, signals))
    acc = np.zeros(total)
    for sig, w, o in zip(signals, weights, offsets):
        acc[o:o + len(sig)] += w * sig.astype(np.float64)
    acc = np.rint(acc)
    clipped = int(np.count_nonzero((acc > 32767) | (acc < -32768)))
    if clipped:
        log.warning("%s: %d samples clipped", out_path, clipped)
    out = np.clip(acc, -32768, 32767).astype("<i2")
    with wave.open(str(out_path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(out.tobytes())
    return clipped
