"""Shared vocabulary, token, utterance and configuration types."""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BLANK = "<blank>"
SC = "<sc>"
EOS = "<eos>"
PAD = "<pad>"
RESERVED = (BLANK, SC, EOS, PAD)

STRATEGIES = ("fifo", "pit", "dom")


class VocabularyError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Closed symbol inventory.

    Content symbols take ids ``0..K-1``; blank, speaker change, end of
    sentence and padding follow in that order.
    """

    content_tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.content_tokens:
            raise VocabularyError("content vocabulary is empty")
        seen = set()
        for sym in self.content_tokens:
            if sym in seen:
                raise VocabularyError(f"duplicate symbol {sym!r}")
            if sym in RESERVED:
                raise VocabularyError(f"symbol {sym!r} is reserved")
            if not sym or any(c.isspace() for c in sym):
                raise VocabularyError(f"symbol {sym!r} must be a non-empty word")
            seen.add(sym)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @property
    def n_content(self) -> int:
        return len(self.content_tokens)

    @property
    def blank_id(self) -> int:
        return self.n_content

    @property
    def sc_id(self) -> int:
        return self.n_content + 1

    @property
    def eos_id(self) -> int:
        return self.n_content + 2

    @property
    def pad_id(self) -> int:
        return self.n_content + 3

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.content_tokens + RESERVED

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    def symbol(self, idx: int) -> str:
        return self.symbols[idx]

    def is_content(self, idx: int) -> bool:
        return 0 <= idx < self.n_content

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.symbols[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.content_tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split()
        return build_vocabulary(lines)


def build_vocabulary(symbols: Sequence[str]) -> Vocabulary:
    if not symbols:
        raise VocabularyError("empty symbol list")
    return Vocabulary(tuple(symbols))


@dataclass(frozen=True)
class TokenSequence:
    """Immutable run of token ids bound to a vocabulary."""

    ids: tuple[int, ...]
    vocab: Vocabulary = field(repr=False, compare=False)

    def __post_init__(self):
        size = len(self.vocab)
        for i in self.ids:
            if not 0 <= i < size:
                raise VocabularyError(f"token id {i} outside vocabulary of size {size}")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    @property
    def is_plain(self) -> bool:
        return all(self.vocab.is_content(i) for i in self.ids)

    def text(self) -> str:
        return self.vocab.decode(self.ids)


def encode_transcript(text: str, vocab: Vocabulary) -> TokenSequence:
    ids = []
    for pos, sym in enumerate(text.split(), start=1):
        idx = vocab._index.get(sym)
        if idx is None or not vocab.is_content(idx):
            raise VocabularyError(f"unknown symbol {sym!r} at position {pos}")
        ids.append(idx)
    return TokenSequence(tuple(ids), vocab)


def encode_tokens(text: str, vocab: Vocabulary) -> TokenSequence:
    """Like :func:`encode_transcript` but also accepts reserved markers."""
    ids = []
    for pos, sym in enumerate(text.split(), start=1):
        if sym not in vocab._index:
            raise VocabularyError(f"unknown symbol {sym!r} at position {pos}")
        ids.append(vocab._index[sym])
    return TokenSequence(tuple(ids), vocab)


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    transcript: TokenSequence
    features: np.ndarray
    loudness_gain: float
    gender_proxy: int
    duration_frames: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.duration_frames:
            raise ValueError(
                f"{self.id}: duration_frames={self.duration_frames} but features "
                f"have shape {self.features.shape}")
        if not self.loudness_gain > 0:
            raise ValueError(f"{self.id}: loudness_gain must be positive")
        if self.gender_proxy not in (0, 1):
            raise ValueError(f"{self.id}: gender_proxy must be 0 or 1")
        self.features.setflags(write=False)


@dataclass(frozen=True)
class ExperimentConfig:
    alpha: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 40
    warmup_epochs: int = 4
    batch_size: int = 8
    seed: int = 0
    checkpoint_average_last: int = 5
    subsample_factor: int = 10
    strategy: str = "dom"
    hidden_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha={self.alpha} outside [0, 1]")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("epochs", "batch_size", "subsample_factor", "hidden_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if not 0 <= self.checkpoint_average_last <= self.epochs:
            raise ConfigError("checkpoint_average_last must lie in [0, epochs]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n".replace("'", "")
                       for f in dataclasses.fields(self))

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                values[key] = {"float": float, "int": int, "str": str}[kind](val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


_SUBSTREAMS = {"corpus": 1, "mixing": 2, "init": 3, "shuffle": 4, "eval": 5}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the global seed."""
    key = _SUBSTREAMS.get(name)
    if key is None:
        key = zlib.crc32(name.encode()) | (1 << 32)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))
