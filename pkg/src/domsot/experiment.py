"""Desk-scale comparison protocol for the three serialization strategies.

The same recipe is available step by step through the CLI (see README);
this module runs it in-process so that tests can reuse trained models.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property

from .core import ExperimentConfig, Vocabulary, substream
from .data import (MixPolicy, MixtureSample, SynthSpec, balanced_pairs, build_eval_conditions,
                   generate_corpus, mix_corpus, seconds_to_frames)
from .metrics import score_corpus
from .model import ModelParams
from .trainer import evaluate, train


@dataclass(frozen=True)
class DeskProtocol:
    seed: int = 0
    corpus_size: int = 1200
    train_pool: int = 1000
    train_mixtures: int = 2000
    test_pairs: int = 100
    test_offsets: tuple[float, ...] = (0.0, 3.0)
    balanced_pairs: int = 200
    loudness_ratio: float = 2.0
    epochs: int = 20
    learning_rate: float = 3e-3
    batch_size: int = 16
    warmup_epochs: int = 1
    checkpoint_average_last: int = 3
    alpha: float = 0.1
    synth: SynthSpec = field(default_factory=SynthSpec)

    def config(self, strategy: str) -> ExperimentConfig:
        return ExperimentConfig(alpha=self.alpha, learning_rate=self.learning_rate, epochs=self.epochs,
                                warmup_epochs=self.warmup_epochs, batch_size=self.batch_size,
                                seed=self.seed, checkpoint_average_last=self.checkpoint_average_last,
                                strategy=strategy)


class DeskExperiment:
    """Corpus, mixtures and trained models for one protocol seed.

    FIFO trains on mixtures that always carry a 0.25-4 s offset; PIT and DOM
    train on mixtures where that offset is applied 40% of the time. Test
    sets come from a held-out utterance pool.
    """

    def __init__(self, protocol: DeskProtocol):
        self.protocol = protocol
        self._models: dict[str, ModelParams] = {}
        self.train_seconds: dict[str, float] = {}

    @cached_property
    def spec(self) -> SynthSpec:
        from dataclasses import replace
        return replace(self.protocol.synth, seed=self.protocol.seed)

    @property
    def vocab(self) -> Vocabulary:
        return self.spec.vocabulary()

    @cached_property
    def corpus(self):
        return generate_corpus(self.spec, self.protocol.corpus_size,
                               substream(self.protocol.seed, "corpus"))

    def train_set(self, strategy: str) -> list[MixtureSample]:
        mode = "always_offset" if strategy == "fifo" else "partial_offset"
        return mix_corpus(self.corpus[:self.protocol.train_pool], MixPolicy(2, mode),
                          self.protocol.train_mixtures, substream(self.protocol.seed, "mixing"))

    @cached_property
    def test_sets(self) -> dict[float, list[MixtureSample]]:
        pool = self.corpus[self.protocol.train_pool:]
        groups = [pool[2 * i:2 * i + 2] for i in range(self.protocol.test_pairs)]
        conds = build_eval_conditions(groups, self.protocol.test_offsets,
                                      substream(self.protocol.seed, "eval"))
        return {off: samples for (_, off), samples in conds.items()}

    def balanced_set(self, offset: float = 0.0) -> list[MixtureSample]:
        return balanced_pairs(self.corpus[self.protocol.train_pool:], self.protocol.balanced_pairs,
                              substream(self.protocol.seed, "eval"), seconds_to_frames(offset),
                              self.protocol.loudness_ratio)

    def model(self, strategy: str) -> ModelParams:
        if strategy not in self._models:
            t0 = time.perf_counter()
            result = train(self.protocol.config(strategy), self.train_set(strategy), self.vocab)
            self.train_seconds[strategy] = time.perf_counter() - t0
            self._models[strategy] = result.params
        return self._models[strategy]

    def hypotheses(self, strategy: str, samples):
        return dict(evaluate(self.model(strategy), samples, self.vocab))

    def score(self, strategy: str, offset: float) -> dict:
        samples = self.test_sets[offset]
        return score_corpus(self.hypotheses(strategy, samples), {s.id: s.transcripts for s in samples},
                            self.vocab, condition=f"2mix-{offset:g}s")
