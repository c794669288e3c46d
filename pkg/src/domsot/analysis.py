"""Dominance adherence and factor-bias analysis of two-talker decodes."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import TokenSequence, Vocabulary
from .ctc import dominance_scores
from .data import Component, MixtureSample
from .metrics import greedy_pairing, match_cost
from .model import ModelParams, as_vars, encode_batch, recognize
from .serialization import dom_order, split_on_sc

log = logging.getLogger(__name__)

FACTORS = ("loudness", "gender", "content_length", "overlap_length", "start_time")
DESIGNATED_GENDER = 1
BALANCE_TOLERANCE = 0.15


def first_transcribed(hypothesis: Sequence[int], refs: Sequence[Sequence[int]],
                      vocab: Vocabulary) -> int | None:
    """Reference index matched to the first hypothesis segment, or None when
    that cannot be decided (no segments, or the segment fits two references
    equally well)."""
    segments = split_on_sc(list(hypothesis), vocab)
    if not segments:
        return None
    owner = None
    for r, s in greedy_pairing(segments, refs):
        if s == 0:
            owner = r
    if owner is None:
        return None
    costs = [match_cost(ref, segments[0]) for ref in refs]
    if sum(c == costs[owner] for c in costs) > 1:
        return None
    return owner


def encoder_scores(params: ModelParams, samples: Sequence[MixtureSample],
                   batch_size: int = 32) -> list[list[float | None]]:
    """CTC dominance score of every component under the model's encoder head."""
    pv = {k: v for k, v in as_vars(params).items()}
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        enc = encode_batch(params, pv, [s.features for s in chunk])
        for b, s in enumerate(chunk):
            grid = enc.ctc_grid.value[b, :enc.lengths[b]]
            out.append(dominance_scores(grid, [t.ids for t in s.transcripts], blank=params.n_content))
    return out


@dataclass
class AdherenceResult:
    rate: float | None
    n_used: int
    n_undecidable: int
    per_sample: list[bool | None] = field(default_factory=list, repr=False)


def adherence_from(hypotheses: Sequence[Sequence[int]], samples: Sequence[MixtureSample],
                   scores: Sequence[Sequence[float | None]], vocab: Vocabulary) -> AdherenceResult:
    flags: list[bool | None] = []
    for hyp, s, sc in zip(hypotheses, samples, scores):
        first = first_transcribed(list(getattr(hyp, "ids", hyp)), [t.ids for t in s.transcripts], vocab)
        finite = [v for v in sc if v is not None]
        if first is None or not finite or len(set(finite)) < len(finite):
            flags.append(None)
        else:
            flags.append(first == dom_order(sc)[0])
    used = [f for f in flags if f is not None]
    rate = sum(used) / len(used) if used else None
    return AdherenceResult(rate, len(used), len(flags) - len(used), flags)


def adherence_rate(params: ModelParams, samples: Sequence[MixtureSample], vocab: Vocabulary,
                   hypotheses: Sequence[TokenSequence] | None = None) -> AdherenceResult:
    """Fraction of decodes that put the lower-CTC component first."""
    for s in samples:
        if s.n_speakers != 2:
            raise ValueError(f"{s.id}: adherence needs two-talker mixtures")
    if hypotheses is None:
        max_len = max(2 * sum(len(t) + 1 for t in s.transcripts) + 4 for s in samples)
        hypotheses = recognize(params, [s.features for s in samples], vocab, max_len)
    return adherence_from(hypotheses, samples, encoder_scores(params, samples), vocab)


def _compare(a: float, b: float, larger_wins: bool = True) -> bool | None:
    if a == b:
        return None
    return (a > b) if larger_wins else (a < b)


def factor_outcomes(dom: Component, other: Component) -> dict[str, bool | None]:
    """Whether the dominant component wins each factor; None means no contrast."""
    gender = None if dom.gender == other.gender else dom.gender == DESIGNATED_GENDER
    return {
        "loudness": _compare(dom.effective_loudness, other.effective_loudness),
        "gender": gender,
        "content_length": _compare(dom.content_length, other.content_length),
        "overlap_length": _compare(dom.overlapped_frames / dom.duration_frames,
                                   other.overlapped_frames / other.duration_frames),
        "start_time": _compare(dom.start_frame, other.start_frame, larger_wins=False),
    }


@dataclass
class FactorReport:
    proportions: dict[str, float | None]
    counts: dict[str, int]
    no_contrast: dict[str, int]
    n_samples: int
    n_undecidable: int
    condition: str = ""
    strategy: str = ""
    imbalance: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        head = f"factor analysis  strategy={self.strategy or '-'}  condition={self.condition or '-'}"
        lines = [head, f"{'factor':<16}{'proportion':>12}{'n':>6}{'ties':>6}"]
        for f in FACTORS:
            p = self.proportions[f]
            ptxt = "n/a" if p is None else f"{p:.3f}"
            lines.append(f"{f:<16}{ptxt:>12}{self.counts[f]:>6}{self.no_contrast[f]:>6}")
        lines.append(f"samples {self.n_samples}, undecidable {self.n_undecidable}")
        return "\n".join(lines) + "\n"


def balance_statistics(samples: Sequence[MixtureSample]) -> dict[str, float]:
    """For each factor pair, how often one component wins both (0.5 = independent)."""
    stats = {}
    outcomes = [factor_outcomes(s.components[0], s.components[1]) for s in samples if s.n_speakers == 2]
    for f, g in itertools.combinations(("loudness", "gender", "content_length"), 2):
        both = [o for o in outcomes if o[f] is not None and o[g] is not None]
        if both:
            stats[f"{f}~{g}"] = sum(o[f] == o[g] for o in both) / len(both)
    return stats


def factor_analysis(hypotheses: Mapping[str, TokenSequence] | Sequence[TokenSequence],
                    samples: Sequence[MixtureSample], vocab: Vocabulary,
                    strategy: str = "", condition: str = "") -> FactorReport:
    """Per-factor share of two-talker samples where the first transcribed
    ("dominant") component wins that factor."""
    if isinstance(hypotheses, Mapping):
        hyps = [hypotheses.get(s.id, TokenSequence((), vocab)) for s in samples]
    else:
        hyps = list(hypotheses)
    wins = {f: 0 for f in FACTORS}
    counts = {f: 0 for f in FACTORS}
    ties = {f: 0 for f in FACTORS}
    undecidable = 0
    for hyp, s in zip(hyps, samples):
        if s.n_speakers != 2:
            raise ValueError(f"{s.id}: factor analysis needs two-talker mixtures")
        first = first_transcribed(list(hyp.ids), [t.ids for t in s.transcripts], vocab)
        if first is None:
            undecidable += 1
            continue
        for f, won in factor_outcomes(s.components[first], s.components[1 - first]).items():
            if won is None:
                ties[f] += 1
            else:
                counts[f] += 1
                wins[f] += int(won)
    imbalance = balance_statistics(samples)
    off = {k: v for k, v in imbalance.items() if abs(v - 0.5) > BALANCE_TOLERANCE}
    if off:
        log.warning("factor set is unbalanced: %s", json.dumps(off, sort_keys=True))
    props = {f: (wins[f] / counts[f] if counts[f] else None) for f in FACTORS}
    return FactorReport(props, counts, ties, len(samples), undecidable, condition, strategy, imbalance)
