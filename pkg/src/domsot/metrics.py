"""Edit distance, speaker-blind WER and speaker-aware WER for serialized output."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import TokenSequence, Vocabulary
from .serialization import split_on_sc


class MetricError(ValueError):
    pass


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int, int]:
    """Levenshtein alignment of ``ref`` into ``hyp``.

    Returns ``(distance, substitutions, insertions, deletions)``. On equal
    cost the traceback prefers the diagonal, then deletion, then insertion.
    """
    ref = list(getattr(ref, "ids", ref))
    hyp = list(getattr(hyp, "ids", hyp))
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    S = I = D = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return int(d[n, m]), int(S), int(I), int(D)


def _strip_eos(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    out = []
    for t in ids:
        if t == vocab.eos_id:
            break
        if t != vocab.pad_id:
            out.append(t)
    return out


def _serialized_reference(refs: Sequence[Sequence[int]], order, vocab: Vocabulary) -> list[int]:
    out: list[int] = []
    for i in order:
        out.extend(refs[i])
        out.append(vocab.sc_id)
    return out


def blind_errors(hyp: Sequence[int], refs: Sequence[Sequence[int]], vocab: Vocabulary) -> tuple[int, int]:
    """Minimum edit distance over reference orders, and the reference length."""
    if not refs:
        raise MetricError("no references")
    hyp = _strip_eos(hyp, vocab)
    refs = [list(getattr(r, "ids", r)) for r in refs]
    best = None
    for order in itertools.permutations(range(len(refs))):
        dist = edit_distance(_serialized_reference(refs, order, vocab), hyp)[0]
        best = dist if best is None else min(best, dist)
    total = sum(len(r) + 1 for r in refs)
    return best, total


def speaker_blind_wer(hypothesis, references: Sequence, vocab: Vocabulary) -> float:
    """WER of the hypothesis against the best-ordered serialized reference.

    ``<sc>`` is scored as an ordinary token; ``<eos>`` is ignored.
    """
    hyp = list(getattr(hypothesis, "ids", hypothesis))
    errors, total = blind_errors(hyp, references, vocab)
    if total == 0:
        raise MetricError("references contain no tokens")
    return errors / total


@dataclass
class AlignedPair:
    reference: list[int]
    hypothesis: list[int]
    ref_index: int | None
    hyp_index: int | None
    S: int
    I: int
    D: int

    @property
    def C(self) -> int:
        return len(self.reference)

    @property
    def errors(self) -> int:
        return self.S + self.I + self.D


@dataclass
class WerReport:
    pairs: list[AlignedPair]
    speaker_aware_wer: float
    speaker_blind_wer: float
    n: int
    m: int
    blind_errors: int = field(default=0, repr=False)
    blind_total: int = field(default=0, repr=False)

    @property
    def errors(self) -> int:
        return sum(p.errors for p in self.pairs)

    @property
    def ref_tokens(self) -> int:
        return sum(p.C for p in self.pairs)


def match_cost(ref: Sequence[int], hyp: Sequence[int]) -> float:
    return edit_distance(ref, hyp)[0] / max(len(ref), len(hyp), 1)


def greedy_pairing(segments: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> list[tuple[int | None, int | None]]:
    """(reference index, segment index) pairs, unpaired sides set to None.

    References are visited in order; each takes the remaining segment with
    the lowest length-normalised edit distance (lowest index on ties).
    """
    free = list(range(len(segments)))
    pairs: list[tuple[int | None, int | None]] = []
    for r, ref in enumerate(refs):
        if not free:
            pairs.append((r, None))
            continue
        best = min(free, key=lambda s: (match_cost(ref, segments[s]), s))
        free.remove(best)
        pairs.append((r, best))
    pairs.extend((None, s) for s in free)
    return pairs


def speaker_aware_wer(hypothesis, references: Sequence, vocab: Vocabulary) -> WerReport:
    hyp = list(getattr(hypothesis, "ids", hypothesis))
    refs = [list(getattr(r, "ids", r)) for r in references]
    if not refs:
        raise MetricError("no references")
    segments = split_on_sc(hyp, vocab)
    pairs = []
    for r, s in greedy_pairing(segments, refs):
        ref = refs[r] if r is not None else []
        seg = list(segments[s]) if s is not None else []
        _, S, I, D = edit_distance(ref, seg)
        pairs.append(AlignedPair(ref, seg, r, s, S, I, D))
    total = sum(p.C for p in pairs)
    if total == 0:
        raise MetricError("references contain no tokens")
    b_err, b_tot = blind_errors(hyp, refs, vocab)
    return WerReport(pairs, sum(p.errors for p in pairs) / total, b_err / b_tot,
                     n=len(segments), m=len(refs), blind_errors=b_err, blind_total=b_tot)


def score_corpus(hypotheses: Mapping[str, TokenSequence], references: Mapping[str, Sequence[TokenSequence]],
                 vocab: Vocabulary, condition: str = "") -> dict:
    """Corpus report; rates are pooled over samples (total errors / total tokens)."""
    per_sample = []
    aw_err = aw_tot = bl_err = bl_tot = 0
    for sid, refs in references.items():
        hyp = hypotheses.get(sid)
        if hyp is None:
            hyp = TokenSequence((), vocab)
        rep = speaker_aware_wer(hyp, refs, vocab)
        aw_err += rep.errors
        aw_tot += rep.ref_tokens
        bl_err += rep.blind_errors
        bl_tot += rep.blind_total
        per_sample.append({"id": sid, "n": rep.n, "m": rep.m,
                           "wer_blind": rep.speaker_blind_wer, "wer_aware": rep.speaker_aware_wer})
    return {
        "condition": condition,
        "n_samples": len(per_sample),
        "speaker_blind_wer": bl_err / bl_tot if bl_tot else 0.0,
        "speaker_aware_wer": aw_err / aw_tot if aw_tot else 0.0,
        "per_sample": per_sample,
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
