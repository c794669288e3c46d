"""Serialized multi-talker targets and the FIFO, PIT and DOM training losses."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import TokenSequence, Vocabulary
from .ctc import CtcResult, ctc_loss, dominance_scores, log_softmax
from .model import out_class


class SerializationError(ValueError):
    pass


@dataclass(frozen=True)
class SerializedLabel:
    ids: TokenSequence
    permutation: tuple[int, ...]
    strategy: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def segments(self) -> list[list[int]]:
        return split_on_sc(self.ids.ids, self.ids.vocab)


def _check_permutation(order: Sequence[int], n: int) -> tuple[int, ...]:
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(n)):
        raise SerializationError(f"{order} is not a permutation of 0..{n - 1}")
    return order


def build_serialized_label(transcripts: Sequence[TokenSequence], order: Sequence[int],
                           vocab: Vocabulary, strategy: str = "") -> SerializedLabel:
    """``L[order[0]] <sc> L[order[1]] <sc> ... <sc> <eos>``."""
    if not transcripts:
        raise SerializationError("no transcripts to serialize")
    order = _check_permutation(order, len(transcripts))
    ids: list[int] = []
    for i in order:
        ids.extend(transcripts[i].ids)
        ids.append(vocab.sc_id)
    ids.append(vocab.eos_id)
    return SerializedLabel(TokenSequence(tuple(ids), vocab), order, strategy)


def split_on_sc(ids: Sequence[int], vocab: Vocabulary) -> list[list[int]]:
    """Speaker segments of a serialized sequence.

    ``<eos>`` and anything after it is dropped, as is the empty segment that
    follows a trailing ``<sc>``.
    """
    segs: list[list[int]] = [[]]
    for tok in ids:
        if tok == vocab.eos_id:
            break
        if tok == vocab.sc_id:
            segs.append([])
        elif tok != vocab.pad_id:
            segs[-1].append(tok)
    if not segs[-1]:
        segs.pop()
    return segs


# ---------------------------------------------------------------------------
# cross entropy


def ce_batch(logits: np.ndarray, classes: np.ndarray, with_grad: bool = True):
    """Summed token cross entropy per batch row; ``classes == -1`` is padding."""
    logits = np.asarray(logits, dtype=np.float64)
    keep = classes >= 0
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, np.where(keep, classes, 0)[..., None], axis=-1)[..., 0]
    losses = -(picked * keep).sum(axis=-1)
    if not with_grad:
        return losses, None
    grad = np.exp(logp)
    np.put_along_axis(grad, np.where(keep, classes, 0)[..., None],
                      np.take_along_axis(grad, np.where(keep, classes, 0)[..., None], axis=-1) - 1.0,
                      axis=-1)
    grad *= keep[..., None]
    return losses, grad


def label_classes(label: SerializedLabel | TokenSequence) -> np.ndarray:
    seq = label.ids if isinstance(label, SerializedLabel) else label
    return np.array([out_class(seq.vocab, t) if t != seq.vocab.pad_id else -1 for t in seq.ids])


def ce_loss(decoder_logits, target: SerializedLabel, with_grad: bool = False):
    """Teacher-forced cross entropy summed over target tokens (natural log)."""
    logits = np.asarray(getattr(decoder_logits, "scores", decoder_logits), dtype=np.float64)
    classes = label_classes(target)
    if logits.shape[0] != len(classes):
        raise SerializationError(
            f"decoder produced {logits.shape[0]} rows for a target of {len(classes)} tokens")
    losses, grad = ce_batch(logits[None], classes[None], with_grad)
    return float(losses[0]), None if grad is None else grad[0]


# ---------------------------------------------------------------------------
# orders


def fifo_order(starts) -> tuple[int, ...]:
    """Ascending start frame; equal starts keep component order.

    Accepts start frames or objects carrying ``start_frame``.
    """
    starts = [getattr(s, "start_frame", s) for s in starts]
    return tuple(sorted(range(len(starts)), key=lambda i: (starts[i], i)))


def dom_order(scores: Sequence[float | None]) -> tuple[int, ...]:
    """Ascending dominance score, ties by index, infeasible (``None``) last."""
    def key(i):
        s = scores[i]
        return (1, 0.0, i) if s is None else (0, s, i)
    return tuple(sorted(range(len(scores)), key=key))


@dataclass
class PermutationSearchResult:
    best_loss: float
    best_permutation: tuple[int, ...]
    all_losses: dict[tuple[int, ...], float]


DEFAULT_MAX_PIT_SPEAKERS = 4


def pit_best_permutation(decoder_logits_provider: Callable[[SerializedLabel], np.ndarray],
                         transcripts: Sequence[TokenSequence], vocab: Vocabulary,
                         max_speakers: int = DEFAULT_MAX_PIT_SPEAKERS) -> PermutationSearchResult:
    """Minimum teacher-forced CE over every speaker order.

    The provider is called once per order because the decoder input (the
    shifted target) changes with the order. Ties keep the first order in
    lexicographic enumeration.
    """
    n = len(transcripts)
    if n > max_speakers:
        raise SerializationError(f"PIT over {n} speakers exceeds the limit of {max_speakers}")
    losses = {}
    for perm in itertools.permutations(range(n)):
        label = build_serialized_label(transcripts, perm, vocab, "pit")
        losses[perm] = ce_loss(decoder_logits_provider(label), label)[0]
    best = min(losses, key=lambda p: losses[p])
    return PermutationSearchResult(losses[best], best, losses)


@dataclass
class DomBreakdown:
    scores: list[float | None]
    order: tuple[int, ...]
    argmin: int
    min_ctc: float
    ce: float
    label: SerializedLabel
    ctc_grad: np.ndarray | None = field(default=None, repr=False)
    ce_grad: np.ndarray | None = field(default=None, repr=False)


def dom_loss(encoder_grid, decoder_logits_provider: Callable[[SerializedLabel], np.ndarray],
             transcripts: Sequence[TokenSequence], alpha: float, vocab: Vocabulary,
             with_grad: bool = False) -> tuple[float, DomBreakdown]:
    """``alpha * min_i CTC(h, L_i) + (1 - alpha) * CE(y, L^eps)``.

    The order ``eps`` sorts components by CTC score and is not
    differentiated; with ``with_grad`` the returned gradients are already
    scaled by ``alpha`` and ``1 - alpha``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise SerializationError(f"alpha={alpha} outside [0, 1]")
    grid = np.asarray(getattr(encoder_grid, "scores", encoder_grid), dtype=np.float64)
    scores = dominance_scores(grid, [t.ids for t in transcripts])
    if all(s is None for s in scores):
        raise SerializationError("every component is infeasible for CTC")
    order = dom_order(scores)
    argmin = order[0]
    ctc: CtcResult = ctc_loss(grid, transcripts[argmin].ids, with_grad=with_grad)
    label = build_serialized_label(transcripts, order, vocab, "dom")
    ce, ce_grad = ce_loss(decoder_logits_provider(label), label, with_grad=with_grad)
    loss = alpha * ctc.loss + (1.0 - alpha) * ce
    bd = DomBreakdown(scores, order, argmin, ctc.loss, ce, label)
    if with_grad:
        bd.ctc_grad = alpha * ctc.grad
        bd.ce_grad = (1.0 - alpha) * ce_grad
    return loss, bd
