"""Log-domain CTC loss and gradient, brute-force oracle, dominance scores."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NEG_INF = -np.inf


class CtcInfeasibleError(ValueError):
    """The label cannot be aligned to the available number of frames."""


@dataclass(frozen=True)
class LogitGrid:
    scores: np.ndarray
    source: str = "encoder_head"

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise ValueError("logit grid must be a T x V matrix")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("logit grid contains non-finite entries")


@dataclass
class CtcResult:
    loss: float
    grad: np.ndarray | None = None


def _as_scores(grid) -> np.ndarray:
    return np.asarray(grid.scores if isinstance(grid, LogitGrid) else grid, dtype=np.float64)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def min_frames(label: Sequence[int]) -> int:
    """Shortest input that can emit ``label``: one frame per token plus a
    blank between each adjacent repeat."""
    label = list(label)
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def _lse(*terms: np.ndarray) -> np.ndarray:
    m = terms[0]
    for t in terms[1:]:
        m = np.maximum(m, t)
    safe = np.where(np.isfinite(m), m, 0.0)
    acc = sum(np.exp(t - safe) for t in terms)
    with np.errstate(divide="ignore"):
        return safe + np.log(acc)


def ctc_batch(logits: np.ndarray, lengths: Sequence[int], labels: Sequence[Sequence[int]],
              blank: int, with_grad: bool = True):
    """CTC over a padded batch.

    Parameters
    ----------
    logits : (B, T, V) array
        Unnormalized scores; rows at or beyond ``lengths[b]`` are ignored.
    lengths : frame count per batch entry.
    labels : label id sequences (blank-free).
    blank : column of the blank symbol.

    Returns
    -------
    losses : (B,) array, ``inf`` where infeasible
    feasible : (B,) bool array
    grad : (B, T, V) array of d loss / d logits, or None
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, T, V = logits.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    label_lens = np.array([len(l) for l in labels], dtype=np.int64)
    feasible = np.array([lengths[b] >= min_frames(labels[b]) and lengths[b] >= 1 for b in range(B)])
    S = 2 * int(label_lens.max(initial=0)) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    for b, lab in enumerate(labels):
        if lab:
            ext[b, 1:2 * len(lab):2] = lab
    n_states = 2 * label_lens + 1
    state_ok = np.arange(S)[None, :] < n_states[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    logp = log_softmax(logits)
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(state_ok[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    ninf_col = np.full((B, 1), NEG_INF)
    for t in range(1, T):
        prev = alpha[:, t - 1]
        s1 = np.concatenate([ninf_col, prev[:, :-1]], axis=1)
        s2 = np.concatenate([ninf_col, ninf_col, prev[:, :-2]], axis=1)[:, :S]
        s2 = np.where(skip, s2, NEG_INF)
        alpha[:, t] = _lse(prev, s1, s2) + emit[:, t]

    rows = np.arange(B)
    last_t = np.maximum(lengths - 1, 0)
    end = alpha[rows, last_t]
    final = np.take_along_axis(end, (n_states - 1)[:, None], axis=1)[:, 0]
    penult = np.where(n_states >= 2,
                      np.take_along_axis(end, np.maximum(n_states - 2, 0)[:, None], axis=1)[:, 0],
                      NEG_INF)
    log_prob = _lse(final, penult)
    losses = np.where(feasible, -log_prob, np.inf)

    if not with_grad:
        return losses, feasible, None

    beta = np.full((B, T, S), NEG_INF)
    init = np.full((B, S), NEG_INF)
    init[rows, n_states - 1] = 0.0
    has_penult = n_states >= 2
    init[rows[has_penult], (n_states - 2)[has_penult]] = 0.0
    nxt = np.full((B, S), NEG_INF)
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            w = nxt + emit[:, t + 1]
            s1 = np.concatenate([w[:, 1:], ninf_col], axis=1)
            w2 = np.where(skip, w, NEG_INF)
            s2 = np.concatenate([w2[:, 2:], ninf_col, ninf_col], axis=1)[:, :S]
            rec = _lse(w, s1, s2)
        else:
            rec = np.full((B, S), NEG_INF)
        cur = np.where((t == lengths - 1)[:, None], init,
                       np.where((t < lengths - 1)[:, None], rec, NEG_INF))
        beta[:, t] = cur
        nxt = cur

    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - np.where(feasible, log_prob, 0.0)[:, None, None])
    occ = np.where(np.isfinite(occ), occ, 0.0)
    onehot = np.zeros((B, S, V))
    onehot[rows[:, None], np.arange(S)[None, :], ext] = 1.0
    onehot *= state_ok[:, :, None]
    grad = np.exp(logp) - np.einsum("bts,bsv->btv", occ, onehot)
    frame_ok = np.arange(T)[None, :] < lengths[:, None]
    grad *= (frame_ok & feasible[:, None])[:, :, None]
    return losses, feasible, grad


def ctc_loss(grid, label: Sequence[int], blank: int | None = None, with_grad: bool = False) -> CtcResult:
    """Negative log-likelihood of ``label`` under the CTC model of ``grid``.

    ``blank`` defaults to the last column, which is where the encoder head
    places it.
    """
    scores = _as_scores(grid)
    T, V = scores.shape
    blank = V - 1 if blank is None else blank
    label = [int(i) for i in label]
    if any(i == blank or not 0 <= i < V for i in label):
        raise ValueError("label must contain only non-blank grid columns")
    if T < min_frames(label) or T < 1:
        raise CtcInfeasibleError(
            f"label of length {len(label)} needs {min_frames(label)} frames, grid has {T}")
    losses, _, grad = ctc_batch(scores[None], [T], [label], blank, with_grad)
    return CtcResult(float(losses[0]), None if grad is None else grad[0])


def collapse(path: Sequence[int], blank: int) -> tuple[int, ...]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_bruteforce(grid, label: Sequence[int], blank: int | None = None) -> float:
    """Exhaustive sum over every frame path; exponential, for small grids only."""
    scores = _as_scores(grid)
    T, V = scores.shape
    if T > 8 or len(label) > 4:
        raise ValueError("brute force limited to T <= 8 and |label| <= 4")
    blank = V - 1 if blank is None else blank
    target = tuple(int(i) for i in label)
    probs = np.exp(log_softmax(scores))
    total = 0.0
    hit = False
    for path in itertools.product(range(V), repeat=T):
        if collapse(path, blank) == target:
            hit = True
            total += float(np.prod(probs[np.arange(T), path]))
    if not hit:
        raise CtcInfeasibleError(f"no path of length {T} collapses to {list(target)}")
    return -np.log(total)


def dominance_scores(grid, labels: Sequence[Sequence[int]], blank: int | None = None) -> list[float | None]:
    """CTC loss of every component transcript against one shared encoder grid.

    Lower is more dominant; ``None`` marks a transcript too long to align.
    """
    scores = _as_scores(grid)
    T, V = scores.shape
    blank = V - 1 if blank is None else blank
    losses, feasible, _ = ctc_batch(np.broadcast_to(scores, (len(labels), T, V)),
                                    [T] * len(labels), [list(l) for l in labels], blank,
                                    with_grad=False)
    return [float(l) if ok else None for l, ok in zip(losses, feasible)]
