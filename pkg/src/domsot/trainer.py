"""Adam training loop with linear warmup, strategy-dispatched SOT losses and
checkpoint averaging."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .core import ExperimentConfig, TokenSequence, Vocabulary, encode_tokens, substream
from .ctc import ctc_batch
from .data import MixtureSample
from .model import (ModelParams, as_vars, backprop, decode_batch, encode_batch, init_params, recognize,
                    teacher_inputs)
from .serialization import build_serialized_label, ce_batch, dom_order, fifo_order

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class BatchLoss:
    """Per-batch loss terms; ``ctc_min`` is only filled for the DOM strategy."""

    total: float
    n_used: int
    per_sample: np.ndarray
    ctc_min: np.ndarray | None = None
    orders: list[tuple[int, ...]] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    grads: dict[str, np.ndarray] | None = None


def _targets(samples, orders, vocab):
    return [build_serialized_label(s.transcripts, o, vocab).ids.ids for s, o in zip(samples, orders)]


def batch_loss(params: ModelParams, samples: Sequence[MixtureSample], vocab: Vocabulary,
               strategy: str, alpha: float = 0.1, with_grad: bool = True,
               fixed_orders: Sequence[tuple[int, ...]] | None = None) -> BatchLoss:
    """Mean strategy loss over ``samples`` and, optionally, its parameter gradients.

    ``fixed_orders`` pins the serialization order per sample (PIT argmin or
    DOM sort), which makes the loss a smooth function of the parameters for
    finite-difference checks.
    """
    pv = as_vars(params)
    enc = encode_batch(params, pv, [s.features for s in samples])
    B = len(samples)
    nodes, grads = [], []
    ctc_min = None
    skipped = []
    used = np.ones(B, dtype=bool)
    per_sample = np.zeros(B)

    if strategy == "pit":
        perms = [list(itertools.permutations(range(s.n_speakers))) for s in samples]
        if fixed_orders is not None:
            perms = [[tuple(o)] for o in fixed_orders]
        owner = [b for b, ps in enumerate(perms) for _ in ps]
        flat = [p for ps in perms for p in ps]
        idx = np.array(owner)
        rep = type(enc)(ag.getitem(enc.h, idx), None, enc.lengths[idx], enc.mask[idx])
        targets = _targets([samples[b] for b in owner], flat, vocab)
        inputs, classes = teacher_inputs(params, vocab, targets)
        logits, _ = decode_batch(params, pv, rep, inputs)
        losses, g = ce_batch(logits.value, classes, with_grad)
        pick = np.zeros(len(flat), dtype=bool)
        orders = []
        start = 0
        for b, ps in enumerate(perms):
            seg = losses[start:start + len(ps)]
            j = int(np.argmin(seg))
            pick[start + j] = True
            per_sample[b] = seg[j]
            orders.append(ps[j])
            start += len(ps)
        if with_grad:
            nodes.append(logits)
            grads.append(g * pick[:, None, None] / B)
    else:
        ctc_grad = None
        if strategy == "fifo":
            orders = [fifo_order(s.components) for s in samples]
        elif strategy == "dom":
            grid = enc.ctc_grid.value
            blank = params.n_content
            pairs = [(b, i) for b, s in enumerate(samples) for i in range(s.n_speakers)]
            # one pass scores every component; the winner's gradient is reused below
            sc_losses, feas, sc_grads = ctc_batch(
                grid[[b for b, _ in pairs]], [enc.lengths[b] for b, _ in pairs],
                [list(samples[b].transcripts[i].ids) for b, i in pairs], blank, with_grad=with_grad)
            scores = [[] for _ in samples]
            row = {}
            for k, ((b, i), l, ok) in enumerate(zip(pairs, sc_losses, feas)):
                scores[b].append(float(l) if ok else None)
                row[b, i] = k
            orders = []
            for b, s in enumerate(samples):
                if all(v is None for v in scores[b]):
                    used[b] = False
                    skipped.append(s.id)
                    log.warning("%s: every component is infeasible for CTC; sample skipped", s.id)
                    orders.append(tuple(range(s.n_speakers)))
                else:
                    orders.append(dom_order(scores[b]))
            if fixed_orders is not None:
                orders = [tuple(o) for o in fixed_orders]
            pick = [row[b, orders[b][0]] for b in range(B)]
            ctc_min = np.where(used, sc_losses[pick], np.nan)
            if used.any() and not np.all(np.isfinite(ctc_min[used])):
                raise NumericError("the ordered first component is infeasible for CTC")
            if with_grad:
                ctc_grad = alpha * sc_grads[pick] * used[:, None, None]
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        if fixed_orders is not None and strategy == "fifo":
            orders = [tuple(o) for o in fixed_orders]
        targets = _targets(samples, orders, vocab)
        inputs, classes = teacher_inputs(params, vocab, targets)
        logits, _ = decode_batch(params, pv, enc, inputs)
        ce, g = ce_batch(logits.value, classes, with_grad)
        if strategy == "dom":
            per_sample = np.where(used, alpha * np.nan_to_num(ctc_min) + (1 - alpha) * ce, 0.0)
            if with_grad:
                nodes += [logits, enc.ctc_grid]
                grads += [(1 - alpha) * g * used[:, None, None] / B, ctc_grad / B]
        else:
            per_sample = ce
            if with_grad:
                nodes.append(logits)
                grads.append(g / B)

    n_used = int(used.sum())
    total = float(per_sample[used].sum() / B) if n_used else 0.0
    out = BatchLoss(total, n_used, per_sample, ctc_min, orders, skipped)
    if with_grad:
        out.grads = backprop(pv, nodes, grads)
    return out


def sample_loss(params: ModelParams, sample: MixtureSample, vocab: Vocabulary, strategy: str,
                alpha: float = 0.1) -> float:
    return batch_loss(params, [sample], vocab, strategy, alpha, with_grad=False).total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        zeros = {k: np.zeros_like(p) for k, p in params.tensors.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()})


def learning_rate(base: float, step: int, warmup_steps: int) -> float:
    """Linear warmup from ``base / warmup_steps`` at step 0, constant afterwards."""
    if warmup_steps <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup_steps)


def adam_update(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> None:
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        state.params.tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def average_checkpoints(checkpoints: Sequence[ModelParams]) -> ModelParams:
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    out = checkpoints[0].copy()
    for name in out.tensors:
        acc = np.zeros_like(out.tensors[name])
        for ck in checkpoints:
            acc += ck.tensors[name]
        out.tensors[name] = acc / len(checkpoints)
    return out


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    state: TrainState


def train(config: ExperimentConfig, samples: Sequence[MixtureSample], vocab: Vocabulary,
          init: ModelParams | None = None, max_steps: int | None = None,
          log_path=None) -> TrainResult:
    """Train the toy model on ``samples`` with the configured strategy.

    ``max_steps`` truncates training (used by smoke tests); epoch-end
    bookkeeping still happens for completed epochs.
    """
    if not samples:
        raise ValueError("no training samples")
    feature_dim = samples[0].features.shape[1]
    params = init if init is not None else init_params(
        vocab.n_content, feature_dim, config.hidden_size, config.subsample_factor,
        substream(config.seed, "init"))
    state = TrainState.fresh(params.copy())
    shuffle = substream(config.seed, "shuffle")
    steps_per_epoch = -(-len(samples) // config.batch_size)
    warmup_steps = config.warmup_epochs * steps_per_epoch
    keep = config.checkpoint_average_last
    snapshots: list[ModelParams] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            order = shuffle.permutation(len(samples))
            losses, ctc_mins, n_seen = [], [], 0
            lr = learning_rate(config.learning_rate, state.step, warmup_steps)
            for start in range(0, len(samples), config.batch_size):
                if max_steps is not None and state.step >= max_steps:
                    break
                batch = [samples[i] for i in order[start:start + config.batch_size]]
                res = batch_loss(state.params, batch, vocab, config.strategy, config.alpha)
                if not np.isfinite(res.total) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
                    raise NumericError(f"non-finite loss in batch starting with {batch[0].id}")
                lr = learning_rate(config.learning_rate, state.step, warmup_steps)
                adam_update(state, res.grads, lr)
                losses.append(res.total * len(batch))
                n_seen += len(batch)
                if res.ctc_min is not None:
                    ctc_mins.extend(res.ctc_min[~np.isnan(res.ctc_min)].tolist())
            if n_seen == 0:
                break
            state.epoch = epoch + 1
            entry = {"epoch": epoch + 1, "mean_loss": float(np.sum(losses) / n_seen), "lr": lr}
            if config.strategy == "dom":
                entry["mean_ctc_min"] = float(np.mean(ctc_mins)) if ctc_mins else None
            state.log.append(entry)
            log.info("epoch %d loss %.4f", epoch + 1, entry["mean_loss"])
            if fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()
            if keep:
                snapshots.append(state.params.copy())
                snapshots = snapshots[-keep:]
    finally:
        if fh:
            fh.close()
    final = average_checkpoints(snapshots) if keep and snapshots else state.params.copy()
    return TrainResult(final, state.log, state)


# ---------------------------------------------------------------------------
# evaluation


def default_max_len(sample: MixtureSample, factor: int = 2, slack: int = 4) -> int:
    return factor * sum(len(t) + 1 for t in sample.transcripts) + slack


def evaluate(params: ModelParams, samples: Sequence[MixtureSample], vocab: Vocabulary,
             decode_max_len: int | None = None) -> list[tuple[str, TokenSequence]]:
    if not samples:
        return []
    max_len = decode_max_len or max(default_max_len(s) for s in samples)
    hyps = recognize(params, [s.features for s in samples], vocab, max_len)
    return [(s.id, h) for s, h in zip(samples, hyps)]


def write_hypotheses(path, hyps: Sequence[tuple[str, TokenSequence]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, seq in hyps:
            fh.write(f"{sid}\t{seq.text()}\n")


def read_hypotheses(path, vocab: Vocabulary) -> dict[str, TokenSequence]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        sid, _, text = line.partition("\t")
        try:
            out[sid] = encode_tokens(text, vocab)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno} ({sid}): {exc}") from exc
    return out
