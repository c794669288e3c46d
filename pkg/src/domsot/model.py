"""Toy attention encoder-decoder with a CTC head on the encoder output.

Topology: frame projection -> mean-pool subsampling -> local temporal mixing
-> encoder output ``h``; a linear CTC head on ``h``; an autoregressive
recurrent decoder with single-head scaled dot-product cross-attention over
``h`` (plus a learned shift kernel on the previous attention weights).

All forward passes run on the :mod:`domsot.autograd` tape so the same code
serves training, gradient checks and inference.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .core import TokenSequence, Vocabulary

CHECKPOINT_MAGIC = b"SOTM"
CHECKPOINT_VERSION = 1
LOC_SHIFTS = (-1, 0, 1, 2, 3)
MIX_WIDTH = 3


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    """Named parameter tensors plus the static sizes they were built for."""

    tensors: dict[str, np.ndarray]
    n_content: int
    feature_dim: int
    hidden: int
    subsample_factor: int
    nonlinear: bool = True

    @property
    def n_ctc(self) -> int:
        return self.n_content + 1

    @property
    def n_out(self) -> int:
        return self.n_content + 2

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.n_content,
                           self.feature_dim, self.hidden, self.subsample_factor, self.nonlinear)

    def check(self) -> None:
        for name, shape in param_shapes(self.n_content, self.feature_dim, self.hidden).items():
            if self.tensors[name].shape != shape:
                raise ModelError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ModelError(f"{name}: non-finite values")


def param_shapes(n_content: int, feature_dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    H = hidden
    return {
        "enc_in_w": (feature_dim, H), "enc_in_b": (H,),
        "enc_mix_w": (MIX_WIDTH * H, H), "enc_mix_b": (H,),
        "enc_out_w": (H, H), "enc_out_b": (H,),
        "ctc_w": (H, n_content + 1), "ctc_b": (n_content + 1,),
        # rows: content..., sc, eos, pad, start-of-sequence
        "dec_emb": (n_content + 4, H),
        "dec_ss_w": (H, H), "dec_cs_w": (H, H), "dec_s_b": (H,),
        "att_q_w": (H, H), "att_k_w": (H, H), "att_loc": (len(LOC_SHIFTS), 1),
        "out_s_w": (H, H), "out_c_w": (H, H), "out_b": (H,),
        "proj_w": (H, n_content + 2), "proj_b": (n_content + 2,),
    }


def init_params(n_content: int, feature_dim: int, hidden: int, subsample_factor: int,
                rng: np.random.Generator, nonlinear: bool = True) -> ModelParams:
    tensors = {}
    for name, shape in param_shapes(n_content, feature_dim, hidden).items():
        if name.endswith("_b") or name == "att_loc":
            tensors[name] = np.zeros(shape)
        elif name == "dec_emb":
            tensors[name] = rng.standard_normal(shape) * 0.5
        else:
            tensors[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return ModelParams(tensors, n_content, feature_dim, hidden, subsample_factor, nonlinear)


def zero_params(n_content: int, feature_dim: int, hidden: int, subsample_factor: int,
                nonlinear: bool = True) -> ModelParams:
    tensors = {k: np.zeros(s) for k, s in param_shapes(n_content, feature_dim, hidden).items()}
    return ModelParams(tensors, n_content, feature_dim, hidden, subsample_factor, nonlinear)


# ---------------------------------------------------------------------------
# token <-> decoder class mapping


def out_class(vocab: Vocabulary, token_id: int) -> int:
    """Decoder output column of a vocabulary id (content, sc, eos)."""
    if vocab.is_content(token_id):
        return token_id
    if token_id == vocab.sc_id:
        return vocab.n_content
    if token_id == vocab.eos_id:
        return vocab.n_content + 1
    raise ModelError(f"token {vocab.symbol(token_id)!r} is not a decoder output")


def class_token(vocab: Vocabulary, cls: int) -> int:
    if cls < vocab.n_content:
        return cls
    return vocab.sc_id if cls == vocab.n_content else vocab.eos_id


def embed_row(vocab: Vocabulary, token_id: int) -> int:
    if token_id == vocab.pad_id:
        return vocab.n_content + 2
    return out_class(vocab, token_id)


# ---------------------------------------------------------------------------
# forward passes


def sinusoid(T: int, H: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    dim = np.arange(H)[None, :]
    angle = pos / np.power(50.0, (2 * (dim // 2)) / H)
    return np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))


def subsampled_length(T: int, factor: int) -> int:
    return T // factor


def as_vars(params: ModelParams) -> dict[str, ag.Var]:
    return {k: ag.param(v) for k, v in params.tensors.items()}


def _shift(x: ag.Var, k: int) -> ag.Var:
    """Shift along axis 1 by ``k`` frames (positive = later), zero filled."""
    if k == 0:
        return x
    B, T = x.shape[:2]
    rest = x.shape[2:]
    k = max(-T, min(T, k))
    pad = ag.as_var(np.zeros((B, abs(k)) + rest))
    if k > 0:
        return ag.concat([pad, x[:, :T - k]], axis=1)
    return ag.concat([x[:, -k:], pad], axis=1)


@dataclass
class EncoderOutput:
    h: ag.Var
    ctc_grid: ag.Var
    lengths: np.ndarray
    mask: np.ndarray


def encode_batch(params: ModelParams, pv: dict[str, ag.Var], feats: Sequence[np.ndarray]) -> EncoderOutput:
    f = params.subsample_factor
    lengths_in = np.array([x.shape[0] for x in feats])
    if np.any(lengths_in < f):
        raise ModelError(f"inputs need at least {f} frames (subsample factor)")
    T_sub = lengths_in // f
    Tp = int(T_sub.max())
    T_in = Tp * f
    B = len(feats)
    x = np.zeros((B, T_in, params.feature_dim))
    for b, feat in enumerate(feats):
        n = min(feat.shape[0], T_in)
        x[b, :n] = feat[:n]
    mask = np.arange(Tp)[None, :] < T_sub[:, None]

    act = ag.tanh if params.nonlinear else (lambda v: v)
    u = ag.as_var(x) @ pv["enc_in_w"] + pv["enc_in_b"]
    pooled = ag.mean(ag.reshape(u, (B, Tp, f, params.hidden)), axis=2)
    pooled = pooled * mask[:, :, None].astype(float)
    half = MIX_WIDTH // 2
    ctx = ag.concat([_shift(pooled, k) for k in range(half, -half - 1, -1)], axis=2)
    mixed = act(ctx @ pv["enc_mix_w"] + pv["enc_mix_b"])
    h = act(mixed @ pv["enc_out_w"] + pv["enc_out_b"])
    grid = h @ pv["ctc_w"] + pv["ctc_b"]
    return EncoderOutput(h, grid, T_sub, mask)


@dataclass
class DecoderState:
    s: ag.Var
    c: ag.Var
    att: ag.Var


def _initial_state(B: int, Tp: int, H: int) -> DecoderState:
    z = ag.as_var(np.zeros((B, H)))
    return DecoderState(z, z, ag.as_var(np.zeros((B, Tp))))


def _attention_inputs(params: ModelParams, pv, enc: EncoderOutput):
    B, Tp, H = enc.h.shape
    keys = enc.h @ pv["att_k_w"] + sinusoid(Tp, H)
    shifts = np.zeros((Tp, len(LOC_SHIFTS) * Tp))
    for j, k in enumerate(LOC_SHIFTS):
        for t in range(Tp):
            if 0 <= t + k < Tp:
                shifts[t, j * Tp + t + k] = 1.0
    return keys, shifts


def _step(params: ModelParams, pv, enc: EncoderOutput, keys: ag.Var, shifts: np.ndarray,
          state: DecoderState, emb_rows: np.ndarray):
    B, Tp, H = enc.h.shape
    x = ag.take_rows(pv["dec_emb"], emb_rows)
    s = ag.tanh(x + state.s @ pv["dec_ss_w"] + state.c @ pv["dec_cs_w"] + pv["dec_s_b"])
    q = ag.reshape(s @ pv["att_q_w"], (B, H, 1))
    score = ag.reshape(keys @ q, (B, Tp)) * (1.0 / np.sqrt(H))
    shifted = ag.reshape(state.att @ shifts, (B, len(LOC_SHIFTS), Tp))
    loc = ag.reshape(ag.swapaxes(shifted, 1, 2) @ pv["att_loc"], (B, Tp))
    att = ag.softmax(score + loc, axis=-1, mask=enc.mask)
    c = ag.reshape(ag.reshape(att, (B, 1, Tp)) @ enc.h, (B, H))
    o = ag.tanh(s @ pv["out_s_w"] + c @ pv["out_c_w"] + pv["out_b"])
    logits = o @ pv["proj_w"] + pv["proj_b"]
    return logits, DecoderState(s, c, att)


def decode_batch(params: ModelParams, pv, enc: EncoderOutput, inputs: np.ndarray):
    """Teacher-forced decoder over embedding-row ids ``inputs`` (B, n).

    ``inputs[:, 0]`` is the start-of-sequence row. Returns logits (B, n, V_out)
    and per-step attention weights.
    """
    B, n = inputs.shape
    Tp, H = enc.h.shape[1:]
    keys, shifts = _attention_inputs(params, pv, enc)
    state = _initial_state(B, Tp, H)
    rows, atts = [], []
    for i in range(n):
        logits, state = _step(params, pv, enc, keys, shifts, state, inputs[:, i])
        rows.append(ag.reshape(logits, (B, 1, params.n_out)))
        atts.append(state.att.value)
    return ag.concat(rows, axis=1), np.stack(atts, axis=1)


def sos_row(params: ModelParams) -> int:
    return params.n_content + 3


def teacher_inputs(params: ModelParams, vocab: Vocabulary, targets: Sequence[Sequence[int]]):
    """Shifted-right decoder inputs and output-class targets (-1 = padding)."""
    n = max(len(t) for t in targets)
    B = len(targets)
    inputs = np.full((B, n), embed_row(vocab, vocab.pad_id))
    classes = np.full((B, n), -1)
    inputs[:, 0] = sos_row(params)
    for b, tgt in enumerate(targets):
        tgt = list(tgt)
        seen_pad = False
        for i, tok in enumerate(tgt):
            if tok == vocab.pad_id:
                seen_pad = True
                continue
            if seen_pad:
                raise ModelError("pad may only appear as a suffix of the target")
            classes[b, i] = out_class(vocab, tok)
            if i + 1 < n:
                inputs[b, i + 1] = embed_row(vocab, tok)
    return inputs, classes


@dataclass
class ForwardTrace:
    params: ModelParams
    vars: dict[str, ag.Var]
    h: ag.Var
    ctc_grid: ag.Var
    ctc_lengths: np.ndarray
    logits: ag.Var | None = None
    attention: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def encode(params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encoder states ``h`` (T' x H) and CTC head scores (T' x V_ctc)."""
    pv = as_vars(params)
    enc = encode_batch(params, pv, [np.asarray(features, dtype=np.float64)])
    return enc.h.value[0], enc.ctc_grid.value[0]


def forward(params: ModelParams, features: np.ndarray, target: Sequence[int] | None = None,
            vocab: Vocabulary | None = None) -> ForwardTrace:
    """Single-sample forward pass keeping the tape for :func:`backward`."""
    pv = as_vars(params)
    enc = encode_batch(params, pv, [np.asarray(features, dtype=np.float64)])
    trace = ForwardTrace(params, pv, enc.h, enc.ctc_grid, enc.lengths)
    if target is not None:
        inputs, _ = teacher_inputs(params, vocab, [list(target)])
        trace.logits, trace.attention = decode_batch(params, pv, enc, inputs)
    return trace


def decode_teacher_forced(params: ModelParams, h: np.ndarray, target: Sequence[int],
                          vocab: Vocabulary, return_attention: bool = False):
    """Decoder logits (n x V_out) for ``target`` given fixed encoder states."""
    target = list(target.ids if isinstance(target, TokenSequence) else target)
    if not target:
        raise ModelError("empty target")
    pv = as_vars(params)
    enc = _fixed_encoder(h)
    inputs, _ = teacher_inputs(params, vocab, [target])
    logits, att = decode_batch(params, pv, enc, inputs)
    if return_attention:
        return logits.value[0], att[0]
    return logits.value[0]


def _fixed_encoder(h) -> EncoderOutput:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    Tp = h.shape[1]
    return EncoderOutput(ag.as_var(h), None, np.full(h.shape[0], Tp), np.ones(h.shape[:2], dtype=bool))


def greedy_batch(params: ModelParams, pv, enc: EncoderOutput, vocab: Vocabulary,
                 max_len: int) -> list[list[int]]:
    """Argmax decoding; each hypothesis stops at its first <eos>."""
    B, Tp, H = enc.h.shape
    keys, shifts = _attention_inputs(params, pv, enc)
    state = _initial_state(B, Tp, H)
    rows = np.full(B, sos_row(params))
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    eos_cls = params.n_content + 1
    for _ in range(max_len):
        logits, state = _step(params, pv, enc, keys, shifts, state, rows)
        best = np.argmax(logits.value, axis=1)
        for b in range(B):
            if done[b]:
                continue
            if best[b] == eos_cls:
                done[b] = True
            else:
                out[b].append(class_token(vocab, int(best[b])))
        if done.all():
            break
        rows = best
    return out


def decode_greedy(params: ModelParams, h: np.ndarray, max_len: int, vocab: Vocabulary) -> TokenSequence:
    if max_len < 1:
        raise ModelError("max_len must be at least 1")
    pv = {k: ag.as_var(v) for k, v in params.tensors.items()}
    return TokenSequence(tuple(greedy_batch(params, pv, _fixed_encoder(h), vocab, max_len)[0]), vocab)


def recognize(params: ModelParams, feats: Sequence[np.ndarray], vocab: Vocabulary, max_len: int,
              batch_size: int = 32) -> list[TokenSequence]:
    pv = {k: ag.as_var(v) for k, v in params.tensors.items()}
    out = []
    for i in range(0, len(feats), batch_size):
        enc = encode_batch(params, pv, feats[i:i + batch_size])
        out.extend(TokenSequence(tuple(ids), vocab)
                   for ids in greedy_batch(params, pv, enc, vocab, max_len))
    return out


def backward(trace: ForwardTrace, loss_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on the traced outputs.

    ``loss_grads`` maps any of ``"h"``, ``"ctc_grid"``, ``"logits"`` to an
    array shaped like that output.
    """
    outputs = {"h": trace.h, "ctc_grid": trace.ctc_grid, "logits": trace.logits}
    parents, grads = [], []
    for name, g in loss_grads.items():
        node = outputs.get(name)
        if node is None:
            raise ModelError(f"trace has no output {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != node.shape:
            if g.shape == node.shape[1:] and node.shape[0] == 1:
                g = g[None]
            else:
                raise ModelError(f"gradient for {name} has shape {g.shape}, expected {node.shape}")
        parents.append(node)
        grads.append(g)
    return backprop(trace.vars, parents, grads)


def backprop(pv: dict[str, ag.Var], nodes: Sequence[ag.Var], grads: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    for v in pv.values():
        v.grad = None
    if nodes:
        total = ag.custom(0.0, nodes, grads)
        total.backward()
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in pv.items()}


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(path, params: ModelParams) -> None:
    meta = {
        "__n_content": params.n_content, "__feature_dim": params.feature_dim,
        "__hidden": params.hidden, "__subsample_factor": params.subsample_factor,
        "__nonlinear": int(params.nonlinear),
    }
    items = [(k, np.array([float(v)])) for k, v in meta.items()]
    items += sorted(params.tensors.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    meta = {k: int(tensors.pop(k)[0]) for k in list(tensors) if k.startswith("__")}
    params = ModelParams(tensors, meta["__n_content"], meta["__feature_dim"], meta["__hidden"],
                         meta["__subsample_factor"], bool(meta["__nonlinear"]))
    params.check()
    return params
