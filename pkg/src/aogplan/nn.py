"""Dense float64 recurrent machinery: LSTM cell, softmax heads, BPTT, SGD.

Both networks in this package share one shape: a linear projection of the
scene/task context gives the initial hidden state (cell state starts at
zero), an LSTM consumes one input vector per step, and one or more softmax
heads read each new hidden state.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

Params = dict[str, np.ndarray]


# -- cell ----------------------------------------------------------------------

@dataclass
class LstmParams:
    """Gate weights stacked row-wise as [input; forget; output; candidate]."""

    W: np.ndarray  # (4H, I + H), acting on [x, h]
    b: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.hidden

    def _gate(self, k):
        H = self.hidden
        return self.W[k * H:(k + 1) * H], self.b[k * H:(k + 1) * H]

    W_i = property(lambda self: self._gate(0)[0])
    W_f = property(lambda self: self._gate(1)[0])
    W_o = property(lambda self: self._gate(2)[0])
    W_g = property(lambda self: self._gate(3)[0])
    b_i = property(lambda self: self._gate(0)[1])
    b_f = property(lambda self: self._gate(1)[1])
    b_o = property(lambda self: self._gate(2)[1])
    b_g = property(lambda self: self._gate(3)[1])


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int) -> "LstmState":
        return cls(np.zeros(hidden), np.zeros(hidden))


@dataclass
class DenseHead:
    W: np.ndarray  # (out, H)
    b: np.ndarray  # (out,)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return h @ self.W.T + self.b


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _gates(p: LstmParams, x: np.ndarray, h: np.ndarray):
    H = p.hidden
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ p.W.T + p.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    return xh, i, f, o, g


def lstm_step(p: LstmParams, x: np.ndarray, s: LstmState) -> LstmState:
    """One LSTM step; ``x`` and the state may carry a leading batch axis."""
    if x.shape[-1] != p.input_size:
        raise ValueError(f"input has width {x.shape[-1]}, cell expects {p.input_size}")
    if s.h.shape[-1] != p.hidden or s.c.shape != s.h.shape:
        raise ValueError(f"state shapes {s.h.shape}/{s.c.shape} do not match hidden "
                         f"size {p.hidden}")
    _, i, f, o, g = _gates(p, x, s.h)
    c = f * s.c + i * g
    return LstmState(o * np.tanh(c), c)


# -- softmax / cross-entropy ---------------------------------------------------

def softmax(z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; masked-out (False) entries get exactly 0."""
    z = np.asarray(z, dtype=float)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} != logits shape {z.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax: every entry is masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, target: int,
                  mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. the logits."""
    if not 0 <= target < len(p):
        raise IndexError(f"target {target} out of range")
    if mask is not None and not mask[target]:
        raise ValueError(f"target {target} is masked out")
    grad = np.array(p, dtype=float)
    grad[target] -= 1.0
    return -math.log(p[target]), grad


# -- network -------------------------------------------------------------------

@dataclass
class SeqBatch:
    """Padded teacher-forced batch.

    context: (B, C); inputs: (B, T, I); step_mask: (B, T), True on real steps;
    targets[k]: (B, T) class ids for head k; allowed[k]: optional (B, T, K_k)
    boolean support of head k's softmax.
    """

    context: np.ndarray
    inputs: np.ndarray
    step_mask: np.ndarray
    targets: list[np.ndarray]
    allowed: list[np.ndarray | None]

    @property
    def size(self) -> int:
        return self.context.shape[0]


class InvariantError(AssertionError):
    pass


class Network:
    """Context projection + LSTM + softmax heads, with exact BPTT.

    Parameter names: ``W_hf`` (projection), ``W_lstm``/``b_lstm`` (stacked
    gates) and one ``(W, b)`` name pair per head.
    """

    def __init__(self, params: Params, heads: Sequence[tuple[str, str]]):
        self.params = params
        self.heads = [tuple(h) for h in heads]
        H = self.hidden
        if params["W_hf"].shape[0] != H or params["W_lstm"].shape[0] != 4 * H:
            raise ValueError("inconsistent hidden sizes")
        for w, b in self.heads:
            if params[w].shape != (params[b].shape[0], H):
                raise ValueError(f"head {w} has shape {params[w].shape}")

    @classmethod
    def create(cls, context_size: int, input_size: int, hidden: int,
               heads: Sequence[tuple[str, str, int]], seed: int) -> "Network":
        shapes = {"W_hf": (hidden, context_size),
                  "W_lstm": (4 * hidden, input_size + hidden),
                  "b_lstm": (4 * hidden,)}
        for w, b, out in heads:
            shapes[w] = (out, hidden)
            shapes[b] = (out,)
        return cls(init_params(shapes, seed), [(w, b) for w, b, _ in heads])

    @property
    def hidden(self) -> int:
        return self.params["W_hf"].shape[0]

    @property
    def context_size(self) -> int:
        return self.params["W_hf"].shape[1]

    @property
    def input_size(self) -> int:
        return self.params["W_lstm"].shape[1] - self.hidden

    @property
    def cell(self) -> LstmParams:
        return LstmParams(self.params["W_lstm"], self.params["b_lstm"])

    def head(self, k: int) -> DenseHead:
        w, b = self.heads[k]
        return DenseHead(self.params[w], self.params[b])

    def initial_state(self, context: np.ndarray) -> LstmState:
        h = context @ self.params["W_hf"].T
        return LstmState(h, np.zeros_like(h))

    def _forward(self, batch: SeqBatch, check: bool = False):
        P = self.params
        W, b = P["W_lstm"], P["b_lstm"]
        H = self.hidden
        B, T = batch.step_mask.shape
        h = batch.context @ P["W_hf"].T
        c = np.zeros_like(h)
        weight = batch.step_mask / B
        rows = np.arange(B)
        loss = 0.0
        cache = []
        for t in range(T):
            xh = np.concatenate([batch.inputs[:, t], h], axis=1)
            z = xh @ W.T + b
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H:2 * H])
            o = sigmoid(z[:, 2 * H:3 * H])
            g = np.tanh(z[:, 3 * H:])
            c_prev = c
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            if check:
                for name, gate in (("i", i), ("f", f), ("o", o)):
                    if not ((gate > 0) & (gate < 1)).all():
                        raise InvariantError(f"gate {name} left (0, 1) at step {t}")
                if not (np.abs(h) < 1).all() or not np.isfinite(c).all():
                    raise InvariantError(f"hidden state out of range at step {t}")
            probs = []
            for k, (wn, bn) in enumerate(self.heads):
                allowed = batch.allowed[k]
                mask = None
                if allowed is not None:
                    # padded steps may have an empty support; open it up, they carry no loss
                    mask = allowed[:, t] | ~batch.step_mask[:, t, None]
                p = softmax(h @ P[wn].T + P[bn], mask)
                tgt = np.where(batch.step_mask[:, t], batch.targets[k][:, t], 0)
                picked = p[rows, tgt]
                live = weight[:, t] > 0
                loss -= float(np.sum(np.log(picked[live]) * weight[live, t]))
                probs.append((p, tgt))
            cache.append((xh, i, f, o, g, c_prev, tc, h, probs))
        return loss, cache

    def loss(self, batch: SeqBatch) -> float:
        """Summed per-step cross-entropy over all heads, averaged over the batch."""
        return self._forward(batch)[0]

    def loss_and_grads(self, batch: SeqBatch, check: bool = False) -> tuple[float, Params]:
        loss, cache = self._forward(batch, check)
        P = self.params
        W = P["W_lstm"]
        H, I = self.hidden, self.input_size
        B, T = batch.step_mask.shape
        weight = batch.step_mask / B
        rows = np.arange(B)
        grads = {name: np.zeros_like(v) for name, v in P.items()}
        dW, db = grads["W_lstm"], grads["b_lstm"]
        W_h = W[:, I:]
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            xh, i, f, o, g, c_prev, tc, h, probs = cache[t]
            dh = dh_next.copy()
            for (wn, bn), (p, tgt) in zip(self.heads, probs):
                dlogit = p.copy()
                dlogit[rows, tgt] -= 1.0
                dlogit *= weight[:, t, None]
                grads[wn] += dlogit.T @ h
                grads[bn] += dlogit.sum(axis=0)
                dh += dlogit @ P[wn]
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                do * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ], axis=1)
            dW += dz.T @ xh
            db += dz.sum(axis=0)
            dh_next = dz @ W_h
            dc_next = dc * f
        grads["W_hf"] += dh_next.T @ batch.context
        return loss, grads


def finite_difference_grads(loss_fn: Callable[[], float], params: Params,
                            eps: float = 1e-5) -> Params:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``params`` (in place)."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference scaled by the larger max-abs of the two tensors."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    return 0.0 if scale == 0 else float(diff / scale)


# -- initialisation --------------------------------------------------------------

def init_params(shapes: Mapping[str, tuple[int, ...]], seed: int) -> Params:
    """Glorot-uniform matrices, zero biases, forget-gate bias 1.

    ``W_lstm`` is treated as four stacked (H, I+H) gate matrices, each with
    its own fan-in/fan-out bound.
    """
    rng = np.random.default_rng(seed)
    out: Params = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            arr = np.zeros(shape)
            if name == "b_lstm":
                H = shape[0] // 4
                arr[H:2 * H] = 1.0
        elif name == "W_lstm":
            H = shape[0] // 4
            bound = math.sqrt(6.0 / (shape[1] + H))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        out[name] = arr
    return out


# -- optimiser -------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 40
    velocity: Params = field(default_factory=dict)


def sgd_momentum_step(params: Params, grads: Mapping[str, np.ndarray],
                      opt: OptimizerState) -> tuple[Params, OptimizerState]:
    """v <- momentum * v - lr * (g + weight_decay * theta); theta <- theta + v (in place)."""
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter has {theta.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(theta)
        v *= opt.momentum
        v -= opt.lr * (g + opt.weight_decay * theta)
        theta += v
    return params, opt


def clip_global_norm(grads: Params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -- checkpoints -----------------------------------------------------------------
#
# Layout: MAGIC, u64 little-endian header length, UTF-8 JSON header, then every
# parameter as little-endian float64 in header order, row-major.  The header
# records names, shapes, caller metadata and a sha256 of the payload.

MAGIC = b"AOGPLAN-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def save_params(path: str | Path, params: Params, meta: Mapping) -> None:
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    header = {
        "params": [[name, list(v.shape)] for name, v in params.items()],
        "meta": dict(meta),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_params(path: str | Path) -> tuple[Params, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    payload = data[pos + n:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    params: Params = {}
    offset = 0
    for name, shape in header["params"]:
        count = math.prod(shape)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        params[name] = arr.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload size does not match header")
    return params, header["meta"]


# -- training loop ---------------------------------------------------------------

@dataclass
class NetConfig:
    hidden: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 40
    epochs: int = 100
    clip_norm: float | None = None


def train_epochs(net: Network, n_samples: int, make_batch: Callable[[np.ndarray], SeqBatch],
                 cfg: NetConfig, seed: int,
                 on_epoch: Callable[[int, float], bool | None] | None = None) -> int:
    """Mini-batch SGD with momentum over shuffled samples.

    ``on_epoch(epoch, mean_loss)`` may return True to stop early.  Returns the
    number of optimiser steps taken.
    """
    rng = np.random.default_rng(seed)
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size)
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = net.loss_and_grads(make_batch(idx))
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            sgd_momentum_step(net.params, grads, opt)
            total += loss * len(idx)
            steps += 1
        if on_epoch is not None and on_epoch(epoch, total / n_samples):
            break
    return steps
