"""Action-LSTM: autoregressive (action, object) decoder conditioned on scene and task."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .grammar import ActionSequence
from .nn import (
    CheckpointError,
    NetConfig,
    Network,
    SeqBatch,
    load_params,
    lstm_step,
    save_params,
    softmax,
    train_epochs,
)
from .selector import TrainLog
from .vocab import AtomicAction, Vocab
from .world import (
    Sample,
    Scene,
    atomic_size,
    encode_atomic,
    encode_context,
    end_token,
    scene_size,
)

log = logging.getLogger(__name__)

ACTION_HEAD = ("W_ah", "b_a")
OBJECT_HEAD = ("W_oh", "b_o")
DEFAULT_MAX_LEN = 12


@dataclass
class DecoderModel:
    net: Network
    vocab: Vocab
    max_len: int = DEFAULT_MAX_LEN

    @classmethod
    def create(cls, vocab: Vocab, hidden: int = 64, max_len: int = DEFAULT_MAX_LEN,
               seed: int = 0) -> "DecoderModel":
        net = Network.create(scene_size(vocab) + vocab.n_tasks, atomic_size(vocab), hidden,
                             [(*ACTION_HEAD, vocab.n_actions + 1),
                              (*OBJECT_HEAD, vocab.n_objects + 1)], seed)
        return cls(net, vocab, max_len)

    @property
    def end(self) -> AtomicAction:
        return end_token(self.vocab)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps([self.vocab.fingerprint(), self.max_len, self.net.hidden])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def save(self, path, meta: Mapping | None = None) -> None:
        save_params(path, self.net.params, {
            "kind": "decoder", "fingerprint": self.fingerprint,
            "vocab": {"actions": self.vocab.actions, "objects": self.vocab.objects,
                      "tasks": self.vocab.tasks},
            "max_len": self.max_len, **(meta or {}),
        })

    @classmethod
    def load(cls, path, vocab: Vocab | None = None) -> "DecoderModel":
        params, meta = load_params(path)
        if meta.get("kind") != "decoder":
            raise CheckpointError(f"{path}: not a decoder checkpoint")
        v = meta["vocab"]
        stored = Vocab(tuple(v["actions"]), tuple(v["objects"]), tuple(v["tasks"]))
        if vocab is not None and vocab.fingerprint() != stored.fingerprint():
            raise CheckpointError(f"{path}: vocab fingerprint {stored.fingerprint()} does "
                                  f"not match {vocab.fingerprint()}")
        model = cls(Network(params, [ACTION_HEAD, OBJECT_HEAD]), stored, int(meta["max_len"]))
        if model.fingerprint != meta["fingerprint"]:
            raise CheckpointError(f"{path}: model fingerprint mismatch")
        return model


def _check_sequence(m: DecoderModel, seq: Sequence[AtomicAction]) -> None:
    if len(seq) > m.max_len:
        raise ValueError(f"sequence of length {len(seq)} exceeds max_len {m.max_len}")
    # the object head may emit END on a non-END step; decode keeps such pairs
    for a in seq:
        if not (0 <= a.action < m.vocab.n_actions and 0 <= a.object <= m.vocab.n_objects):
            raise ValueError(f"atomic action {tuple(a)} outside the vocab")


def make_batch(m: DecoderModel, items: Sequence[tuple[Scene, int, Sequence[AtomicAction]]]
               ) -> SeqBatch:
    """Teacher-forced batch: start marker, then each emitted pair; END closes every sequence."""
    B = len(items)
    T = max(len(seq) for _, _, seq in items) + 1
    width = atomic_size(m.vocab)
    inputs = np.zeros((B, T, width))
    mask = np.zeros((B, T), dtype=bool)
    act = np.zeros((B, T), dtype=int)
    obj = np.zeros((B, T), dtype=int)
    end = m.end
    for r, (_, _, seq) in enumerate(items):
        _check_sequence(m, seq)
        steps = list(seq) + [end]
        for t, a in enumerate(steps):
            if t > 0:
                inputs[r, t] = encode_atomic(steps[t - 1], m.vocab)
            act[r, t], obj[r, t] = a.action, a.object
            mask[r, t] = True
    context = np.stack([encode_context(scene, task, m.vocab) for scene, task, _ in items])
    return SeqBatch(context, inputs, mask, [act, obj], [None, None])


def decode_batch(m: DecoderModel, pairs: Sequence[tuple[Scene, int]]) -> list[ActionSequence]:
    """Greedy decoding; stops at the action head's END or after max_len pairs."""
    if not pairs:
        return []
    context = np.stack([encode_context(scene, task, m.vocab) for scene, task in pairs])
    state = m.net.initial_state(context)
    cell, act_head, obj_head = m.net.cell, m.net.head(0), m.net.head(1)
    x = np.zeros((len(pairs), atomic_size(m.vocab)))
    out: list[list[AtomicAction]] = [[] for _ in pairs]
    live = np.ones(len(pairs), dtype=bool)
    end_action = m.vocab.n_actions
    for _ in range(m.max_len):
        state = lstm_step(cell, x, state)
        a = act_head(state.h).argmax(axis=1)
        o = obj_head(state.h).argmax(axis=1)
        x = np.zeros_like(x)
        for r in np.flatnonzero(live):
            if a[r] == end_action:
                live[r] = False
                continue
            pair = AtomicAction(int(a[r]), int(o[r]))
            out[r].append(pair)
            x[r] = encode_atomic(pair, m.vocab)
        if not live.any():
            break
    return [tuple(seq) for seq in out]


def decode(m: DecoderModel, scene: Scene, task: int) -> ActionSequence:
    return decode_batch(m, [(scene, task)])[0]


def score(m: DecoderModel, scene: Scene, task: int, seq: Sequence[AtomicAction]) -> float:
    """Teacher-forced log-probability of ``seq`` followed by END."""
    return -m.net.loss(make_batch(m, [(scene, task, tuple(seq))]))


def step_probabilities(m: DecoderModel, scene: Scene, task: int,
                       seq: Sequence[AtomicAction]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-step (p(action), p(object)) under teacher forcing, END step included."""
    state = m.net.initial_state(encode_context(scene, task, m.vocab))
    x = np.zeros(atomic_size(m.vocab))
    out = []
    for a in list(seq) + [m.end]:
        state = lstm_step(m.net.cell, x, state)
        out.append((softmax(m.net.head(0)(state.h)), softmax(m.net.head(1)(state.h))))
        x = encode_atomic(a, m.vocab)
    return out


def token_accuracy(m: DecoderModel, samples: Sequence[Sample], batch_size: int = 256) -> float:
    """Teacher-forced fraction of steps (END included) where both heads are right."""
    hits = total = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_batch(m, [(s.scene, s.task, s.sequence) for s in chunk])
        for pa, po, ta, to, live in _teacher_forced_argmax(m, batch):
            hits += int(((pa == ta) & (po == to) & live).sum())
            total += int(live.sum())
    return hits / total if total else 1.0


def _teacher_forced_argmax(m: DecoderModel, batch: SeqBatch):
    state = m.net.initial_state(batch.context)
    for t in range(batch.inputs.shape[1]):
        state = lstm_step(m.net.cell, batch.inputs[:, t], state)
        yield (m.net.head(0)(state.h).argmax(axis=1), m.net.head(1)(state.h).argmax(axis=1),
               batch.targets[0][:, t], batch.targets[1][:, t], batch.step_mask[:, t])


def train_decoder(samples: Sequence[Sample], vocab: Vocab, cfg: NetConfig, seed: int = 0,
                  max_len: int = DEFAULT_MAX_LEN, log_accuracy: bool = False,
                  stop_at_accuracy: float | None = None
                  ) -> tuple[DecoderModel, TrainLog, int]:
    """Teacher-forced NLL training over annotated and augmented samples alike.

    Returns (model, log, optimiser steps).  ``stop_at_accuracy`` ends training
    once the teacher-forced token accuracy reaches it (implies logging it).
    """
    if not samples:
        raise ValueError("no training samples")
    m = DecoderModel.create(vocab, cfg.hidden, max_len, seed)
    items = [(s.scene, s.task, s.sequence) for s in samples]
    for s in samples:
        _check_sequence(m, s.sequence)
    history = TrainLog()

    def on_epoch(epoch: int, mean_loss: float):
        entry = {"epoch": epoch, "loss": mean_loss}
        if log_accuracy or stop_at_accuracy is not None:
            entry["token_acc"] = token_accuracy(m, samples)
        history.add(**entry)
        return stop_at_accuracy is not None and entry["token_acc"] >= stop_at_accuracy

    steps = train_epochs(m.net, len(items), lambda idx: make_batch(m, [items[i] for i in idx]),
                         cfg, seed, on_epoch)
    return m, history, steps
