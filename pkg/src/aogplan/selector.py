"""AOG-LSTM: predicts or-node branch choices and mass-produces augmented samples.

The scene and task enter only through the initial hidden state.  At every
step the network reads the adjacency matrix of the graph pruned so far and
scores the children of the next DFS or-node with a fixed-width softmax
head, masked down to that node's arity.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grammar import (
    AndOrGraph,
    GrammarError,
    GrammarSet,
    ParsingGraph,
    encode_adjacency,
    extract_sequence,
    next_or_node,
    pruned_graphs,
    resolve,
)
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
from .vocab import Vocab
from .world import (
    AUGMENT_STREAM,
    AUGMENTED,
    RuleSet,
    Sample,
    Scene,
    encode_context,
    is_feasible,
    sample_scene,
    scene_size,
)

log = logging.getLogger(__name__)

HEAD = ("W_hp", "b_p")
MAX_RESAMPLE = 100


@dataclass
class SelectorModel:
    net: Network
    vocab: Vocab
    node_index: dict[str, int]
    n_max: int
    b_max: int

    @classmethod
    def create(cls, gs: GrammarSet, hidden: int = 64, n_max: int = 64, b_max: int = 4,
               seed: int = 0) -> "SelectorModel":
        if len(gs.node_index) > n_max:
            raise ValueError(f"grammar set has {len(gs.node_index)} node ids, n_max is {n_max}")
        if gs.max_branching > b_max:
            raise ValueError(f"or-node branching {gs.max_branching} exceeds b_max {b_max}")
        net = Network.create(scene_size(gs.vocab) + gs.vocab.n_tasks, n_max * n_max, hidden,
                             [(*HEAD, b_max)], seed)
        return cls(net, gs.vocab, dict(gs.node_index), n_max, b_max)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps([self.vocab.fingerprint(), sorted(self.node_index.items()),
                           self.n_max, self.b_max, self.net.hidden])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def features(self, g: AndOrGraph) -> np.ndarray:
        return encode_adjacency(g, self.node_index, self.n_max)

    def branch_mask(self, g: AndOrGraph, or_node: str) -> np.ndarray:
        arity = len(g.nodes[or_node].children)
        if arity > self.b_max:
            raise GrammarError(f"{g.name}: or-node {or_node!r} has {arity} children, "
                               f"b_max is {self.b_max}")
        return np.arange(self.b_max) < arity

    # -- persistence --------------------------------------------------------------

    def save(self, path, meta: Mapping | None = None) -> None:
        save_params(path, self.net.params, {
            "kind": "selector", "fingerprint": self.fingerprint,
            "vocab": {"actions": self.vocab.actions, "objects": self.vocab.objects,
                      "tasks": self.vocab.tasks},
            "node_index": self.node_index, "n_max": self.n_max, "b_max": self.b_max,
            **(meta or {}),
        })

    @classmethod
    def load(cls, path, vocab: Vocab | None = None) -> "SelectorModel":
        params, meta = load_params(path)
        if meta.get("kind") != "selector":
            raise CheckpointError(f"{path}: not a selector checkpoint")
        v = meta["vocab"]
        stored = Vocab(tuple(v["actions"]), tuple(v["objects"]), tuple(v["tasks"]))
        if vocab is not None and vocab.fingerprint() != stored.fingerprint():
            raise CheckpointError(f"{path}: vocab fingerprint {stored.fingerprint()} does "
                                  f"not match {vocab.fingerprint()}")
        model = cls(Network(params, [HEAD]), stored, dict(meta["node_index"]),
                    int(meta["n_max"]), int(meta["b_max"]))
        if model.fingerprint != meta["fingerprint"]:
            raise CheckpointError(f"{path}: model fingerprint mismatch")
        return model


def select_branches(m: SelectorModel, scene: Scene, task: int, g: AndOrGraph,
                    mode: str = "greedy", rng: np.random.Generator | None = None) -> ParsingGraph:
    """Resolve every reachable or-node of ``g`` with the network.

    ``mode`` is ``"greedy"`` (argmax) or ``"sample"`` (draw from the masked
    distribution using ``rng``).
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    state = m.net.initial_state(encode_context(scene, task, m.vocab))
    cell, head = m.net.cell, m.net.head(0)

    def choose(current: AndOrGraph, or_node: str) -> int:
        nonlocal state
        mask = m.branch_mask(current, or_node)
        state = lstm_step(cell, m.features(current), state)
        p = softmax(head(state.h), mask)
        if mode == "greedy":
            return int(np.argmax(p))
        return int(rng.choice(m.b_max, p=p))

    return resolve(g, choose)


# -- training -----------------------------------------------------------------------

@dataclass
class _Encoded:
    context: np.ndarray
    active: list[np.ndarray]  # nonzero adjacency positions per step
    targets: list[int]
    arity: list[int]


def _encode_sample(m: SelectorModel, s: Sample, gs: GrammarSet) -> _Encoded:
    if s.selections is None:
        raise ValueError(f"sample {s.scene.scene_id!r} has no or-node selections")
    g = gs.task_graph(s.task)
    graphs = pruned_graphs(g, s.selections)
    pending = next_or_node(graphs[-1], (nid for nid, _ in s.selections))
    if pending is not None:
        raise GrammarError(f"sample {s.scene.scene_id!r}: or-node {pending!r} has no selection")
    active, arity = [], []
    for cur, (nid, _) in zip(graphs, s.selections):
        active.append(np.flatnonzero(m.features(cur)))
        arity.append(int(m.branch_mask(cur, nid).sum()))
    return _Encoded(encode_context(s.scene, s.task, m.vocab), active,
                    [idx for _, idx in s.selections], arity)


def _make_batch(m: SelectorModel, items: Sequence[_Encoded]) -> SeqBatch:
    B = len(items)
    T = max(1, max(len(e.targets) for e in items))
    inputs = np.zeros((B, T, m.n_max * m.n_max))
    mask = np.zeros((B, T), dtype=bool)
    targets = np.zeros((B, T), dtype=int)
    allowed = np.zeros((B, T, m.b_max), dtype=bool)
    for r, e in enumerate(items):
        for t, (act, tgt, ar) in enumerate(zip(e.active, e.targets, e.arity)):
            inputs[r, t, act] = 1.0
            mask[r, t] = True
            targets[r, t] = tgt
            allowed[r, t, :ar] = True
    context = np.stack([e.context for e in items])
    return SeqBatch(context, inputs, mask, [targets], [allowed])


def _step_predictions(m: SelectorModel, items: Sequence[_Encoded], batch_size: int = 256):
    """Teacher-forced argmax per step; returns (correct, total, mean loss)."""
    correct = total = 0
    loss = 0.0
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        batch = _make_batch(m, chunk)
        loss += m.net.loss(batch) * len(chunk)
        state = m.net.initial_state(batch.context)
        for t in range(batch.inputs.shape[1]):
            state = lstm_step(m.net.cell, batch.inputs[:, t], state)
            p = softmax(m.net.head(0)(state.h), batch.allowed[0][:, t] | ~batch.step_mask[:, t, None])
            hit = (p.argmax(axis=1) == batch.targets[0][:, t]) & batch.step_mask[:, t]
            correct += int(hit.sum())
            total += int(batch.step_mask[:, t].sum())
    return correct, total, loss / max(1, len(items))


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)

    def add(self, **entry):
        self.entries.append(entry)
        log.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in entry.items()))


def train_selector(samples: Sequence[Sample], gs: GrammarSet, cfg: NetConfig,
                   seed: int = 0, n_max: int = 64, b_max: int = 4,
                   validation: Sequence[Sample] | None = None,
                   val_fraction: float = 0.1) -> tuple[SelectorModel, TrainLog]:
    """Teacher-forced training on annotated or-node selections.

    Returns the epoch with the best validation selection accuracy (ties go to
    the lower validation loss, then the earlier epoch).  Without an explicit
    ``validation`` set, a ``val_fraction`` slice of ``samples`` is held back;
    with ``val_fraction=0`` training accuracy drives the choice.
    """
    m = SelectorModel.create(gs, cfg.hidden, n_max, b_max, seed)
    encoded = [_encode_sample(m, s, gs) for s in samples]
    if not encoded:
        raise ValueError("no training samples")
    if validation is not None:
        val = [_encode_sample(m, s, gs) for s in validation]
        train = encoded
    elif val_fraction > 0:
        order = np.random.default_rng([seed, 1]).permutation(len(encoded))
        n_val = max(1, int(round(val_fraction * len(encoded))))
        val = [encoded[i] for i in sorted(order[:n_val])]
        train = [encoded[i] for i in sorted(order[n_val:])]
    else:
        val, train = encoded, encoded

    history = TrainLog()
    best = {"key": None, "params": None}

    def on_epoch(epoch: int, mean_loss: float):
        vc, vt, vloss = _step_predictions(m, val)
        tc, tt, _ = _step_predictions(m, train)
        val_acc = vc / vt if vt else 1.0
        history.add(epoch=epoch, loss=mean_loss, train_acc=tc / tt if tt else 1.0,
                    val_acc=val_acc, val_loss=vloss)
        key = (val_acc, -vloss)
        if best["key"] is None or key > best["key"]:
            best["key"] = key
            best["params"] = copy.deepcopy(m.net.params)

    train_epochs(m.net, len(train), lambda idx: _make_batch(m, [train[i] for i in idx]),
                 cfg, seed, on_epoch)
    if best["params"] is not None:
        m.net.params = best["params"]
    return m, history


# -- augmentation -------------------------------------------------------------------

def generate_augmented(m: SelectorModel, gs: GrammarSet, tasks: Sequence[int], count: int,
                       seed: int, scenes: Sequence[Scene] | None = None,
                       rules: RuleSet = RuleSet()) -> list[Sample]:
    """Draw (scene, task) pairs and label them with the selector's greedy choices.

    Scenes are fresh synthetic scenes for the drawn task unless ``scenes`` is
    given.  Pairs the scene cannot support are redrawn up to 100 times, then
    skipped with a warning.
    """
    if not tasks:
        raise ValueError("no tasks to augment")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, AUGMENT_STREAM, i])
        for _ in range(MAX_RESAMPLE):
            task = int(tasks[rng.integers(len(tasks))])
            g = gs.task_graph(task)
            if scenes is None:
                scene = sample_scene(rng, g, gs.vocab, scene_id=f"aug{seed}-{i}")
            else:
                scene = scenes[int(rng.integers(len(scenes)))]
            if is_feasible(scene, g, rules):
                break
        else:
            log.warning("augment draw %d: no feasible (scene, task) pair after %d tries",
                        i, MAX_RESAMPLE)
            continue
        pg = select_branches(m, scene, task, g)
        out.append(Sample(scene, task, extract_sequence(pg), pg.selections, AUGMENTED))
    return out


def selection_accuracy(m: SelectorModel, samples: Sequence[Sample], gs: GrammarSet) -> dict:
    """Free-running greedy selections against annotated ones.

    An or-node counts as correct when the prediction agrees with the
    annotation at that position and at every earlier one.
    """
    correct = total = exact = 0
    for s in samples:
        pred = select_branches(m, s.scene, s.task, gs.task_graph(s.task)).selections
        agree = True
        for k, truth in enumerate(s.selections):
            agree = agree and k < len(pred) and pred[k] == tuple(truth)
            correct += agree
        total += len(s.selections)
        exact += tuple(pred) == tuple(map(tuple, s.selections))
    return {"or_node_accuracy": correct / total if total else 1.0,
            "scene_accuracy": exact / len(samples) if samples else 1.0,
            "or_nodes": total, "scenes": len(samples)}
