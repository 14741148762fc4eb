"""Scenes, feature encoders, the rule oracle and synthetic dataset generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .grammar import (
    ActionSequence,
    AndOrGraph,
    GrammarError,
    GrammarSet,
    Kind,
    ParsingGraph,
    Selection,
    extract_sequence,
    resolve,
)
from .vocab import AtomicAction, Vocab

ANNOTATED = "annotated"
AUGMENTED = "augmented"

# Stream tags keep per-sample generators of different producers apart.
DATA_STREAM = 0
AUGMENT_STREAM = 1
P_EXTRA_OBJECT = 0.4


class InfeasibleError(ValueError):
    """The scene lacks the objects every derivation of the task needs."""


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    location: tuple[float, float, float]

    def __post_init__(self):
        loc = tuple(float(v) for v in self.location)
        if len(loc) != 3 or not all(0.0 <= v <= 1.0 for v in loc):
            raise ValueError(f"location {self.location!r} outside the unit cube")
        object.__setattr__(self, "location", loc)


@dataclass(frozen=True)
class Scene:
    objects: tuple[ObjectInstance, ...] = ()
    scene_id: str = ""

    def representatives(self) -> dict[int, tuple[float, float, float]]:
        """One location per class: nearest to the origin, ties to the earlier instance."""
        best: dict[int, tuple[float, tuple[float, float, float]]] = {}
        for inst in self.objects:
            d = math.dist(inst.location, (0.0, 0.0, 0.0))
            if inst.class_id not in best or d < best[inst.class_id][0]:
                best[inst.class_id] = (d, inst.location)
        return {k: loc for k, (_, loc) in best.items()}


@dataclass(frozen=True)
class Sample:
    scene: Scene
    task: int
    sequence: ActionSequence
    selections: tuple[Selection, ...] | None = None
    provenance: str = ANNOTATED


@dataclass(frozen=True)
class RuleSet:
    """Branch preference used by the synthetic annotator.

    Feasible branches beat infeasible ones, then the smaller summed distance
    of the branch's objects to the origin wins, then the lower child index.
    """

    metric: str = "euclidean"

    def distance(self, loc: Sequence[float]) -> float:
        if self.metric == "euclidean":
            return math.sqrt(sum(v * v for v in loc))
        if self.metric == "manhattan":
            return float(sum(abs(v) for v in loc))
        raise ValueError(f"unknown metric {self.metric!r}")


# -- encoders ----------------------------------------------------------------

def scene_size(vocab: Vocab) -> int:
    return 4 * vocab.n_objects


def atomic_size(vocab: Vocab, with_end: bool = True) -> int:
    return vocab.n_actions + vocab.n_objects + (2 if with_end else 0)


def end_token(vocab: Vocab) -> AtomicAction:
    return AtomicAction(vocab.n_actions, vocab.n_objects)


def encode_scene(scene: Scene, vocab: Vocab) -> np.ndarray:
    """Per class slot ``[present, x, y, z]`` of the representative instance."""
    out = np.zeros(scene_size(vocab))
    for cls, loc in scene.representatives().items():
        if not 0 <= cls < vocab.n_objects:
            raise KeyError(f"object class {cls} outside vocab")
        out[4 * cls:4 * cls + 4] = (1.0, *loc)
    return out


def encode_task(task: int, vocab: Vocab) -> np.ndarray:
    if not 0 <= task < vocab.n_tasks:
        raise IndexError(f"task id {task} out of range [0, {vocab.n_tasks})")
    out = np.zeros(vocab.n_tasks)
    out[task] = 1.0
    return out


def encode_atomic(a: AtomicAction, vocab: Vocab, with_end: bool = True) -> np.ndarray:
    n_act = vocab.n_actions + int(with_end)
    n_obj = vocab.n_objects + int(with_end)
    if not (0 <= a.action < n_act and 0 <= a.object < n_obj):
        raise IndexError(f"atomic action {tuple(a)} out of range")
    out = np.zeros(n_act + n_obj)
    out[a.action] = 1.0
    out[n_act + a.object] = 1.0
    return out


def encode_context(scene: Scene, task: int, vocab: Vocab) -> np.ndarray:
    """Concatenated scene and task features, the input of the initial projection."""
    return np.concatenate([encode_scene(scene, vocab), encode_task(task, vocab)])


# -- rule oracle -------------------------------------------------------------

def _branch_plan(g: AndOrGraph, scene: Scene, rules: RuleSet):
    locs = scene.representatives()
    dist = {cls: rules.distance(loc) for cls, loc in locs.items()}
    choice: dict[str, int] = {}

    def plan(nid: str) -> tuple[bool, frozenset[int]]:
        node = g.nodes[nid]
        if node.kind is Kind.TERMINAL:
            return node.atomic.object in locs, frozenset({node.atomic.object})
        results = [plan(c) for c in node.children]
        if node.kind is Kind.AND:
            return all(ok for ok, _ in results), frozenset().union(*(o for _, o in results))

        def key(i):
            ok, objs = results[i]
            return (not ok, sum(dist.get(o, 0.0) for o in objs), i)

        best = min(range(len(results)), key=key)
        choice[nid] = best
        return results[best]

    feasible, _ = plan(g.root)
    return feasible, choice


def is_feasible(scene: Scene, g: AndOrGraph, rules: RuleSet = RuleSet()) -> bool:
    return _branch_plan(g, scene, rules)[0]


def oracle_selections(scene: Scene, task: int, g: AndOrGraph,
                      rules: RuleSet = RuleSet()) -> tuple[Selection, ...]:
    feasible, choice = _branch_plan(g, scene, rules)
    if not feasible:
        raise InfeasibleError(f"scene {scene.scene_id!r} cannot support task "
                              f"{task} ({g.name!r})")
    return resolve(g, lambda _, nid: choice[nid]).selections


# -- synthetic data ----------------------------------------------------------

def sample_scene(rng: np.random.Generator, g: AndOrGraph, vocab: Vocab,
                 scene_id: str = "", p_extra: float = P_EXTRA_OBJECT) -> Scene:
    """A scene holding one full random branch's objects plus random extras."""
    branch = resolve(g, lambda cur, nid: int(rng.integers(len(cur.nodes[nid].children))))
    required = {a.object for a in extract_sequence(branch)}
    extra = rng.random(vocab.n_objects) < p_extra
    locations = rng.random((vocab.n_objects, 3))
    objects = tuple(ObjectInstance(cls, tuple(locations[cls]))
                    for cls in range(vocab.n_objects) if cls in required or extra[cls])
    return Scene(objects, scene_id)


def annotate(scene: Scene, task: int, gs: GrammarSet, rules: RuleSet = RuleSet()) -> Sample:
    g = gs.task_graph(task)
    selections = oracle_selections(scene, task, g, rules)
    seq = extract_sequence(ParsingGraph(g, selections))
    return Sample(scene, task, seq, selections, ANNOTATED)


@dataclass(frozen=True)
class DatasetSpec:
    count_per_task: int
    seed: int = 7
    split: tuple[float, float] = (0.6, 0.4)
    tasks: tuple[int, ...] | None = None


def gen_dataset(gs: GrammarSet, spec: DatasetSpec,
                rules: RuleSet = RuleSet()) -> tuple[list[Sample], list[Sample]]:
    """Generate annotated (train, test) sets.

    Each sample draws from its own generator seeded by (seed, task, index), so
    output does not depend on generation order.  Train counts per task use
    cumulative rounding so the total is ``round(split[0] * total)``.
    """
    if spec.count_per_task <= 0:
        raise ValueError("count_per_task must be positive")
    if len(spec.split) != 2 or min(spec.split) < 0 or abs(sum(spec.split) - 1) > 1e-9:
        raise ValueError(f"split ratios {spec.split!r} must be two non-negatives summing to 1")
    tasks = tuple(range(gs.vocab.n_tasks)) if spec.tasks is None else tuple(spec.tasks)
    train, test = [], []
    for k, task in enumerate(tasks):
        g = gs.task_graph(task)
        before = round(spec.split[0] * spec.count_per_task * k)
        n_train = round(spec.split[0] * spec.count_per_task * (k + 1)) - before
        for i in range(spec.count_per_task):
            rng = np.random.default_rng([spec.seed, DATA_STREAM, task, i])
            scene = sample_scene(rng, g, gs.vocab, scene_id=f"s{spec.seed}-t{task}-{i}")
            (train if i < n_train else test).append(annotate(scene, task, gs, rules))
    return train, test


# -- JSON lines --------------------------------------------------------------

def sample_to_dict(s: Sample, vocab: Vocab) -> dict:
    out = {
        "scene": {
            "id": s.scene.scene_id,
            "objects": [{"class": vocab.objects[o.class_id], "loc": list(o.location)}
                        for o in s.scene.objects],
        },
        "task": vocab.tasks[s.task],
        "sequence": [list(vocab.names(a)) for a in s.sequence],
    }
    if s.selections is not None:
        out["selections"] = [[nid, idx] for nid, idx in s.selections]
    out["provenance"] = s.provenance
    return out


def sample_from_dict(d: Mapping, vocab: Vocab) -> Sample:
    scene_doc = d["scene"]
    scene = Scene(tuple(ObjectInstance(vocab.object_id(o["class"]), tuple(o["loc"]))
                        for o in scene_doc["objects"]), scene_doc.get("id", ""))
    selections = d.get("selections")
    if selections is not None:
        selections = tuple((str(nid), int(idx)) for nid, idx in selections)
    provenance = d.get("provenance", ANNOTATED)
    if provenance not in (ANNOTATED, AUGMENTED):
        raise ValueError(f"bad provenance {provenance!r}")
    return Sample(scene, vocab.task_id(d["task"]),
                  tuple(vocab.atomic(a, o) for a, o in d["sequence"]),
                  selections, provenance)


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_samples(path: str | Path, samples: Iterable[Sample], vocab: Vocab,
                  meta: Mapping | None = None) -> None:
    """Write JSON lines, plus a sidecar ``<name>.meta.json`` carrying provenance."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s, vocab)) + "\n")
    record = {"vocab": vocab.fingerprint(), **(meta or {})}
    meta_path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_samples(path: str | Path, vocab: Vocab) -> list[Sample]:
    path = Path(path)
    side = meta_path(path)
    if side.exists():
        recorded = json.loads(side.read_text()).get("vocab")
        if recorded is not None and recorded != vocab.fingerprint():
            raise ValueError(f"{path}: vocab fingerprint {recorded} does not match "
                             f"{vocab.fingerprint()}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_dict(json.loads(line), vocab))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad sample: {exc}") from None
    return out


def check_sample(s: Sample, gs: GrammarSet) -> None:
    """Replay a sample's selections; raise if they do not reproduce its sequence."""
    if s.selections is None:
        return
    replayed = extract_sequence(ParsingGraph(gs.task_graph(s.task), s.selections))
    if replayed != tuple(s.sequence):
        raise GrammarError(f"sample {s.scene.scene_id!r}: selections do not reproduce "
                           "the sequence")
