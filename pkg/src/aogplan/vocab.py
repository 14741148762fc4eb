"""Vocabularies of primitive actions, object classes and task names."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

DEFAULT_ACTIONS = (
    "open", "grasp", "put into", "move to", "put under", "pour into", "wash",
)
DEFAULT_OBJECTS = (
    "bowl", "cup", "pot", "water-dispenser", "tea-box",
    "ramen-cup", "ramen-bag", "tap", "basin", "apple",
)
DEFAULT_TASKS = (
    "make ramen",
    "make ramen in the ramen cup",
    "make ramen in the ramen bag",
    "pour water",
    "pour water from the pot",
    "pour water with the cup",
    "pour water from water dispenser",
    "make tea",
    "make tea with the cup",
    "make tea using water from the pot",
    "wash apple",
    "make tea using water from the water dispenser",
    "pour water with the bowl",
)


class AtomicAction(NamedTuple):
    """A (primitive action id, object class id) pair."""

    action: int
    object: int


@dataclass(frozen=True)
class Vocab:
    actions: tuple[str, ...] = DEFAULT_ACTIONS
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    tasks: tuple[str, ...] = DEFAULT_TASKS

    def __post_init__(self):
        for field_name in ("actions", "objects", "tasks"):
            names = tuple(getattr(self, field_name))
            object.__setattr__(self, field_name, names)
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate names in vocab.{field_name}")

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def action_id(self, name: str) -> int:
        try:
            return self.actions.index(name)
        except ValueError:
            raise KeyError(f"unknown action {name!r}") from None

    def object_id(self, name: str) -> int:
        try:
            return self.objects.index(name)
        except ValueError:
            raise KeyError(f"unknown object {name!r}") from None

    def task_id(self, name: str) -> int:
        try:
            return self.tasks.index(name)
        except ValueError:
            raise KeyError(f"unknown task {name!r}") from None

    def atomic(self, action: str, obj: str) -> AtomicAction:
        return AtomicAction(self.action_id(action), self.object_id(obj))

    def names(self, a: AtomicAction) -> tuple[str, str]:
        return self.actions[a.action], self.objects[a.object]

    def format_sequence(self, seq: Sequence[AtomicAction]) -> str:
        return ", ".join("({}, {})".format(*self.names(a)) for a in seq)

    def fingerprint(self) -> str:
        blob = json.dumps([self.actions, self.objects, self.tasks])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
