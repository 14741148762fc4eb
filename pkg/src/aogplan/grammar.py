"""Temporal And-Or graphs: loading, validation, traversal, pruning, enumeration.

A grammar is a tree.  And-nodes expand their children in chronological
(declaration) order, or-nodes pick exactly one child, terminals emit one
atomic action.  Resolving every reachable or-node yields a parsing graph,
whose terminals read left to right form an action sequence.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .vocab import AtomicAction, Vocab

ActionSequence = tuple[AtomicAction, ...]
Selection = tuple[str, int]

PRIOR_TOLERANCE = 1e-9


class GrammarError(ValueError):
    """Malformed or invalid grammar input."""


class LanguageTooLarge(GrammarError):
    pass


class Kind(str, enum.Enum):
    AND = "and"
    OR = "or"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class Node:
    id: str
    kind: Kind
    label: str = ""
    children: tuple[str, ...] = ()
    prior: tuple[float, ...] | None = None
    atomic: AtomicAction | None = None


@dataclass(frozen=True)
class AndOrGraph:
    name: str
    root: str
    nodes: Mapping[str, Node]

    def __post_init__(self):
        _validate(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise GrammarError(f"{self.name}: unknown node {node_id!r}") from None

    def edges(self) -> list[tuple[str, str]]:
        return [(n.id, c) for n in self.nodes.values() for c in n.children]


@dataclass(frozen=True)
class GrammarSet:
    vocab: Vocab
    tasks: Mapping[str, AndOrGraph]
    node_index: Mapping[str, int] = field(default_factory=dict)

    def __getitem__(self, task: str) -> AndOrGraph:
        try:
            return self.tasks[task]
        except KeyError:
            raise GrammarError(f"unknown task {task!r}") from None

    def task_graph(self, task_id: int) -> AndOrGraph:
        return self.tasks[self.vocab.tasks[task_id]]

    @cached_property
    def longest_derivation(self) -> int:
        return max(max_sequence_length(g) for g in self.tasks.values())

    @cached_property
    def max_branching(self) -> int:
        widths = [len(n.children) for g in self.tasks.values()
                  for n in g.nodes.values() if n.kind is Kind.OR]
        return max(widths, default=1)


def _validate(g: AndOrGraph) -> None:
    if not g.nodes:
        raise GrammarError(f"{g.name}: empty grammar")
    if g.root not in g.nodes:
        raise GrammarError(f"{g.name}: root {g.root!r} is not a declared node")
    parent: dict[str, str] = {}
    for node in g.nodes.values():
        where = f"{g.name}: node {node.id!r}"
        if node.kind is Kind.TERMINAL:
            if node.children:
                raise GrammarError(f"{where}: terminal node has children")
            if node.atomic is None:
                raise GrammarError(f"{where}: terminal node needs an atomic action")
        else:
            if not node.children:
                raise GrammarError(f"{where}: {node.kind.value}-node has no children")
            if node.atomic is not None:
                raise GrammarError(f"{where}: only terminals carry an atomic action")
        if node.prior is not None:
            if node.kind is not Kind.OR:
                raise GrammarError(f"{where}: prior on a non-or node")
            if len(node.prior) != len(node.children):
                raise GrammarError(f"{where}: prior has {len(node.prior)} weights "
                                   f"for {len(node.children)} children")
            if any(not np.isfinite(w) or w < 0 for w in node.prior):
                raise GrammarError(f"{where}: prior weights must be finite and >= 0")
            if abs(sum(node.prior) - 1.0) > PRIOR_TOLERANCE:
                raise GrammarError(f"{where}: prior sums to {sum(node.prior)!r}, not 1")
        for child in node.children:
            if child not in g.nodes:
                raise GrammarError(f"{where}: unknown child {child!r}")
            if child in parent:
                raise GrammarError(f"{g.name}: node {child!r} has two parents "
                                   f"({parent[child]!r}, {node.id!r})")
            parent[child] = node.id
    if g.root in parent:
        raise GrammarError(f"{g.name}: cycle through root {g.root!r}")
    reached = _subtree(g, g.root)
    for node_id in g.nodes:
        if node_id not in reached:
            raise GrammarError(f"{g.name}: node {node_id!r} is unreachable from the "
                               "root (orphan or cycle)")


def _subtree(g: AndOrGraph, start: str) -> list[str]:
    out, stack = [], [start]
    while stack:
        node_id = stack.pop()
        out.append(node_id)
        stack.extend(reversed(g.nodes[node_id].children))
    return out


# -- file format -------------------------------------------------------------

def _parse_node(task: str, node_id: str, spec: Mapping, vocab: Vocab) -> Node:
    where = f"{task}: node {node_id!r}"
    if not isinstance(spec, Mapping):
        raise GrammarError(f"{where}: expected an object")
    try:
        kind = Kind(spec.get("kind"))
    except ValueError:
        raise GrammarError(f"{where}: bad kind {spec.get('kind')!r}") from None
    children = spec.get("children", [])
    if not isinstance(children, list) or not all(isinstance(c, str) for c in children):
        raise GrammarError(f"{where}: children must be a list of node ids")
    prior = spec.get("prior")
    if prior is not None:
        if not isinstance(prior, list) or not all(
                isinstance(w, (int, float)) and not isinstance(w, bool) for w in prior):
            raise GrammarError(f"{where}: prior must be a list of numbers")
        prior = tuple(float(w) for w in prior)
    atomic = None
    if "action" in spec or "object" in spec:
        try:
            atomic = vocab.atomic(spec["action"], spec["object"])
        except KeyError as exc:
            raise GrammarError(f"{where}: {exc.args[0]}") from None
    return Node(id=node_id, kind=kind, label=str(spec.get("label", node_id)),
                children=tuple(children), prior=prior, atomic=atomic)


def parse_grammar_set(doc: Mapping) -> GrammarSet:
    if not isinstance(doc, Mapping) or "vocab" not in doc or "tasks" not in doc:
        raise GrammarError("grammar set needs top-level 'vocab' and 'tasks'")
    v = doc["vocab"]
    tasks_doc = doc["tasks"]
    if not isinstance(tasks_doc, list) or not tasks_doc:
        raise GrammarError("'tasks' must be a non-empty list")
    names = [t.get("name") for t in tasks_doc]
    if not all(isinstance(n, str) for n in names):
        raise GrammarError("every task needs a string 'name'")
    try:
        vocab = Vocab(tuple(v["actions"]), tuple(v["objects"]), tuple(names))
    except (KeyError, TypeError, ValueError) as exc:
        raise GrammarError(f"bad vocab: {exc}") from None
    tasks: dict[str, AndOrGraph] = {}
    index: dict[str, int] = {}
    for t in tasks_doc:
        name = t["name"]
        nodes_doc = t.get("nodes")
        if not isinstance(nodes_doc, Mapping) or not nodes_doc:
            raise GrammarError(f"{name}: empty grammar")
        nodes = {nid: _parse_node(name, nid, spec, vocab) for nid, spec in nodes_doc.items()}
        tasks[name] = AndOrGraph(name=name, root=t.get("root"), nodes=nodes)
        for nid in nodes:
            index.setdefault(nid, len(index))
    return GrammarSet(vocab=vocab, tasks=tasks, node_index=index)


def load_grammar_set(text: str) -> GrammarSet:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GrammarError(f"parse error at line {exc.lineno}, column {exc.colno}: "
                           f"{exc.msg}") from None
    return parse_grammar_set(doc)


def load_grammar(text: str, task: str | None = None) -> AndOrGraph:
    """Load one task graph from grammar-set text (the only task if ``task`` is None)."""
    gs = load_grammar_set(text)
    if task is None:
        if len(gs.tasks) != 1:
            raise GrammarError(f"file holds {len(gs.tasks)} tasks; name one")
        return next(iter(gs.tasks.values()))
    return gs[task]


def dump_grammar_set(gs: GrammarSet) -> str:
    v = gs.vocab
    tasks = []
    for g in gs.tasks.values():
        nodes = {}
        for n in g.nodes.values():
            entry: dict = {"kind": n.kind.value}
            if n.label != n.id:
                entry["label"] = n.label
            if n.children:
                entry["children"] = list(n.children)
            if n.prior is not None:
                entry["prior"] = list(n.prior)
            if n.atomic is not None:
                entry["action"], entry["object"] = v.names(n.atomic)
            nodes[n.id] = entry
        tasks.append({"name": g.name, "root": g.root, "nodes": nodes})
    doc = {"vocab": {"actions": list(v.actions), "objects": list(v.objects)}, "tasks": tasks}
    return json.dumps(doc, indent=2)


# -- traversal ---------------------------------------------------------------

def or_nodes_dfs(g: AndOrGraph) -> list[str]:
    """Pre-order DFS over or-nodes, children left to right."""
    return [nid for nid in _subtree(g, g.root) if g.nodes[nid].kind is Kind.OR]


def prune(g: AndOrGraph, or_node: str, child_index: int) -> AndOrGraph:
    """Return a copy of ``g`` where ``or_node`` keeps only one child subtree."""
    node = g[or_node]
    if node.kind is not Kind.OR:
        raise GrammarError(f"{g.name}: {or_node!r} is a {node.kind.value}-node, not an or-node")
    if not 0 <= child_index < len(node.children):
        raise GrammarError(f"{g.name}: child index {child_index} out of range for "
                           f"{or_node!r} ({len(node.children)} children)")
    dropped: set[str] = set()
    for i, child in enumerate(node.children):
        if i != child_index:
            dropped.update(_subtree(g, child))
    kept = replace(node, children=(node.children[child_index],),
                   prior=None if node.prior is None else (1.0,))
    nodes = {nid: (kept if nid == or_node else n)
             for nid, n in g.nodes.items() if nid not in dropped}
    return AndOrGraph(name=g.name, root=g.root, nodes=nodes)


def next_or_node(g: AndOrGraph, resolved: Iterable[str]) -> str | None:
    done = set(resolved)
    for nid in or_nodes_dfs(g):
        if nid not in done:
            return nid
    return None


def resolve(g: AndOrGraph, choose: Callable[[AndOrGraph, str], int]) -> ParsingGraph:
    """Walk reachable or-nodes in DFS order, letting ``choose`` pick each branch.

    ``choose`` receives the current (already pruned) graph and the or-node id.
    """
    current, selections = g, []
    while (nid := next_or_node(current, (s[0] for s in selections))) is not None:
        idx = int(choose(current, nid))
        current = prune(current, nid, idx)
        selections.append((nid, idx))
    return ParsingGraph(g, tuple(selections))


def pruned_graphs(g: AndOrGraph, selections: Sequence[Selection]) -> list[AndOrGraph]:
    """Graphs seen before each selection, then the final one (len = selections + 1).

    Raises if ``selections`` does not follow the reachable DFS or-node order.
    """
    graphs, current = [g], g
    for k, (nid, idx) in enumerate(selections):
        expected = next_or_node(current, (s[0] for s in selections[:k]))
        if expected != nid:
            raise GrammarError(f"{g.name}: selection {k} is for {nid!r}, expected "
                               f"{expected!r}")
        current = prune(current, nid, idx)
        graphs.append(current)
    return graphs


@dataclass(frozen=True)
class ParsingGraph:
    source: AndOrGraph
    selections: tuple[Selection, ...]

    @property
    def graph(self) -> AndOrGraph:
        return pruned_graphs(self.source, self.selections)[-1]


def extract_sequence(pg: ParsingGraph) -> ActionSequence:
    graphs = pruned_graphs(pg.source, pg.selections)
    final = graphs[-1]
    pending = next_or_node(final, (s[0] for s in pg.selections))
    if pending is not None:
        raise GrammarError(f"{pg.source.name}: or-node {pending!r} is unresolved")
    return tuple(final.nodes[nid].atomic for nid in _subtree(final, final.root)
                 if final.nodes[nid].kind is Kind.TERMINAL)


# -- language ----------------------------------------------------------------

def enumerate_language(g: AndOrGraph, max_sequences: int = 100_000) -> list[ActionSequence]:
    """All derivable sequences, deduplicated, in derivation order.

    Raises LanguageTooLarge as soon as the count is known to exceed ``max_sequences``.
    """
    def check(seqs: dict) -> dict:
        if len(seqs) > max_sequences:
            raise LanguageTooLarge(f"{g.name}: language exceeds {max_sequences} sequences")
        return seqs

    def lang(nid: str) -> dict[ActionSequence, None]:
        node = g.nodes[nid]
        if node.kind is Kind.TERMINAL:
            return {(node.atomic,): None}
        if node.kind is Kind.OR:
            out: dict[ActionSequence, None] = {}
            for c in node.children:
                out.update(lang(c))
                check(out)
            return out
        acc: dict[ActionSequence, None] = {(): None}
        for c in node.children:
            tails = lang(c)
            acc = check({head + tail: None for head in acc for tail in tails})
        return acc

    return list(lang(g.root))


def contains(g: AndOrGraph, seq: Sequence[AtomicAction]) -> bool:
    """Membership test by span matching; agrees with ``enumerate_language``."""
    seq = tuple(seq)
    memo: dict[tuple[str, int], frozenset[int]] = {}

    def ends(nid: str, start: int) -> frozenset[int]:
        key = (nid, start)
        if key in memo:
            return memo[key]
        node = g.nodes[nid]
        if node.kind is Kind.TERMINAL:
            hit = start < len(seq) and seq[start] == node.atomic
            result = frozenset({start + 1}) if hit else frozenset()
        elif node.kind is Kind.OR:
            result = frozenset().union(*(ends(c, start) for c in node.children))
        else:
            frontier = frozenset({start})
            for c in node.children:
                frontier = frozenset().union(*(ends(c, i) for i in frontier))
                if not frontier:
                    break
            result = frontier
        memo[key] = result
        return result

    return len(seq) in ends(g.root, 0)


def max_sequence_length(g: AndOrGraph) -> int:
    def longest(nid: str) -> int:
        node = g.nodes[nid]
        if node.kind is Kind.TERMINAL:
            return 1
        lengths = [longest(c) for c in node.children]
        return max(lengths) if node.kind is Kind.OR else sum(lengths)

    return longest(g.root)


def objects_in(g: AndOrGraph, start: str | None = None) -> set[int]:
    return {g.nodes[nid].atomic.object for nid in _subtree(g, start or g.root)
            if g.nodes[nid].kind is Kind.TERMINAL}


def subtree(g: AndOrGraph, start: str) -> list[str]:
    """Node ids under ``start`` (inclusive) in pre-order."""
    return _subtree(g, start)


# -- encoding ----------------------------------------------------------------

def encode_adjacency(g: AndOrGraph, index: Mapping[str, int], n_max: int) -> np.ndarray:
    """Row-major flattened n_max x n_max parent->child adjacency matrix."""
    out = np.zeros(n_max * n_max)
    for nid in g.nodes:
        if nid not in index:
            raise GrammarError(f"{g.name}: node {nid!r} missing from the node index")
        if not 0 <= index[nid] < n_max:
            raise GrammarError(f"{g.name}: node {nid!r} index {index[nid]} >= n_max {n_max}")
    for parent, child in g.edges():
        out[index[parent] * n_max + index[child]] = 1.0
    return out
