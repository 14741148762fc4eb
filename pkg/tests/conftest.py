import itertools
import json
from importlib.resources import files

import numpy as np
import pytest

from aogplan.grammar import AndOrGraph, GrammarSet, Kind, Node, load_grammar_set, next_or_node, prune
from aogplan.vocab import AtomicAction, Vocab


@pytest.fixture(scope="session")
def gs() -> GrammarSet:
    return load_grammar_set((files("aogplan") / "data" / "grammars.json").read_text())


def grammar_doc(nodes, root="root", name="t", actions=None, objects=None):
    v = Vocab()
    return json.dumps({
        "vocab": {"actions": list(actions or v.actions), "objects": list(objects or v.objects)},
        "tasks": [{"name": name, "root": root, "nodes": nodes}],
    })


def random_grammar(seed: int, max_or: int = 5, max_branch: int = 4, max_depth: int = 4,
                   n_actions: int = 7, n_objects: int = 10) -> AndOrGraph:
    """Random tree grammar; every terminal carries a distinct atomic action."""
    rng = np.random.default_rng(seed)
    pool = [AtomicAction(a, o) for a, o in itertools.product(range(n_actions), range(n_objects))]
    order = rng.permutation(len(pool))
    atoms = iter(pool[i] for i in order)
    nodes: dict[str, Node] = {}
    budget = {"or": max_or}

    def build(depth: int) -> str:
        nid = f"n{len(nodes)}"
        nodes[nid] = None  # reserve the id in pre-order
        r = rng.random()
        if depth >= max_depth or r < 0.35 or len(nodes) > 30:
            nodes[nid] = Node(nid, Kind.TERMINAL, atomic=next(atoms))
            return nid
        kind = Kind.OR if (r < 0.65 and budget["or"] > 0) else Kind.AND
        if kind is Kind.OR:
            budget["or"] -= 1
        width = int(rng.integers(1, max_branch + 1))
        children = tuple(build(depth + 1) for _ in range(width))
        nodes[nid] = Node(nid, kind, children=children)
        return nid

    root = build(0)
    return AndOrGraph("random", root, nodes)


def count_derivations(g: AndOrGraph, nid: str | None = None) -> int:
    """Independent product/sum count of derivations."""
    node = g.nodes[nid or g.root]
    if node.kind is Kind.TERMINAL:
        return 1
    counts = [count_derivations(g, c) for c in node.children]
    return int(np.prod(counts)) if node.kind is Kind.AND else sum(counts)


def all_selection_lists(g: AndOrGraph):
    """Every full selection list, by exhaustive branching over the DFS walk."""
    def walk(current, chosen):
        nid = next_or_node(current, (s[0] for s in chosen))
        if nid is None:
            yield tuple(chosen)
            return
        for i in range(len(current.nodes[nid].children)):
            yield from walk(prune(current, nid, i), chosen + [(nid, i)])

    yield from walk(g, [])


TINY_NODES = {
    "root": {"kind": "or", "children": ["fetch", "move_to.pot"]},
    "fetch": {"kind": "and", "children": ["grasp.cup", "water"]},
    "grasp.cup": {"kind": "terminal", "action": "grasp", "object": "cup"},
    "water": {"kind": "or", "children": ["open.tap", "pour_into.bowl"]},
    "open.tap": {"kind": "terminal", "action": "open", "object": "tap"},
    "pour_into.bowl": {"kind": "terminal", "action": "pour into", "object": "bowl"},
    "move_to.pot": {"kind": "terminal", "action": "move to", "object": "pot"},
}


@pytest.fixture(scope="session")
def tiny_gs() -> GrammarSet:
    """Two tasks, seven node ids, two or-nodes on the deepest path."""
    v = Vocab()
    doc = {"vocab": {"actions": list(v.actions), "objects": list(v.objects)},
           "tasks": [{"name": "fetch water", "root": "root", "nodes": TINY_NODES},
                     {"name": "grasp cup", "root": "grasp.cup",
                      "nodes": {"grasp.cup": TINY_NODES["grasp.cup"]}}]}
    return load_grammar_set(json.dumps(doc))


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    """Note one acceptance result; the terminal summary prints them in order."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
