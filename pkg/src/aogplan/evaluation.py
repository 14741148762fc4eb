"""Metrics and report files for trained decoders.

Atomic accuracies are teacher-forced so every step has a well-defined
ground truth; sequence accuracy and grammar validity use free-running
greedy decodes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .decoder import DecoderModel, _teacher_forced_argmax, decode_batch, make_batch
from .grammar import ActionSequence, GrammarSet, contains
from .world import Sample


@dataclass
class MetricsReport:
    """Per-class and averaged accuracies for one decoder on one test set.

    Confusion rows are ground-truth classes (END excluded, since END is never
    a ground-truth class in the tables); columns are predictions with END as
    the last column.  A class absent from the test set has accuracy ``None``.
    """

    per_action_accuracy: dict[str, float | None]
    per_object_accuracy: dict[str, float | None]
    avg_action_acc: float
    avg_object_acc: float
    per_task_sequence_accuracy: dict[str, float]
    avg_sequence_acc: float
    grammar_validity_rate: float
    confusion_action: list[list[int]]
    confusion_object: list[list[int]]
    n_samples: int = 0
    n_steps: int = 0
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        return format_table(self)


# -- metrics ------------------------------------------------------------------------

def _rates(conf: np.ndarray) -> list[float | None]:
    out = []
    for k, row in enumerate(conf):
        n = row.sum()
        out.append(float(row[k] / n) if n else None)
    return out


def atomic_accuracy(m: DecoderModel, samples: Sequence[Sample], batch_size: int = 256) -> dict:
    """Teacher-forced per-step accuracy of both heads, END steps excluded.

    Averages are unweighted over steps, so frequent classes weigh more.
    """
    if not samples:
        raise ValueError("empty test set")
    v = m.vocab
    conf_a = np.zeros((v.n_actions, v.n_actions + 1), dtype=np.int64)
    conf_o = np.zeros((v.n_objects, v.n_objects + 1), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_batch(m, [(s.scene, s.task, s.sequence) for s in chunk])
        for pa, po, ta, to, live in _teacher_forced_argmax(m, batch):
            keep = live & (ta != v.n_actions)
            np.add.at(conf_a, (ta[keep], pa[keep]), 1)
            np.add.at(conf_o, (to[keep], po[keep]), 1)
    steps = int(conf_a.sum())
    return {
        "per_action_accuracy": dict(zip(v.actions, _rates(conf_a))),
        "per_object_accuracy": dict(zip(v.objects, _rates(conf_o))),
        "avg_action_acc": float(np.trace(conf_a) / steps) if steps else 1.0,
        "avg_object_acc": float(np.trace(conf_o) / steps) if steps else 1.0,
        "confusion_action": conf_a.tolist(),
        "confusion_object": conf_o.tolist(),
        "n_steps": steps,
    }


def sequence_accuracy(m: DecoderModel, samples: Sequence[Sample],
                      predictions: Sequence[ActionSequence] | None = None) -> dict:
    """Exact-match rate of free-running decodes, per task and averaged over tasks."""
    if not samples:
        raise ValueError("empty test set")
    if predictions is None:
        predictions = decode_batch(m, [(s.scene, s.task) for s in samples])
    hits: dict[int, list[bool]] = {}
    for s, pred in zip(samples, predictions):
        hits.setdefault(s.task, []).append(tuple(pred) == tuple(s.sequence))
    per_task = {m.vocab.tasks[t]: float(np.mean(h)) for t, h in sorted(hits.items())}
    return {"per_task_sequence_accuracy": per_task,
            "avg_sequence_acc": float(np.mean(list(per_task.values())))}


def grammar_validity(m: DecoderModel, samples: Sequence[Sample], gs: GrammarSet,
                     predictions: Sequence[ActionSequence] | None = None) -> float:
    """Fraction of free-running decodes that belong to their task's language."""
    if not samples:
        raise ValueError("empty test set")
    graphs = [gs.task_graph(s.task) for s in samples]  # raises on unknown tasks first
    if predictions is None:
        predictions = decode_batch(m, [(s.scene, s.task) for s in samples])
    return float(np.mean([contains(g, p) for g, p in zip(graphs, predictions)]))


def evaluate(m: DecoderModel, samples: Sequence[Sample], gs: GrammarSet,
             provenance: Mapping | None = None) -> MetricsReport:
    """All metrics, decoding the test set once."""
    predictions = decode_batch(m, [(s.scene, s.task) for s in samples]) if samples else []
    atomic = atomic_accuracy(m, samples)
    seq = sequence_accuracy(m, samples, predictions)
    return MetricsReport(
        **atomic, **seq,
        grammar_validity_rate=grammar_validity(m, samples, gs, predictions),
        n_samples=len(samples), provenance=dict(provenance or {}))


# -- report files -------------------------------------------------------------------

def _pct(x: float | None) -> str:
    return "   -  " if x is None else f"{100 * x:6.2f}"


def format_table(r: MetricsReport) -> str:
    """Aligned plain-text tables: per-class atomic accuracy, then per-task sequences."""
    lines = []
    for title, per, avg in (("action", r.per_action_accuracy, r.avg_action_acc),
                            ("object", r.per_object_accuracy, r.avg_object_acc)):
        width = max(len(k) for k in [*per, "average"])
        lines.append(f"{title} accuracy (%)")
        lines += [f"  {k:<{width}}  {_pct(v)}" for k, v in per.items()]
        lines.append(f"  {'average':<{width}}  {_pct(avg)}")
        lines.append("")
    per = r.per_task_sequence_accuracy
    width = max(len(k) for k in [*per, "average"])
    lines.append("sequence accuracy (%)")
    lines += [f"  {k:<{width}}  {_pct(v)}" for k, v in per.items()]
    lines.append(f"  {'average':<{width}}  {_pct(r.avg_sequence_acc)}")
    lines.append("")
    lines.append(f"grammar validity (%)  {_pct(r.grammar_validity_rate)}")
    return "\n".join(lines) + "\n"


def confusion_csv(matrix: Sequence[Sequence[int]], labels: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth\\predicted", *labels, "END"])
    for name, row in zip(labels, matrix):
        w.writerow([name, *row])
    return buf.getvalue()


def write_report(directory: str | Path, name: str, r: MetricsReport,
                 actions: Sequence[str], objects: Sequence[str]) -> list[Path]:
    """Write ``name``.json, ``name``.txt and the two confusion CSVs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        f"{name}.json": r.to_json(),
        f"{name}.txt": r.table(),
        f"{name}_confusion_action.csv": confusion_csv(r.confusion_action, actions),
        f"{name}_confusion_object.csv": confusion_csv(r.confusion_object, objects),
    }
    out = []
    for fname, text in files.items():
        (directory / fname).write_text(text, encoding="utf-8")
        out.append(directory / fname)
    return out


def diff_summary(a: MetricsReport, b: MetricsReport, names: tuple[str, str],
                 tasks: Sequence[str] | None = None) -> dict:
    """Arm ``a`` minus arm ``b`` on the headline numbers (optionally a task subset)."""
    def seq_avg(r: MetricsReport) -> float:
        per = r.per_task_sequence_accuracy
        keys = list(per) if tasks is None else [t for t in tasks if t in per]
        return float(np.mean([per[k] for k in keys])) if keys else float("nan")

    rows = {
        "avg_action_acc": (a.avg_action_acc, b.avg_action_acc),
        "avg_object_acc": (a.avg_object_acc, b.avg_object_acc),
        "avg_sequence_acc": (seq_avg(a), seq_avg(b)),
        "grammar_validity_rate": (a.grammar_validity_rate, b.grammar_validity_rate),
    }
    return {
        "arms": list(names),
        "tasks": list(tasks) if tasks is not None else None,
        "metrics": {k: {names[0]: x, names[1]: y, "difference": x - y}
                    for k, (x, y) in rows.items()},
    }


def format_diff(summary: Mapping) -> str:
    a, b = summary["arms"]
    width = max(len(k) for k in summary["metrics"])
    lines = [f"{'metric':<{width}}  {a:>10}  {b:>10}  {'diff':>8}"]
    for k, row in summary["metrics"].items():
        lines.append(f"{k:<{width}}  {100 * row[a]:10.2f}  {100 * row[b]:10.2f}  "
                     f"{100 * row['difference']:+8.2f}")
    if summary.get("tasks"):
        lines.append(f"tasks: {', '.join(summary['tasks'])}")
    return "\n".join(lines) + "\n"
