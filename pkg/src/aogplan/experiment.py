"""End-to-end experiment protocols: augmentation ablation and unseen-task generalization."""

from __future__ import annotations

import json
import logging
import platform
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .decoder import DEFAULT_MAX_LEN, train_decoder
from .evaluation import MetricsReport, diff_summary, evaluate, format_diff, write_report
from .grammar import GrammarSet, load_grammar_set
from .selector import generate_augmented, train_selector
from .world import DatasetSpec, Sample, gen_dataset

log = logging.getLogger(__name__)

EXPERIMENTS = ("ablation", "generalization")
ARMS = ("with_aog", "without_aog")


def load_grammars(path: str | None = None) -> GrammarSet:
    if path is None:
        return load_grammar_set((files("aogplan") / "data" / "grammars.json").read_text())
    return load_grammar_set(Path(path).read_text(encoding="utf-8"))


def resolve_max_len(cfg: RunConfig, gs: GrammarSet) -> int:
    if cfg.max_len is not None:
        return cfg.max_len
    return max(DEFAULT_MAX_LEN, gs.longest_derivation + 1)


def versions() -> dict:
    return {"aogplan": __version__, "numpy": np.__version__, "python": platform.python_version()}


def provenance(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seeds": cfg.to_dict()["seeds"],
            "versions": versions(), **extra}


def build_datasets(cfg: RunConfig, gs: GrammarSet) -> tuple[list[Sample], list[Sample],
                                                             list[Sample]]:
    """(train, test, held_out_test) for the configured data seed.

    Annotated tasks are all tasks not named in ``cfg.held_out``; they share
    the train/test split.  Held-out tasks contribute test scenes only.
    """
    held = sorted(gs.vocab.task_id(t) for t in cfg.held_out)
    annotated = tuple(t for t in range(gs.vocab.n_tasks) if t not in held)
    train, test = gen_dataset(gs, DatasetSpec(cfg.count_per_task, cfg.seeds.data,
                                              (cfg.train_fraction, 1 - cfg.train_fraction),
                                              annotated))
    held_test = []
    if held:
        _, held_test = gen_dataset(gs, DatasetSpec(cfg.count_per_task, cfg.seeds.data,
                                                   (0.0, 1.0), tuple(held)))
    return train, test, held_test


def run_experiment(kind: str, cfg: RunConfig, out_dir: str | Path,
                   gs: GrammarSet | None = None) -> dict[str, MetricsReport]:
    """Run both arms of ``kind`` and write their reports plus a diff summary.

    Both experiments train the selector and the decoders on the annotated
    tasks only; the augmented set covers every task.  ``ablation`` compares
    decoders trained with and without the augmented set on the annotated
    tasks' test split.  ``generalization`` compares them on the held-out
    tasks, for which augmented samples are the only training data.
    """
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {kind!r}; choose from {', '.join(EXPERIMENTS)}")
    gs = gs or load_grammars(cfg.paths.grammar)
    train, test, held_test = build_datasets(cfg, gs)
    if kind == "generalization":
        if not held_test:
            raise ConfigError("generalization needs at least one held-out task")
        test = held_test
    log.info("%s: %d annotated training samples, %d test samples", kind, len(train), len(test))

    selector, _ = train_selector(train, gs, cfg.selector.net_config(), cfg.seeds.selector,
                                 cfg.n_max, cfg.b_max)
    augmented = generate_augmented(selector, gs, range(gs.vocab.n_tasks), cfg.augment_count,
                                   cfg.seeds.augment)
    log.info("%s: %d augmented samples", kind, len(augmented))

    max_len = resolve_max_len(cfg, gs)
    arms = {"with_aog": train + augmented, "without_aog": train}
    reports = {}
    out = Path(out_dir)
    for arm in ARMS:
        model, _, steps = train_decoder(arms[arm], gs.vocab, cfg.decoder.net_config(),
                                        cfg.seeds.decoder, max_len)
        prov = provenance(cfg, experiment=kind, arm=arm, train_samples=len(arms[arm]),
                          optimizer_steps=steps, vocab=gs.vocab.fingerprint())
        reports[arm] = evaluate(model, test, gs, prov)
        write_report(out, f"{kind}_{arm}", reports[arm], gs.vocab.actions, gs.vocab.objects)

    summary = diff_summary(reports["with_aog"], reports["without_aog"], ARMS)
    summary["provenance"] = provenance(cfg, experiment=kind)
    (out / f"{kind}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True)
                                              + "\n", encoding="utf-8")
    (out / f"{kind}_summary.txt").write_text(format_diff(summary), encoding="utf-8")
    return reports
