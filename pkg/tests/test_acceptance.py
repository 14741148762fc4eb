"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line, printed in the terminal summary.  A
failing criterion is reported as a failure; nothing here is loosened to pass.
"""

import filecmp
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from aogplan.config import RunConfig
from aogplan.decoder import DecoderModel, decode_batch, make_batch, token_accuracy, train_decoder
from aogplan.evaluation import sequence_accuracy
from aogplan.experiment import build_datasets, run_experiment
from aogplan.grammar import (
    ParsingGraph,
    contains,
    dump_grammar_set,
    enumerate_language,
    extract_sequence,
    load_grammar_set,
    or_nodes_dfs,
)
from aogplan.nn import LstmParams, LstmState, finite_difference_grads, lstm_step, relative_error
from aogplan.selector import (
    SelectorModel,
    _encode_sample,
    _make_batch,
    generate_augmented,
    selection_accuracy,
    train_selector,
)
from aogplan.vocab import Vocab
from aogplan.world import DatasetSpec, gen_dataset, write_samples

from conftest import all_selection_lists, count_derivations, random_grammar, record
from test_nn import scalar_lstm

V = Vocab()
SEEDS = (0, 1, 2)


def seeded(seed: int) -> RunConfig:
    return RunConfig().override({f"seeds.{k}": seed for k in ("data", "selector", "augment",
                                                              "decoder")})


def dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def same_files(a: Path, b: Path) -> tuple[bool, int]:
    names = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if names != other:
        return False, 0
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(n) for n in names], shallow=False)
    return not mismatch and not errors, len(names)


# -- runners shared by the criteria and the determinism rerun -----------------------

def run_overfit(gs, out: Path) -> dict:
    samples = gen_dataset(gs, DatasetSpec(4, 11, (1.0, 0.0)))[0][:50]
    cfg = replace(RunConfig().decoder.net_config(), epochs=500)
    t0 = time.perf_counter()
    m, history, _ = train_decoder(samples, V, cfg, seed=0, stop_at_accuracy=1.0)
    seq = sequence_accuracy(m, samples)
    result = {"samples": len(samples), "epochs": len(history.entries),
              "token_acc": token_accuracy(m, samples),
              "sequence_acc": float(np.mean([tuple(p) == s.sequence for s, p in zip(
                  samples, decode_batch(m, [(s.scene, s.task) for s in samples]))])),
              "per_task_sequence_acc": seq["per_task_sequence_accuracy"],
              "log": history.entries}
    dump(out / "overfit.json", result)
    result["seconds"] = time.perf_counter() - t0
    return result


def run_selector(gs, out: Path) -> dict:
    cfg = RunConfig()
    train, test, _ = build_datasets(cfg, gs)
    t0 = time.perf_counter()
    m, history = train_selector(train, gs, cfg.selector.net_config(), cfg.seeds.selector,
                                cfg.n_max, cfg.b_max)
    acc = selection_accuracy(m, test, gs)
    seconds = time.perf_counter() - t0
    dump(out / "selector.json", {"train_samples": len(train), "test": acc,
                                 "log": history.entries})
    return {"model": m, "train": len(train), "acc": acc, "seconds": seconds}


def run_augment(gs, m: SelectorModel, out: Path) -> dict:
    cfg = RunConfig()
    t0 = time.perf_counter()
    samples = generate_augmented(m, gs, range(V.n_tasks), 2000, cfg.seeds.augment)
    valid = sum(contains(gs.task_graph(s.task), s.sequence) for s in samples)
    seconds = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    write_samples(out / "augmented.jsonl", samples, V, {"count": len(samples)})
    return {"count": len(samples), "valid": valid, "seconds": seconds}


def run_seeds(kind: str, gs, out: Path) -> dict:
    t0 = time.perf_counter()
    results = {}
    for seed in SEEDS:
        reports = run_experiment(kind, seeded(seed), out / f"seed{seed}", gs)
        results[seed] = (reports["with_aog"].avg_sequence_acc,
                         reports["without_aog"].avg_sequence_acc)
    return {"per_seed": results, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    return tmp_path_factory.mktemp("first")


@pytest.fixture(scope="module")
def selector_run(gs, first_run):
    return run_selector(gs, first_run / "c6")


@pytest.fixture(scope="module")
def ablation_run(gs, first_run):
    return run_seeds("ablation", gs, first_run / "c8")


@pytest.fixture(scope="module")
def generalization_run(gs, first_run):
    return run_seeds("generalization", gs, first_run / "c9")


# -- criteria -----------------------------------------------------------------------

def test_c1_grammar_oracle_equivalence():
    t0 = time.perf_counter()
    checked, failures = 0, []
    seed = 0
    while checked < 25:
        g = random_grammar(seed)
        seed += 1
        if len(or_nodes_dfs(g)) == 0:
            continue  # keep grammars that actually branch
        language = enumerate_language(g)
        members = set(language)
        if len(language) != count_derivations(g):
            failures.append(f"seed {seed - 1}: count")
        for sel in all_selection_lists(g):
            if extract_sequence(ParsingGraph(g, sel)) not in members:
                failures.append(f"seed {seed - 1}: membership")
                break
        checked += 1
    seconds = time.perf_counter() - t0
    ok = record(1, not failures and seconds < 10,
                f"{checked} random grammars, {len(failures)} mismatches, {seconds:.1f}s (< 10s)")
    assert ok, failures


def test_c2_figure_grammars(gs):
    a = V.atomic
    tea = [a("move to", "tea-box"), a("grasp", "tea-box"), a("put into", "cup"),
           a("move to", "cup"), a("grasp", "cup")]
    dispenser = [a("move to", "water-dispenser"), a("put under", "water-dispenser"),
                 a("open", "water-dispenser")]
    pot = [a("move to", "pot"), a("grasp", "pot"), a("pour into", "cup")]
    make_tea = {tuple(tea + dispenser), tuple(tea + pot)}
    grasp_cup = [a("move to", "cup"), a("grasp", "cup")]
    fig2b = {tuple(grasp_cup + dispenser), tuple(grasp_cup + pot)}

    got_tea = enumerate_language(gs["make tea"])
    got_cup = enumerate_language(gs["pour water with the cup"])
    ok = record(2, len(got_tea) == 2 and set(got_tea) == make_tea and set(got_cup) == fig2b
                and len(got_cup) == len(fig2b),
                f"make tea: {len(got_tea)} sequences; pour water with the cup: "
                f"{len(got_cup)} sequences, exact set match {set(got_cup) == fig2b}")
    assert ok


def _check_net(net, batch) -> float:
    _, grads = net.loss_and_grads(batch)
    numeric = finite_difference_grads(lambda: net.loss(batch), net.params, eps=1e-5)
    return max(relative_error(grads[k], numeric[k]) for k in net.params)


def _perturb(m, seed):
    rng = np.random.default_rng(seed)
    for v in m.net.params.values():
        v += rng.normal(scale=0.2, size=v.shape)


def test_c3_gradient_correctness(gs):
    t0 = time.perf_counter()
    worst = {}
    # selector: one bundled task at a time keeps n_max small, so every entry is checked
    doc = json.loads(dump_grammar_set(gs))
    for name in ("pour water", "make tea"):
        one = load_grammar_set(json.dumps({**doc, "tasks": [t for t in doc["tasks"]
                                                            if t["name"] == name]}))
        n_max = 1 << (len(one.node_index) - 1).bit_length()
        m = SelectorModel.create(one, hidden=8, n_max=n_max, seed=1)
        _perturb(m, 2)
        samples = gen_dataset(one, DatasetSpec(3, 5, (1.0, 0.0)))[0]
        batch = _make_batch(m, [_encode_sample(m, s, one) for s in samples])
        worst[f"selector[{name}]"] = _check_net(m.net, batch)
    d = DecoderModel.create(V, hidden=8, seed=1)
    _perturb(d, 3)
    samples = gen_dataset(gs, DatasetSpec(1, 6, (1.0, 0.0), (0, 3, 10)))[0]
    worst["decoder"] = _check_net(d.net, make_batch(d, [(s.scene, s.task, s.sequence)
                                                        for s in samples]))
    seconds = time.perf_counter() - t0
    top = max(worst.values())
    ok = record(3, top < 1e-5 and seconds < 60,
                f"max relative error {top:.2e} (< 1e-5) over "
                f"{', '.join(worst)}, {seconds:.1f}s (< 60s)")
    assert ok, worst


def test_c4_lstm_conformance():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        I, H = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        W, b = rng.normal(size=(4 * H, I + H)), rng.normal(size=4 * H)
        x, h, c = rng.normal(size=I), rng.uniform(-1, 1, H), rng.normal(size=H)
        s = lstm_step(LstmParams(W, b), x, LstmState(h, c))
        rh, rc = scalar_lstm(W, b, x, h, c)
        worst = max(worst, np.abs(s.h - rh).max(), np.abs(s.c - rc).max())
    H, I = 16, 6
    p = LstmParams(rng.normal(scale=2.0, size=(4 * H, I + H)), rng.normal(scale=2.0, size=4 * H))
    s, bounded = LstmState.zeros(H), True
    for _ in range(10_000):
        s = lstm_step(p, rng.normal(scale=2.0, size=I), s)
        bounded &= bool((np.abs(s.h) < 1).all())
    ok = record(4, worst <= 1e-12 and bounded,
                f"max deviation from scalar reference {worst:.1e} (<= 1e-12); "
                f"|h| < 1 over 10^4 steps: {bounded}")
    assert ok


def test_c5_overfit(gs, first_run):
    r = run_overfit(gs, first_run / "c5")
    ok = record(5, r["token_acc"] == 1.0 and r["sequence_acc"] == 1.0 and r["epochs"] <= 500
                and r["seconds"] < 120,
                f"{r['samples']} samples: token acc {100 * r['token_acc']:.2f}%, sequence acc "
                f"{100 * r['sequence_acc']:.2f}% after {r['epochs']} epochs, "
                f"{r['seconds']:.1f}s (< 120s)")
    assert ok


def test_c6_selector_fidelity(selector_run):
    r = selector_run
    acc = r["acc"]
    ok = record(6, acc["or_node_accuracy"] >= 0.95 and r["seconds"] < 300,
                f"trained on {r['train']} samples: or-node accuracy "
                f"{100 * acc['or_node_accuracy']:.2f}% (>= 95%) on {acc['scenes']} held-out "
                f"scenes, {r['seconds']:.1f}s (< 300s)")
    assert ok


def test_c7_augmentation_validity(gs, selector_run, first_run):
    r = run_augment(gs, selector_run["model"], first_run / "c7")
    ok = record(7, r["count"] == 2000 and r["valid"] == r["count"] and r["seconds"] < 60,
                f"{r['valid']}/{r['count']} augmented sequences grammar-valid, "
                f"{r['seconds']:.1f}s (< 60s)")
    assert ok


def test_c8_ablation_direction(ablation_run):
    per = ablation_run["per_seed"]
    wins = sum(w >= wo for w, wo in per.values())
    detail = "; ".join(f"seed {s}: {100 * w:.2f} vs {100 * wo:.2f}" for s, (w, wo) in per.items())
    ok = record(8, wins >= 2, f"with vs without augmentation, {detail}; "
                              f"direction holds on {wins}/3 seeds (need 2)")
    assert ok


def test_c9_generalization_direction(generalization_run):
    per = generalization_run["per_seed"]
    seconds = generalization_run["seconds"]
    gaps = {s: w - wo for s, (w, wo) in per.items()}
    detail = "; ".join(f"seed {s}: {100 * w:.2f} vs {100 * wo:.2f}" for s, (w, wo) in per.items())
    ok = record(9, min(gaps.values()) >= 0.20 and seconds < 900,
                f"held-out tasks, {detail}; smallest gap {100 * min(gaps.values()):.2f} points "
                f"(>= 20), {seconds:.0f}s (< 900s)")
    assert ok


def test_c10_determinism(gs, first_run, tmp_path, selector_run, ablation_run, generalization_run):
    second = tmp_path / "second"
    run_overfit(gs, second / "c5")
    rerun = run_selector(gs, second / "c6")
    run_augment(gs, rerun["model"], second / "c7")
    for kind, key in (("ablation", "c8"), ("generalization", "c9")):
        run_experiment(kind, seeded(SEEDS[0]), second / key / f"seed{SEEDS[0]}", gs)
    verdicts, total = {}, 0
    for key in ("c5", "c6", "c7", "c8/seed0", "c9/seed0"):
        same, n = same_files(first_run / key, second / key)
        verdicts[key] = same
        total += n
    ok = record(10, all(verdicts.values()),
                f"{total} report files compared byte for byte across reruns of criteria 5-9; "
                f"differing: {[k for k, v in verdicts.items() if not v] or 'none'}")
    assert ok, verdicts
