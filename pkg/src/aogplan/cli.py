"""Command-line entry point: ``aogplan <command> [options]``.

Settings come from defaults, then ``--config FILE``, then flags.  The
``AOGPLAN_LOG`` environment variable sets log verbosity (e.g. ``DEBUG``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig
from .decoder import DecoderModel, decode_batch, score, train_decoder
from .evaluation import evaluate, write_report
from .experiment import EXPERIMENTS, build_datasets, load_grammars, provenance, resolve_max_len, run_experiment
from .grammar import GrammarError, enumerate_language, or_nodes_dfs
from .nn import CheckpointError
from .selector import SelectorModel, generate_augmented, selection_accuracy, train_selector
from .world import meta_path, read_samples, write_samples

log = logging.getLogger("aogplan")


class CliError(Exception):
    pass


def _net_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network hyperparameters")
    g.add_argument("--hidden", type=int, help="LSTM hidden size")
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--momentum", type=float, help="SGD momentum")
    g.add_argument("--weight-decay", type=float, help="L2 weight decay")
    g.add_argument("--batch-size", type=int, help="mini-batch size")
    g.add_argument("--epochs", type=int, help="training epochs")


def _net_overrides(args, net: str) -> dict:
    return {f"{net}.{k}": getattr(args, k, None)
            for k in ("hidden", "lr", "momentum", "weight_decay", "batch_size", "epochs")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aogplan", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--paper-scale", action="store_true",
                        help="use hidden size 512 for both networks")
    parser.add_argument("--grammar", help="grammar set JSON (default: bundled grammars)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("validate", help="check a grammar set and print per-task counts")
    p.add_argument("path", nargs="?", help="grammar set JSON (default: --grammar or bundled)")

    p = sub.add_parser("enumerate", help="print every sequence a task's grammar derives")
    p.add_argument("--task", required=True, help="task name")

    p = sub.add_parser("gen-data", help="generate synthetic annotated train/test sets")
    p.add_argument("--train", help="output train JSONL")
    p.add_argument("--test", help="output test JSONL")
    p.add_argument("--count-per-task", type=int, help="scenes per task")
    p.add_argument("--train-fraction", type=float, help="fraction of scenes for training")
    p.add_argument("--seed", type=int, help="data seed")

    p = sub.add_parser("train-selector", help="train the AOG-LSTM on annotated samples")
    p.add_argument("--train", help="annotated train JSONL")
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--seed", type=int, help="selector seed")
    _net_flags(p)

    p = sub.add_parser("augment", help="generate augmented samples with a trained selector")
    p.add_argument("--selector", help="selector checkpoint")
    p.add_argument("--out", help="output JSONL")
    p.add_argument("--count", type=int, help="number of samples")
    p.add_argument("--tasks", nargs="+", help="task names to draw from (default: all)")
    p.add_argument("--seed", type=int, help="augmentation seed")

    p = sub.add_parser("train-decoder", help="train the Action-LSTM")
    p.add_argument("--train", nargs="+", help="training JSONL files (annotated and augmented)")
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--seed", type=int, help="decoder seed")
    _net_flags(p)

    p = sub.add_parser("predict", help="decode sequences for the scenes of a JSONL file")
    p.add_argument("--decoder", help="decoder checkpoint")
    p.add_argument("--input", required=True, help="samples JSONL (scene and task are used)")
    p.add_argument("--out", required=True, help="output predictions JSONL")

    p = sub.add_parser("evaluate", help="score a decoder (and optionally a selector)")
    p.add_argument("--decoder", help="decoder checkpoint")
    p.add_argument("--selector", help="also report selector or-node accuracy")
    p.add_argument("--test", help="test JSONL")
    p.add_argument("--out-dir", help="report directory")
    p.add_argument("--name", default="evaluation", help="report file stem")

    p = sub.add_parser("experiment", help="run an ablation or generalization experiment")
    p.add_argument("kind", choices=EXPERIMENTS, help="which protocol to run")
    p.add_argument("--seed", type=int, help="sets every seed (data, selector, augment, decoder)")
    p.add_argument("--out-dir", help="report directory")
    p.add_argument("--selector-epochs", type=int, help="selector training epochs")
    p.add_argument("--decoder-epochs", type=int, help="decoder training epochs")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.paper_scale:
        cfg = cfg.paper_scale()
    flags = {"paths.grammar": args.grammar}
    cmd = args.command
    if cmd == "gen-data":
        flags.update({"paths.train": args.train, "paths.test": args.test,
                      "count_per_task": args.count_per_task,
                      "train_fraction": args.train_fraction, "seeds.data": args.seed})
    elif cmd == "train-selector":
        flags.update({"paths.train": args.train, "paths.selector": args.out,
                      "seeds.selector": args.seed, **_net_overrides(args, "selector")})
    elif cmd == "augment":
        flags.update({"paths.selector": args.selector, "paths.augmented": args.out,
                      "augment_count": args.count, "seeds.augment": args.seed})
    elif cmd == "train-decoder":
        flags.update({"paths.decoder": args.out, "seeds.decoder": args.seed,
                      **_net_overrides(args, "decoder")})
    elif cmd in ("predict", "evaluate"):
        flags.update({"paths.decoder": args.decoder})
        if cmd == "evaluate":
            flags.update({"paths.test": args.test, "paths.reports": args.out_dir})
    elif cmd == "experiment":
        if args.seed is not None:
            flags.update({f"seeds.{k}": args.seed
                          for k in ("data", "selector", "augment", "decoder")})
        flags.update({"paths.reports": args.out_dir, "selector.epochs": args.selector_epochs,
                      "decoder.epochs": args.decoder_epochs})
    return cfg.override(flags)


def _write_meta(path: str | Path, record: dict) -> None:
    meta_path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")


def _check_dataset_vocab(path: str, fingerprint: str) -> None:
    side = meta_path(path)
    if not side.exists():
        raise CliError(f"{path}: no metadata sidecar; cannot verify the vocab fingerprint")
    recorded = json.loads(side.read_text()).get("vocab")
    if recorded != fingerprint:
        raise CliError(f"{path}: dataset vocab fingerprint {recorded} does not match "
                       f"model fingerprint {fingerprint}")


def _pair_names(vocab, a) -> list[str]:
    obj = vocab.objects[a.object] if a.object < vocab.n_objects else "END"
    return [vocab.actions[a.action], obj]


# -- commands -----------------------------------------------------------------------

def cmd_validate(args, cfg: RunConfig) -> None:
    gs = load_grammars(args.path or cfg.paths.grammar)
    print(f"{'task':<48} {'nodes':>5} {'or':>3} {'sequences':>9}")
    for name, g in gs.tasks.items():
        print(f"{name:<48} {len(g.nodes):>5} {len(or_nodes_dfs(g)):>3} "
              f"{len(enumerate_language(g)):>9}")
    print(f"{len(gs.tasks)} tasks, {len(gs.node_index)} distinct node ids, "
          f"longest derivation {gs.longest_derivation}, max branching {gs.max_branching}")


def cmd_enumerate(args, cfg: RunConfig) -> None:
    gs = load_grammars(cfg.paths.grammar)
    try:
        task = gs.vocab.task_id(args.task)
    except KeyError:
        raise CliError(f"unknown task {args.task!r}") from None
    seqs = enumerate_language(gs.task_graph(task))
    for seq in seqs:
        print(gs.vocab.format_sequence(seq))
    print(f"{len(seqs)} sequence(s)")


def cmd_gen_data(args, cfg: RunConfig) -> None:
    gs = load_grammars(cfg.paths.grammar)
    train, test, held_test = build_datasets(cfg, gs)
    test = test + held_test
    meta = provenance(cfg, command="gen-data")
    for path, samples, split in ((cfg.paths.train, train, "train"), (cfg.paths.test, test, "test")):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_samples(path, samples, gs.vocab, {**meta, "split": split})
    print(f"wrote {len(train)} train samples to {cfg.paths.train}, "
          f"{len(test)} test samples to {cfg.paths.test}")


def cmd_train_selector(args, cfg: RunConfig) -> None:
    gs = load_grammars(cfg.paths.grammar)
    samples = read_samples(cfg.paths.train, gs.vocab)
    model, history = train_selector(samples, gs, cfg.selector.net_config(), cfg.seeds.selector,
                                    cfg.n_max, cfg.b_max)
    Path(cfg.paths.selector).parent.mkdir(parents=True, exist_ok=True)
    model.save(cfg.paths.selector, {"provenance": provenance(cfg, command="train-selector"),
                                    "log": history.entries})
    acc = selection_accuracy(model, samples, gs)
    print(f"saved selector to {cfg.paths.selector}; train or-node accuracy "
          f"{acc['or_node_accuracy']:.4f}")


def cmd_augment(args, cfg: RunConfig) -> None:
    gs = load_grammars(cfg.paths.grammar)
    model = SelectorModel.load(cfg.paths.selector, gs.vocab)
    try:
        tasks = [gs.vocab.task_id(t) for t in args.tasks] if args.tasks else \
            list(range(gs.vocab.n_tasks))
    except KeyError as exc:
        raise CliError(f"unknown task {exc.args[0]!r}") from None
    samples = generate_augmented(model, gs, tasks, cfg.augment_count, cfg.seeds.augment)
    Path(cfg.paths.augmented).parent.mkdir(parents=True, exist_ok=True)
    write_samples(cfg.paths.augmented, samples, gs.vocab,
                  {**provenance(cfg, command="augment"), "selector": model.fingerprint})
    print(f"wrote {len(samples)} augmented samples to {cfg.paths.augmented}")


def cmd_train_decoder(args, cfg: RunConfig) -> None:
    gs = load_grammars(cfg.paths.grammar)
    paths = args.train or [cfg.paths.train]
    samples = [s for p in paths for s in read_samples(p, gs.vocab)]
    model, history, steps = train_decoder(samples, gs.vocab, cfg.decoder.net_config(),
                                          cfg.seeds.decoder, resolve_max_len(cfg, gs))
    Path(cfg.paths.decoder).parent.mkdir(parents=True, exist_ok=True)
    model.save(cfg.paths.decoder, {"provenance": provenance(cfg, command="train-decoder"),
                                   "log": history.entries, "optimizer_steps": steps})
    print(f"saved decoder to {cfg.paths.decoder} after {steps} optimizer steps")


def cmd_predict(args, cfg: RunConfig) -> None:
    gs = load_grammars(cfg.paths.grammar)
    model = DecoderModel.load(cfg.paths.decoder, gs.vocab)
    samples = read_samples(args.input, gs.vocab)
    preds = decode_batch(model, [(s.scene, s.task) for s in samples])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for s, seq in zip(samples, preds):
            fh.write(json.dumps({
                "task": gs.vocab.tasks[s.task], "sceneId": s.scene.scene_id,
                "sequence": [_pair_names(gs.vocab, a) for a in seq],
                "logprob": score(model, s.scene, s.task, seq)}) + "\n")
    _write_meta(args.out, {**provenance(cfg, command="predict"), "vocab": gs.vocab.fingerprint(),
                           "decoder": model.fingerprint})
    print(f"wrote {len(preds)} predictions to {args.out}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    gs = load_grammars(cfg.paths.grammar)
    model = DecoderModel.load(cfg.paths.decoder)
    if model.vocab.fingerprint() != gs.vocab.fingerprint():
        raise CliError(f"decoder vocab fingerprint {model.vocab.fingerprint()} does not match "
                       f"grammar vocab {gs.vocab.fingerprint()}")
    _check_dataset_vocab(cfg.paths.test, model.vocab.fingerprint())
    samples = read_samples(cfg.paths.test, gs.vocab)
    extra = {}
    if args.selector:
        selector = SelectorModel.load(args.selector)
        if selector.vocab.fingerprint() != model.vocab.fingerprint():
            raise CliError("selector and decoder vocab fingerprints differ")
        extra["selector"] = selection_accuracy(selector, samples, gs)
    report = evaluate(model, samples, gs, {**provenance(cfg, command="evaluate"),
                                           "decoder": model.fingerprint, **extra})
    write_report(cfg.paths.reports, args.name, report, gs.vocab.actions, gs.vocab.objects)
    print(report.table(), end="")
    if "selector" in extra:
        print(f"selector or-node accuracy (%)  {100 * extra['selector']['or_node_accuracy']:6.2f}")


def cmd_experiment(args, cfg: RunConfig) -> None:
    reports = run_experiment(args.kind, cfg, cfg.paths.reports)
    summary = Path(cfg.paths.reports) / f"{args.kind}_summary.txt"
    print(summary.read_text(), end="")
    print(f"reports for {', '.join(reports)} written to {cfg.paths.reports}")


COMMANDS = {
    "validate": cmd_validate, "enumerate": cmd_enumerate, "gen-data": cmd_gen_data,
    "train-selector": cmd_train_selector, "augment": cmd_augment,
    "train-decoder": cmd_train_decoder, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("AOGPLAN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except (CliError, ConfigError, GrammarError, CheckpointError, ValueError, KeyError,
            OSError) as exc:
        kind = type(exc).__name__
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": kind, "command": args.command, "message": str(message)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
