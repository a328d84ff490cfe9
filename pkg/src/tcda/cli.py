"""Command-line entry point: ``tcda <command> ...`` or ``python3 -m tcda``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, SyntheticSpec
from .dag import GraphParameterError, build_graph, export_dot, validate_dag
from .dialogue import DialogueParseError, DialogueStructureError, decompose_threads, dump_dialogues, load_dialogues


def _config(path) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig.from_text("")


def _split(args) -> tuple[list, list]:
    from .synth import split_dev

    data = load_dialogues(args.data, permissive=args.permissive)
    if args.dev:
        return data, load_dialogues(args.dev, permissive=args.permissive)
    return split_dev(data, args.dev_fraction)


def cmd_train(args) -> int:
    from .model import ExternalAdjacency
    from .train import train

    config = _config(args.config)
    train_set, dev_set = _split(args)
    adjacency = ExternalAdjacency(args.adjacency) if args.adjacency else None
    result = train(config, train_set, dev_set, out_dir=args.out, resume=args.resume, adjacency=adjacency, log=print)
    print(f"stopped: {result.state.stop_reason} after {result.state.epoch} epochs; best epoch {result.state.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    from .grid import format_metrics
    from .model import prepare
    from .train import evaluate_examples, load_model

    model, vocab, _ = load_model(args.ckpt)
    data = load_dialogues(args.data, permissive=args.permissive)
    metrics = evaluate_examples(model, [prepare(d, vocab, model.config) for d in data])
    text = format_metrics(metrics)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_predict(args) -> int:
    from dataclasses import replace

    from .model import prepare
    from .train import load_model, predict_example

    model, vocab, _ = load_model(args.ckpt)
    data = load_dialogues(args.input, permissive=args.permissive)
    out = [
        replace(d, quadruples=tuple(predict_example(model, prepare(d, vocab, model.config, with_gold=False))), dropped_quadruples=0)
        for d in data
    ]
    dump_dialogues(out, args.output)
    print(f"wrote {len(out)} dialogues to {args.output}")
    return 0


def cmd_gen_synth(args) -> int:
    from .synth import gen_synthetic, split_dev
    from .train import write_manifest

    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
    data = gen_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, dev_set = split_dev(data, spec.dev_fraction)
    dump_dialogues(train_set, out / "train.jsonl")
    if dev_set:
        dump_dialogues(dev_set, out / "dev.jsonl")
    spec.save(out / "spec.txt")
    write_manifest(out)
    print(f"wrote {len(train_set)} train and {len(dev_set)} dev dialogues to {out}")
    return 0


def cmd_build_dag(args) -> int:
    dialogues = load_dialogues(args.input, permissive=True)
    if args.doc:
        dialogues = [d for d in dialogues if d.doc_id == args.doc]
        if not dialogues:
            print(f"no dialogue with doc_id {args.doc!r}", file=sys.stderr)
            return 2
    failures = 0
    dots = []
    for d in dialogues:
        td = decompose_threads(d)
        g = build_graph(d, td, args.window, args.variant)
        problems = validate_dag(g, d, td)
        for p in problems:
            print(f"{d.doc_id}: {p}", file=sys.stderr)
        failures += bool(problems)
        dots.append(export_dot(g, d))
        print(f"{d.doc_id}: {len(g.edges)} edges, {'ok' if not problems else f'{len(problems)} violations'}")
    if args.dot:
        Path(args.dot).write_text("".join(dots))
    return 1 if failures else 0


def cmd_check_grad(args) -> int:
    from .train import GRAD_CHECK_CONFIG, end_to_end_grad_check

    config = PipelineConfig.load(args.config) if args.config else GRAD_CHECK_CONFIG
    report: dict[str, float] = {}
    worst = end_to_end_grad_check(config, report=report)
    for name, err in sorted(report.items()):
        print(f"{err:.3e}  {name}")
    verdict = "PASS" if worst <= args.tolerance else "FAIL"
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g}): {verdict}")
    return 0 if worst <= args.tolerance else 1


def cmd_ablate(args) -> int:
    from .synth import gen_synthetic, split_dev
    from .train import format_table, run_ablation

    config = _config(args.config)
    if args.data:
        train_set, dev_set = _split(args)
    else:
        spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
        train_set, dev_set = split_dev(gen_synthetic(spec), spec.dev_fraction)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = run_ablation(config, train_set, dev_set, args.variants, seeds, out_dir=args.out, log=print)
    sys.stdout.write(format_table(rows))
    return 0


def cmd_decay_curve(args) -> int:
    from .drope import decay_curve, format_decay_table

    distances = range(0, args.max_distance + 1)
    rows = decay_curve(distances, args.theta_mic, args.theta_mac, args.rotary_dim, args.trials, args.seed)
    text = format_decay_table(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcda", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, required=True):
        p.add_argument("--data", required=required, help="jsonl file, json array or directory of json files")
        p.add_argument("--dev", help="separate dev set; otherwise --dev-fraction of --data is held out")
        p.add_argument("--dev-fraction", type=float, default=0.0)
        p.add_argument("--permissive", action="store_true", help="keep quadruples with missing elements")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    data_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--adjacency", help="external adjacency jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on gold data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--permissive", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted quadruples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--permissive", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-dag", help="build and validate utterance graphs")
    p.add_argument("--input", required=True)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--variant", choices=("tc", "standard", "reply"), default="tc")
    p.add_argument("--dot")
    p.add_argument("--doc", help="only this doc_id")
    p.set_defaults(func=cmd_build_dag)

    p = sub.add_parser("check-grad", help="end-to-end finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("ablate", help="train variants under shared seeds and tabulate")
    p.add_argument("--config")
    data_args(p, required=False)
    p.add_argument("--spec", help="synthetic spec used when --data is absent")
    p.add_argument("--variants", nargs="+", required=True,
                   help="names (full, wo-tcdag, wo-drope, wo-both, graph:tc|standard|reply, L=n, w=n) or table3/table5/table6")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("decay-curve", help="tabulate rotary score decay against distance")
    p.add_argument("--theta-mic", type=float, default=10000.0)
    p.add_argument("--theta-mac", type=float, default=100.0)
    p.add_argument("--rotary-dim", type=int, default=64)
    p.add_argument("--max-distance", type=int, default=32)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decay_curve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DialogueParseError, DialogueStructureError, GraphParameterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
