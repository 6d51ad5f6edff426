"""Command-line entry point: ``hybridlab <command> ...``.

Exit status: 0 on success, 1 on a contract violation, 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from . import config as configmod
from .bench import compare_reports, run_decode_benches
from .data import TASK_KINDS, TaskSpec, gen_task
from .distill import distill_run, evaluate, train_supervised
from .errors import ConfigError, ContractError
from .hybrid import INITS, STRATEGIES, convert_model, plan_placement
from .model import init_teacher
from .seeding import deterministic_mode, substream

EXIT_OK, EXIT_CONTRACT, EXIT_INPUT = 0, 1, 2


def _write(path: str, text: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------- commands
def cmd_train_teacher(args) -> int:
    cfg = configmod.load(args.config)
    data = gen_task(cfg.task)
    model = init_teacher(cfg.model, substream(cfg.teacher.seed, "teacher.init"), np.dtype(cfg.output.dtype))
    report = train_supervised(model, data.train, data.eval, cfg.teacher)
    model.meta = {"task": cfg.task.kind, "seed": cfg.teacher.seed, "steps": cfg.teacher.total_steps}
    checkpoint.save(model, args.out)
    if args.report:
        _write(args.report, report.to_jsonl(include_timing=not deterministic_mode()))
    _print({"checkpoint": args.out, "eval_ce": report.final_eval_ce, "eval_acc": report.final_eval_acc})
    return EXIT_OK


def cmd_convert(args) -> int:
    teacher = checkpoint.load(args.teacher)
    if teacher.mamba_positions:
        raise ContractError("convert expects an all-attention teacher checkpoint")
    plan = plan_placement(teacher.n_layers, args.ratio, args.strategy, allow_empty=True)
    student = convert_model(teacher, plan, args.init, substream(args.seed, "convert"))
    student.meta = {"seed": args.seed, "teacher": os.path.basename(args.teacher)}
    checkpoint.save(student, args.out)
    _print({"checkpoint": args.out, "plan": list(plan.mamba_positions), "init": args.init})
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = configmod.load(args.config)
    teacher, student = checkpoint.load(args.teacher), checkpoint.load(args.student)
    data = gen_task(cfg.task)
    report = distill_run(teacher, student, data.train, data.eval, cfg.distill)
    checkpoint.save(student, args.out)
    if args.report:
        _write(args.report, report.to_jsonl(include_timing=not deterministic_mode()))
    _print({"checkpoint": args.out, "eval_ce": report.final_eval_ce, "eval_acc": report.final_eval_acc})
    return EXIT_OK


def _task_spec(args) -> TaskSpec:
    if args.config:
        spec = configmod.load(args.config).task
    else:
        spec = TaskSpec()
    overrides = {k: getattr(args, k) for k in ("kind", "seq_len", "vocab_size", "seed", "n_eval") if getattr(args, k) is not None}
    return TaskSpec(**{**spec.__dict__, **overrides})


def cmd_eval(args) -> int:
    model = checkpoint.load(args.model)
    spec = _task_spec(args)
    data = gen_task(spec)
    ce, acc = evaluate(model, data.eval)
    _print({"model": args.model, "task": spec.kind, "eval_ce": ce, "eval_acc": acc})
    return EXIT_OK


def cmd_bench(args) -> int:
    paths = {"candidate": args.model, **({"baseline": args.baseline} if args.baseline else {})}
    tags = {role: os.path.splitext(os.path.basename(path))[0] for role, path in paths.items()}
    if len(set(tags.values())) < len(tags):
        tags = {role: f"{role}:{tag}" for role, tag in tags.items()}
    models = {tags[role]: checkpoint.load(path) for role, path in paths.items()}
    by_tag = run_decode_benches(models, args.prompt_len, args.lengths, args.repeats, args.warmup)
    reports = {role: by_tag[tags[role]] for role in paths}
    stem = args.out
    csv = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports.values()))
    _write(stem + ".csv", csv)
    summary = {role: json.loads(r.to_json()) for role, r in reports.items()}
    if "baseline" in reports:
        cmp = compare_reports(reports["baseline"], reports["candidate"])
        summary["comparison"] = cmp.plot_data()
        _write(stem + ".plot.json", json.dumps(cmp.plot_data(), indent=2, sort_keys=True) + "\n")
        print(cmp.table())
    _write(stem + ".json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for r in reports.values():
        for p in r.points:
            print(f"{r.tag:>16} length={p.length:<6d} tps={p.tokens_per_second:10.1f} cache_bytes={p.cache_bytes}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CONTRACT


def cmd_config(args) -> int:
    if args.check:
        cfg = configmod.load(args.check)
        sys.stdout.write(cfg.to_text())
    else:
        sys.stdout.write(configmod.describe_keys())
    return EXIT_OK


# ------------------------------------------------------------------- parser
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridlab", description="Distil attention layers of a small transformer into Mamba-2 layers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-teacher", help="train an all-attention teacher")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--report", help="JSONL training report path")
    s.set_defaults(fn=cmd_train_teacher)

    s = sub.add_parser("convert", help="replace a fraction of teacher layers with Mamba-2")
    s.add_argument("--teacher", required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--strategy", choices=STRATEGIES, default="evenly")
    s.add_argument("--init", choices=INITS, default="transfer")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_convert)

    s = sub.add_parser("distill", help="distil a teacher into a converted student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="distilled student checkpoint")
    s.add_argument("--report", help="JSONL training report path")
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("eval", help="eval CE and accuracy on a task")
    s.add_argument("--model", required=True)
    s.add_argument("--config", help="take the task section from this config")
    s.add_argument("--task", dest="kind", choices=TASK_KINDS)
    s.add_argument("--seq-len", type=int)
    s.add_argument("--vocab-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-eval", type=int)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="decode throughput and cache size versus length")
    s.add_argument("--model", required=True)
    s.add_argument("--baseline", help="second checkpoint to compare against (usually the teacher)")
    s.add_argument("--lengths", type=_ints, default=[128, 512, 2048])
    s.add_argument("--prompt-len", type=int, default=8)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--out", default="bench", help="output stem for .csv/.json/.plot.json")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("verify", help="run the oracle suites")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("config", help="print documented keys, or canonicalise a config file")
    s.add_argument("--check", metavar="PATH")
    s.set_defaults(fn=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
