"""``mage`` command-line entry point.

Exit codes: 0 ok, 1 usage, 2 no route, 3 plan validation failure,
4 execution or training failure, 5 I/O error. Diagnostics go to stderr;
machine-readable results go to stdout or to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .agent import (
    MODALITIES,
    MissingExecutorError,
    NoRoute,
    PlanningError,
    PlanParseError,
    RegistryError,
    Request,
    default_registry,
    execute,
    json_to_plan,
    load_registry,
    mock_executors,
    plan,
    plan_to_json,
    validate,
)
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetBundle, fnv1a64, gen_dataset, gen_instruction_set, write_dataset
from .ian import ConfigError, IanConfig
from .training import TrainConfig, TrainingError, build_model, model_from_checkpoint, read_metrics, run_stage

EXIT_OK, EXIT_USAGE, EXIT_NOROUTE, EXIT_INVALID, EXIT_FAILED, EXIT_IO = range(6)
BUDGETS = (64, 144, 256)

log = logging.getLogger("mage")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for NoRoute
        raise UsageError(f"{self.prog}: {message}")


def _modalities(text: str) -> list[str]:
    mods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in mods if m not in MODALITIES]
    if bad or not mods:
        raise argparse.ArgumentTypeError(f"expected a comma list of {', '.join(MODALITIES)}, got {text!r}")
    return mods


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _param(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mage", description="Desk-scale multimodal alignment pipeline and tool-planning agent.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        return sub.add_parser(name, help=help_, description=help_)

    g = cmd("gen-data", "Write a synthetic dataset (captions, instructions, tool plans) as JSONL.")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=256, help="caption and instruction samples each")
    g.add_argument("--side", type=int, default=48, help="image side in pixels (multiple of 3)")
    g.add_argument("--out", required=True, help="output JSONL path")

    t = cmd("train", "Run one training stage; writes checkpoint, metrics CSV and loss plot under --out.")
    t.add_argument("--config", help="JSON TrainConfig; flags override its values")
    t.add_argument("--seed", type=int)
    t.add_argument("--stage", type=int, choices=(1, 2, 3))
    t.add_argument("--steps", type=int)
    t.add_argument("--tokens", type=int, choices=BUDGETS, help="visual-token budget")
    t.add_argument("--data", help="dataset JSONL (default: generated from the seed)")
    t.add_argument("--init", help="checkpoint whose parameters seed this stage")
    t.add_argument("--resume", help="checkpoint to resume bit-exactly (parameters, optimizer, step)")
    t.add_argument("--out", required=True, help="output directory")

    gc = cmd("grad-check", "Finite-difference gradient check of every op and the full loss.")
    gc.add_argument("--seed", type=int, default=0)

    e = cmd("eval", "Ablation arms (full, no_ian, no_align, neither) over several seeds.")
    e.add_argument("--config", help="JSON TrainConfig used as the shared recipe")
    e.add_argument("--arm", action="append", help="arm name; repeat or comma-separate (default: all)")
    e.add_argument("--seed", type=int, default=0, help="first seed")
    e.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    e.add_argument("--steps", type=int)
    e.add_argument("--out", required=True, help="output directory")

    s = cmd("sweep", "Visual-token budget sweep with an identical recipe per budget.")
    s.add_argument("--config", help="JSON TrainConfig used as the shared recipe")
    s.add_argument("--tokens", type=_int_list, default=list(BUDGETS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True, help="output directory")

    pl = cmd("plan", "Plan a tool chain; canonical plan JSON goes to stdout (or --out).")
    pl.add_argument("--have", type=_modalities, required=True)
    pl.add_argument("--want", type=_modalities, required=True)
    pl.add_argument("--registry", help="registry JSON (default: built-in tools)")
    pl.add_argument("--param", type=_param, action="append", default=[], help="KEY=VALUE request parameter")
    pl.add_argument("--out", help="write the plan here instead of stdout")

    x = cmd("execute", "Validate and run a plan with mock executors; trace JSON goes to stdout.")
    x.add_argument("--plan", required=True, help="plan JSON file")
    x.add_argument("--registry", help="registry JSON (default: built-in tools)")
    x.add_argument("--have", type=_modalities, help="modalities the user supplies")
    x.add_argument("--fail-tool", action="append", default=[], help="make this tool's executor raise")
    x.add_argument("--workers", type=int, default=1)
    x.add_argument("--out", help="write the trace here instead of stdout")

    a = cmd("export-attn", "Write one SEB attention row as a P5 graymap plus a PNG preview.")
    a.add_argument("--checkpoint", help="trained checkpoint (default: freshly initialised model)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tokens", type=int, choices=BUDGETS)
    a.add_argument("--token-index", type=int, default=0)
    a.add_argument("--out", required=True, help="output .pgm path")
    return p


def _echo(config: dict) -> None:
    print(json.dumps(config, sort_keys=True, separators=(",", ":")), file=sys.stderr)


def _load_json(path: str) -> object:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _train_config(args, **overrides) -> TrainConfig:
    """Flags override config-file values, which override defaults."""
    base = _load_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(base, dict):
        raise ConfigError(f"{args.config}: config must be a JSON object")
    for key in ("seed", "stage", "steps"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    base.update({k: v for k, v in overrides.items() if v is not None})
    tokens = getattr(args, "tokens", None)
    if isinstance(tokens, int):
        from .evaluation import budget_config

        ian = IanConfig.from_dict(base.get("ian", {}))
        base["ian"] = budget_config(tokens, ian).to_dict()
    return TrainConfig.from_dict(base)


def _registry(path: str | None):
    return default_registry() if path is None else load_registry(path)


def cmd_gen_data(args) -> int:
    _echo({"command": "gen-data", "n": args.n, "out": args.out, "seed": args.seed, "side": args.side})
    from .agent import gen_plan_samples

    bundle = DatasetBundle(
        captions=gen_dataset(args.n, args.seed, args.side),
        instruct=gen_instruction_set(args.n, args.seed, args.side),
        plans=gen_plan_samples(default_registry(), args.seed, args.side),
    )
    buf = write_dataset(bundle.all(), args.out)
    print(json.dumps({"fnv1a64": f"{fnv1a64(buf):016x}", "records": len(bundle.all())}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(
        args,
        data=args.data,
        init_checkpoint=args.init,
        resume_from=args.resume,
        checkpoint_out=str(out / "checkpoint.mckpt"),
        metrics_out=str(out / "metrics.csv"),
    )
    _echo(cfg.to_dict())
    result = run_stage(cfg)
    from .plotting import plot_loss_curves

    plot_loss_curves(read_metrics(cfg.metrics_out), out / "loss.png", f"stage {cfg.stage}")
    if result.metrics:
        first, last = result.metrics[0].total, result.metrics[-1].total
        log.info("total loss %.6f -> %.6f", first, last)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import H, POINTS, TOLERANCE, format_table, run_gradcheck

    _echo({"command": "grad-check", "h": H, "points": POINTS, "seed": args.seed, "tolerance": TOLERANCE})
    rows = run_gradcheck(args.seed)
    print(format_table(rows))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_FAILED


def cmd_eval(args) -> int:
    from .evaluation import ARMS, SMALL_IAN, ablation_verdict, run_ablation, write_reports
    from .plotting import plot_reports

    arms = [a for spec in (args.arm or [",".join(ARMS)]) for a in spec.split(",") if a]
    unknown = sorted(set(arms) - set(ARMS))
    if unknown:
        raise UsageError(f"unknown arm(s) {unknown}; expected {sorted(ARMS)}")
    if args.config:
        base = _train_config(args)
    else:
        base = TrainConfig(ian=SMALL_IAN, steps=args.steps if args.steps is not None else 200)
    seeds = list(range(args.seed, args.seed + args.seeds))
    _echo({"arms": arms, "base": base.to_dict(), "command": "eval", "seeds": seeds})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = run_ablation(arms, seeds, base=base)
    write_reports(reports, out / "ablation.csv")
    plot_reports(reports, out / "ablation.png")
    v = ablation_verdict(reports)
    log.info("full beats no_align on %d/%d seeds; neither best on seeds %s", v.full_beats_no_align, v.seeds, v.neither_best_seeds)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .evaluation import token_sweep, write_reports
    from .plotting import plot_reports

    bad = [b for b in args.tokens if b not in BUDGETS]
    if bad:
        raise UsageError(f"token budgets must be among {BUDGETS}, got {bad}")
    base = _train_config(argparse.Namespace(config=args.config, seed=args.seed, steps=args.steps))
    _echo({"base": base.to_dict(), "budgets": sorted(args.tokens), "command": "sweep"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = token_sweep(args.tokens, seed=args.seed, base=base)
    write_reports(reports, out / "sweep.csv")
    plot_reports(reports, out / "sweep.png")
    return EXIT_OK


def cmd_plan(args) -> int:
    reg = _registry(args.registry)
    req = Request(frozenset(args.have), frozenset(args.want), dict(args.param))
    _echo({"command": "plan", "have": sorted(req.have), "params": dict(req.params),
           "registry": args.registry or "<builtin>", "want": sorted(req.want)})
    buf = plan_to_json(plan(req, reg))
    if args.out:
        Path(args.out).write_bytes(buf)
    else:
        sys.stdout.write(buf.decode("utf-8") + "\n")
    return EXIT_OK


def cmd_execute(args) -> int:
    reg = _registry(args.registry)
    _echo({"command": "execute", "fail_tool": sorted(args.fail_tool), "have": args.have, "plan": args.plan,
           "registry": args.registry or "<builtin>", "workers": args.workers})
    buf = Path(args.plan).read_bytes()
    violations = validate(buf, reg, args.have)
    if violations:
        for v in violations:
            print(f"invalid plan: {v}", file=sys.stderr)
        return EXIT_INVALID
    p = json_to_plan(buf)
    executors = mock_executors(reg)
    for name in args.fail_tool:
        def boom(params, _name=name):
            raise RuntimeError(f"{_name} failed (injected)")
        executors[name] = boom
    inputs = {m: f"{m}://input" for m in (args.have or [])}
    result = execute(p, reg, executors, inputs, max_workers=args.workers)
    doc = {
        "final": {str(k): v for k, v in sorted(result.final.items())},
        "trace": [vars(r) for r in result.trace],
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    for r in result.trace:
        if r.status == "failed":
            print(f"step {r.step_id} failed: {r.error}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_FAILED


def cmd_export_attn(args) -> int:
    from .evaluation import export_attention
    from .plotting import save_attention_png

    if args.checkpoint:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        cfg = {"checkpoint": args.checkpoint}
    else:
        tc = _train_config(argparse.Namespace(config=None, seed=args.seed, tokens=args.tokens), lm_warmup_steps=0)
        model = build_model(tc)
        cfg = {"ian": tc.ian.to_dict(), "seed": tc.seed}
    _echo(dict(cfg, command="export-attn", out=args.out, token_index=args.token_index))
    image = gen_dataset(1, args.seed, model.ian_cfg.image_side)[0].image
    img = export_attention(image, model, args.token_index, args.out)
    save_attention_png(img, Path(args.out).with_suffix(".png"))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "grad-check": cmd_grad_check,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plan": cmd_plan,
    "execute": cmd_execute,
    "export-attn": cmd_export_attn,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NoRoute as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOROUTE
    except PlanParseError as exc:
        print(f"invalid plan: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, MissingExecutorError, PlanningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (OSError, CheckpointError) as exc:
        name = getattr(exc, "filename", None)
        print(f"I/O error: {exc}" if name is None else f"I/O error: {name}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"I/O error: malformed JSON input: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, RegistryError, IndexError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
