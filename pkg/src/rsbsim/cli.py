"""Command-line interface.

    rsbsim assemble FILE            syntax-check a program, print stats
    rsbsim disassemble FILE         print the canonical listing
    rsbsim run FILE                 execute one program on one machine
    rsbsim scenario NAME            run a demonstration end to end
    rsbsim settings                 list every setting with its default

Every registry setting is also a flag: `sched.jitter` becomes
--sched-jitter, applied over --config FILE, applied over defaults.

Exit codes: 0 success; 1 a failed --check, a scenario that missed its
built-in expectation, or a program that faulted mid-run; 2 bad usage,
configuration or assembly input; 3 an I/O error reading or writing files.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .config import Config, ConfigError, REGISTRY, echo, parse_file
from .core import ExecutionError, Machine, run_sequential
from .isa import AssemblyError, assemble, disassemble
from .predictor import RsbVariant

SCENARIOS = ("triggers", "deep-chain", "context-switch", "stack-switch",
             "return-overwrite", "cross-process", "in-process")


def _add_registry_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("settings (see `rsbsim settings`)")
    for name, key in REGISTRY.items():
        group.add_argument(f"--{name.replace('.', '-')}",
                           dest=f"cfg:{name}", metavar="V",
                           help=argparse.SUPPRESS)
    parser.add_argument("--config", metavar="FILE",
                        help="key = value settings file")


def _build_config(args: argparse.Namespace) -> Config:
    cfg = Config()
    if getattr(args, "config", None):
        parse_file(args.config, into=cfg)
    for name in REGISTRY:
        raw = getattr(args, f"cfg:{name}", None)
        if raw is not None:
            cfg.set(name, raw)
    return cfg


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsbsim",
        description="return-stack speculation simulator and demonstrations")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble", help="syntax-check a program")
    p.add_argument("file")

    p = sub.add_parser("disassemble", help="print the canonical listing")
    p.add_argument("file")

    p = sub.add_parser("run", help="execute one program")
    p.add_argument("file")
    p.add_argument("--engine", choices=("sequential", "speculative"),
                   default="speculative",
                   help="architectural oracle or the full predicted core")
    p.add_argument("--max-steps", type=int, default=1_000_000)
    p.add_argument("--trace", metavar="FILE",
                   help="write speculation events to FILE ('-' for stdout)")
    p.add_argument("--check", action="store_true",
                   help="exit 1 unless the program stops at halt/exit")
    _add_registry_flags(p)

    p = sub.add_parser("scenario", help="run a demonstration")
    p.add_argument("name", choices=SCENARIOS)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--csv", metavar="FILE",
                   help="dump probe measurements (in-process only)")
    p.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="accepted for compatibility; trials always run "
                        "serially so reports stay deterministic")
    p.add_argument("--check", action="store_true",
                   help="exit 1 unless the report matches its built-in "
                        "expectation (leak succeeds, mitigation suppresses)")
    p.add_argument("--echo-config", action="store_true",
                   help="print the full settings before the report")
    _add_registry_flags(p)

    sub.add_parser("settings", help="list every setting with its default")
    return parser


def _read(path: str) -> str:
    with open(path) as fh:
        return fh.read()


def _cmd_assemble(args) -> int:
    program = assemble(_read(args.file))
    print(f"{args.file}: {len(program)} instructions, "
          f"{len(program.labels)} labels, {len(program.data)} data segments, "
          f"entry at {program.entry}")
    return 0


def _cmd_disassemble(args) -> int:
    sys.stdout.write(disassemble(assemble(_read(args.file))))
    return 0


def _print_regs(regs) -> None:
    live = {f"r{i}" if i < 16 else "sp": v
            for i, v in enumerate(regs.regs) if v}
    for name, value in live.items():
        print(f"  {name} = {value:#x}")


def _cmd_run(args) -> int:
    cfg = _build_config(args)
    program = assemble(_read(args.file))

    if args.engine == "sequential":
        if args.trace:
            print("rsbsim: note: the sequential engine does not speculate; "
                  "--trace ignored", file=sys.stderr)
        result = run_sequential(program, max_steps=args.max_steps)
        print(f"stopped: {result.reason} after {result.steps} instructions")
        _print_regs(result.regs)
        return 0 if not args.check or result.reason in ("halt", "exit") else 1

    m = Machine(program, core=cfg.core(), cache=cfg.cache(),
                rsb_size=cfg["rsb.size"],
                rsb_variant=RsbVariant.parse(cfg["rsb.variant"]),
                btb_size=cfg["btb.size"],
                trace=bool(args.trace))
    result = m.run(max_steps=args.max_steps)
    if args.trace:
        out = sys.stdout if args.trace == "-" else open(args.trace, "w")
        try:
            for ev in m.trace:
                extra = ""
                if ev.predicted is not None or ev.actual is not None:
                    extra = f" predicted={ev.predicted} actual={ev.actual}"
                print(f"cycle {ev.cycle:>8} depth {ev.depth} "
                      f"{ev.event:<12} pc={ev.pc}{extra}", file=out)
        finally:
            if out is not sys.stdout:
                out.close()
    print(f"stopped: {result.reason} after {result.steps} instructions, "
          f"{result.cycles} cycles")
    _print_regs(m.regs)
    return 0 if not args.check or result.reason in ("halt", "exit") else 1


def _trigger_reports(cfg: Config, which: str) -> list:
    """Run the requested misprediction demos (or all of them)."""
    from .scenarios import triggers

    variant = RsbVariant.parse(cfg["rsb.variant"])
    deep_kwargs = {"variant": variant}
    # the demo's own default (a 4-entry buffer against a 9-deep chain)
    # shows the wrap; only an explicit setting overrides it
    if cfg["rsb.size"] != REGISTRY["rsb.size"].default:
        deep_kwargs["rsb_size"] = cfg["rsb.size"]
    runners = {
        "deep-chain": lambda: triggers.run_deep_chain(**deep_kwargs),
        "context-switch": lambda: triggers.run_context_switch(
            kernel_rsb_pushes=cfg["sched.kernel_rsb_pushes"],
            variant=variant),
        "stack-switch": lambda: triggers.run_stack_switch(variant=variant),
        "return-overwrite": lambda: triggers.run_return_overwrite(
            variant=variant),
    }
    if which == "triggers":
        return [run() for run in runners.values()]
    return [runners[which]()]


def _cmd_scenario(args) -> int:
    from .scenarios import cross_process, in_process

    cfg = _build_config(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    if args.echo_config:
        sys.stdout.write(echo(cfg))
    name = args.name
    if name in ("triggers", "deep-chain", "context-switch", "stack-switch",
                "return-overwrite"):
        reports = _trigger_reports(cfg, name)
        print("\n\n".join(str(r) for r in reports))
        if args.check and not all(r.ok for r in reports):
            bad = ", ".join(r.name for r in reports if not r.ok)
            print(f"rsbsim: check failed: {bad}", file=sys.stderr)
            return 1
        return 0
    if name == "cross-process":
        report = cross_process.run_cross_process(
            engine="fast" if cfg["engine.fast"] else "reference",
            text=cfg["input.text"],
            sentences=cfg["input.sentences"],
            cadence_ms=cfg["input.cadence_ms"],
            start_ms=cfg["input.start_ms"],
            seed=args.seed,
            jitter=cfg["sched.jitter"],
            flush_rsb_on_switch=cfg["sched.flush_rsb_on_switch"],
            retpoline=cfg["harden.retpoline"],
            fence_after_call=cfg["harden.fence_after_call"],
            rsb_size=cfg["rsb.size"],
            rsb_variant=RsbVariant.parse(cfg["rsb.variant"]),
            quantum=cfg["sched.quantum"],
            kernel_rsb_pushes=cfg["sched.kernel_rsb_pushes"],
            cycles_per_ms=cfg["time.cycles_per_ms"],
            core=cfg.core(), cache=cfg.cache())
    else:  # in-process
        measurements = [] if args.csv else None
        core_keys = ("core.max_spec_depth", "core.max_spec_instructions",
                     "core.min_spec_on_hit")
        core_overridden = any(cfg[k] != REGISTRY[k].default for k in core_keys)
        report = in_process.run_in_process(
            secret=cfg["inproc.secret"],
            nbytes=cfg["inproc.nbytes"] or None,
            trials=cfg["inproc.trials"],
            flip_prob=cfg["noise.flip_prob"],
            mode=cfg["inproc.mode"],
            rsb_size=cfg["rsb.size"],
            variant=RsbVariant.parse(cfg["rsb.variant"]),
            a_depth=cfg["inproc.a_depth"],
            b_depth=cfg["inproc.b_depth"] or None,
            seed=args.seed,
            fence_after_call=cfg["harden.fence_after_call"],
            retpoline=cfg["harden.retpoline"],
            core=cfg.core() if core_overridden else None,
            cache=cfg.cache(),
            measurements=measurements)
        if args.csv:
            from .sidechannel import write_csv
            write_csv(args.csv, measurements)
            print(f"wrote {sum(len(m.readings) for m in measurements)} "
                  f"measurements to {args.csv}")
    if args.jobs > 1:
        print("rsbsim: note: trials run serially; --jobs accepted for "
              "compatibility only", file=sys.stderr)
    print(report)
    if args.check and not report.ok:
        print(f"rsbsim: check failed: {report.name} did not match its "
              f"built-in expectation", file=sys.stderr)
        return 1
    return 0


def _cmd_settings() -> int:
    width = max(len(name) for name in REGISTRY)
    for name in sorted(REGISTRY):
        key = REGISTRY[name]
        print(f"{name:<{width}}  {key.default!r:<24} {key.help}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _make_parser().parse_args(argv)
    try:
        if args.command == "assemble":
            return _cmd_assemble(args)
        if args.command == "disassemble":
            return _cmd_disassemble(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "scenario":
            return _cmd_scenario(args)
        return _cmd_settings()
    except (ConfigError, AssemblyError) as e:
        print(f"rsbsim: {e}", file=sys.stderr)
        return 2
    except ExecutionError as e:
        print(f"rsbsim: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"rsbsim: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
