"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import pipeline as pl
from .config import METHODS, ExperimentConfig, default_config, load_config
from .errors import InvalidInputError, TrainingDivergedError
from .landscape import CurveKind, barrier_stats, lmc_scan
from .redteam import QraGenerator, qra_transfer
from .repro import RECIPES, run_recipe
from .report import RobustnessReport, write_json, write_qra_rows

log = logging.getLogger("bprl")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _threads() -> int:
    raw = os.environ.get("BPRL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise InvalidInputError(f"BPRL_THREADS must be a positive integer, got {raw!r}")
    return n


def _load(path: str, cfg: ExperimentConfig, tag: int = ckpt.TAG_CLASSIFIER):
    return ckpt.load(path, expected_hash=cfg.hash(), expected_tag=tag)


def _save(out: Path, name: str, model, role: str, cfg: ExperimentConfig, **kw) -> Path:
    return ckpt.save(out / f"{name}.bprl", model, role=role, seed=cfg.seed, config_hash=cfg.hash(), **kw)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    desk = pl.build_desk(cfg)
    clean = pl.train_clean(cfg, desk)
    bd = pl.train_backdoored(cfg, desk)
    _save(out, "clean", clean, "clean", cfg)
    _save(out, "backdoored", bd, "backdoored", cfg)
    rep = RobustnessReport(cfg.hash(), cfg.seed)
    for role, model in (("clean", clean), ("backdoored", bd)):
        r = desk.evaluate(model)
        rep.add(role, "O-Backdoor", r.c_acc, r.asr)
    rep.write(out, "train")
    print(rep.to_csv(), end="")
    return EXIT_OK


def cmd_purify(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    desk = pl.build_desk(cfg)
    bd = _load(args.checkpoint, cfg).model
    clean = _load(args.clean, cfg).model if args.clean else None
    extra = {}
    if args.method == "pam":
        model, rho = pl.purify_pam(cfg, desk, bd, clean)
        extra["rho"] = rho
    else:
        model = pl.purify(cfg, desk, bd, args.method)
    role = "ep" if args.method == "ep" else f"purified-{args.method}"
    _save(out, f"purified-{args.method}", model, role, cfg, extra=extra)
    rep = RobustnessReport(cfg.hash(), cfg.seed)
    r = desk.evaluate(model)
    rep.add(f"purified-{args.method}", "O-Robustness", r.c_acc, r.asr)
    rep.write(out, f"purify-{args.method}")
    print(rep.to_csv(), end="")
    return EXIT_OK


def _generator(meta: dict, model) -> QraGenerator:
    return QraGenerator(model, float(meta.get("epsilon", 16 / 255)), float(meta.get("alpha", 0.2)))


def cmd_attack(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if args.mode in ("qra", "qra-transfer") and not args.ep and not args.generator:
        raise InvalidInputError(f"--mode {args.mode} needs an EP surrogate checkpoint (--ep)")
    if args.mode == "qra-transfer" and not args.targets:
        raise InvalidInputError("--mode qra-transfer needs at least one --targets checkpoint")
    desk = pl.build_desk(cfg)
    purified = _load(args.checkpoint, cfg)
    source = purified.meta.get("role", Path(args.checkpoint).stem)
    if args.mode == "ra":
        retuned = pl.retune(cfg, desk, purified.model)
        _save(out, "retuned", retuned, "retuned", cfg, extra={"source": source})
        rep = RobustnessReport(cfg.hash(), cfg.seed)
        r = desk.evaluate(retuned)
        rep.add(source, "P-Robustness", r.c_acc, r.asr)
        rep.write(out, "attack-ra")
        print(rep.to_csv(), end="")
        return EXIT_OK
    if args.generator:
        g = _load(args.generator, cfg, ckpt.TAG_GENERATOR)
        gen = _generator(g.meta, g.model)
    else:
        ep = _load(args.ep, cfg).model
        gen = pl.train_generator(cfg, desk, purified.model, ep)
        _save(out, "generator", gen.mlp, "qra-generator", cfg, arch_tag=ckpt.TAG_GENERATOR,
              extra={"epsilon": gen.epsilon, "alpha": gen.alpha, "source": source})
    rows = []
    if args.mode == "qra":
        rows.append((source, source, desk.evaluate(purified.model).asr,
                     pl.qra_report(desk, gen, purified.model)))
    else:
        for path in args.targets:
            t = _load(path, cfg)
            name = t.meta.get("role", Path(path).stem)
            rows.append((source, name, desk.evaluate(t.model).asr,
                         qra_transfer(gen, t.model, desk.test, desk.backdoor_test, desk.target,
                                      purified.model)))
    write_qra_rows(out / f"attack-{args.mode}.csv", rows)
    print((out / f"attack-{args.mode}.csv").read_text(), end="")
    return EXIT_OK


def cmd_lmc(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    desk = pl.build_desk(cfg)
    a = _load(args.a, cfg)
    b = _load(args.b, cfg)
    if a.model.arch != b.model.arch:
        raise InvalidInputError("checkpoints have different architectures")
    kind = CurveKind(args.kind)
    data = desk.backdoor_test if kind is CurveKind.BACKDOOR else desk.test
    names = (a.meta.get("role", Path(args.a).stem), b.meta.get("role", Path(args.b).stem))
    curve = lmc_scan(a.model.params, b.model.params, a.model.arch, data, cfg.lmc.grid, kind, names,
                     workers=_threads())
    (out / f"lmc-{kind.value}.csv").write_text(curve.to_csv())
    write_json(out / f"lmc-{kind.value}.json",
               {"endpoints": list(names), "kind": kind.value, "grid": cfg.lmc.grid,
                "config_hash": cfg.hash(), "seed": cfg.seed, **barrier_stats(curve).as_dict()})
    print(curve.to_csv(), end="")
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = _config(args)
    out = run_recipe(args.recipe, cfg, args.out, _threads())
    print(f"wrote {args.recipe} bundle to {out}")
    return EXIT_OK


def cmd_default_config(args) -> int:
    print(default_config().to_json(), end="")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bprl", description="Backdoor purification robustness experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="experiment JSON (default: built-in desk config)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if out:
            p.add_argument("--out", default="runs", help="output directory")

    p = sub.add_parser("train", help="train clean and backdoored models")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("purify", help="purify a backdoored checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--clean", help="clean checkpoint for the PAM rho threshold (retrained if absent)")
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser("attack", help="retuning or query-based reactivation attack")
    common(p)
    p.add_argument("--checkpoint", required=True, help="purified checkpoint under attack")
    p.add_argument("--mode", choices=("ra", "qra", "qra-transfer"), required=True)
    p.add_argument("--ep", help="EP surrogate checkpoint (qra modes)")
    p.add_argument("--generator", help="reuse a trained generator checkpoint")
    p.add_argument("--targets", nargs="+", help="unseen purified checkpoints (qra-transfer)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("lmc", help="error along the segment between two checkpoints")
    common(p)
    p.add_argument("--a", required=True, help="checkpoint at t=0")
    p.add_argument("--b", required=True, help="checkpoint at t=1")
    p.add_argument("--kind", choices=[k.value for k in CurveKind], default="backdoor")
    p.set_defaults(func=cmd_lmc)

    p = sub.add_parser("repro", help="run a named experiment recipe")
    common(p)
    p.add_argument("--recipe", required=True, metavar="NAME",
                   help=f"one of: {', '.join(sorted(RECIPES))}")
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("default-config", help="print the built-in config as JSON")
    p.set_defaults(func=cmd_default_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"bprl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"bprl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        print(f"bprl: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
