"""Command-line entry point: ``train``, ``eval``, ``bench``, ``verify``, ``synth``.

Settings come from an optional TOML file with ``[model]``, ``[train]``,
``[bench]`` and ``[synth]`` tables; flags override the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .config import BenchConfig, ConfigError, ModelConfig, TrainConfig, load_toml
from .data import (SyntheticSpec, evaluate, leave_last_out, load_interactions,
                   synthesize_periodic, write_interactions, write_remap)
from .model import FuXiLinear, load_checkpoint, save_checkpoint
from .runtime import bench
from .training import train
from .verify import run_suites

log = logging.getLogger("fuxi_linear")

_PRECISION = {"f32": "float32", "f64": "float64", "float32": "float32", "float64": "float64"}


def _load_sections(path) -> dict:
    if not path:
        return {}
    doc = load_toml(path)
    unknown = set(doc) - {"model", "train", "bench", "synth"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _synth_spec(section: dict, args) -> SyntheticSpec:
    spec = dict(section)
    for flag, key in (("users", "users"), ("items", "items"), ("length", "interactions_per_user"),
                      ("period", "period"), ("noise", "noise"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            spec[key] = value
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    if set(spec) - known:
        raise ConfigError(f"unknown synth options: {sorted(set(spec) - known)}")
    return SyntheticSpec(**spec)


def _histories(doc: dict, data_path: str):
    """Histories and vocabulary size from a CSV, or synthetic data when no path is set."""
    if data_path:
        histories, remap = load_interactions(data_path)
        return histories, len(remap) + 1
    ds = synthesize_periodic(SyntheticSpec(**doc.get("synth", {})))
    return ds.histories, ds.vocab


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = _load_sections(args.config)
    ds = synthesize_periodic(_synth_spec(doc.get("synth", {}), args))
    write_interactions(ds.histories, args.csv)
    summary = {"csv": args.csv, "users": len(ds.histories),
               "interactions": int(sum(len(h) for h in ds.histories)),
               "spec": dataclasses.asdict(ds.spec)}
    if args.remap:
        write_remap({i: i for i in range(1, ds.spec.items + 1)}, args.remap)
    _emit(summary, args.out)
    return 0


def cmd_train(args) -> int:
    doc = _load_sections(args.config)
    tcfg = TrainConfig.from_dict(doc.get("train", {}))
    over = {k: v for k, v in (("steps", args.steps), ("seed", args.seed), ("lr", args.lr),
                              ("batch_size", args.batch_size), ("data", args.data))
            if v is not None}
    tcfg = dataclasses.replace(tcfg, **over)
    histories, vocab = _histories(doc, tcfg.data)
    mcfg = ModelConfig.from_dict({**doc.get("model", {}), "vocab": vocab, "seed": tcfg.seed})
    if args.precision:
        mcfg = mcfg.replace(precision=_PRECISION[args.precision])
    train_set, test_set = leave_last_out(histories, mcfg.n)
    model = FuXiLinear(mcfg)
    losses = train(model, train_set, tcfg)
    save_checkpoint(model, args.checkpoint)
    report = {"checkpoint": args.checkpoint, "steps": tcfg.steps,
              "initial_loss": losses[0] if losses else None,
              "final_loss": losses[-1] if losses else None,
              "train_sequences": len(train_set)}
    if args.eval and test_set:
        report["eval"] = evaluate(model, test_set).to_dict()
    _emit(report, args.out)
    return 0


def cmd_eval(args) -> int:
    doc = _load_sections(args.config)
    model = load_checkpoint(args.checkpoint)
    data = args.data or TrainConfig.from_dict(doc.get("train", {})).data
    histories, vocab = _histories(doc, data)
    if vocab > model.config.vocab:
        raise ConfigError(f"data has {vocab - 1} items but the model knows {model.config.vocab - 1}")
    _, test_set = leave_last_out(histories, model.config.n)
    ks = tuple(int(k) for k in args.ks.split(","))
    _emit(evaluate(model, test_set, ks).to_dict(), args.out)
    return 0


def cmd_bench(args) -> int:
    doc = _load_sections(args.config)
    bcfg = BenchConfig.from_dict(doc.get("bench", {}))
    over = {k: v for k, v in (("lengths", args.lengths), ("repeats", args.repeats),
                              ("mode", args.mode), ("comparator", args.comparator))
            if v is not None}
    bcfg = dataclasses.replace(bcfg, **over)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if model.config.n <= max(bcfg.lengths):
            raise ConfigError("checkpoint capacity is below the longest bench length")
    else:
        mcfg = ModelConfig.from_dict(doc.get("model", {}))
        model = FuXiLinear(mcfg.replace(n=max(mcfg.n, max(bcfg.lengths) + 1)))
    rep = bench(model, bcfg.lengths, bcfg.repeats, bcfg.mode, bcfg.comparator, bcfg.warmup)
    _emit(rep.to_dict(), args.out)
    return 0


def cmd_verify(args) -> int:
    doc = _load_sections(args.config)
    cfg = ModelConfig.from_dict(doc["model"]) if "model" in doc else None
    precision = _PRECISION[args.precision]
    report = run_suites(cfg, precision, args.seed)
    for r in report.results:
        print(r.line())
    print("verify:", "PASS" if report.passed else "FAIL")
    if args.checkpoint:
        model_cfg = (cfg or ModelConfig()).replace(precision="float32", seed=args.seed)
        save_checkpoint(FuXiLinear(model_cfg), args.checkpoint)
    if args.out:
        _emit(report.to_dict(), args.out)
    return 0 if report.passed else 1


# -- parser ------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fuxi-linear", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp):
        sp.add_argument("--config", help="TOML settings file")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")

    s = sub.add_parser("train", help="train on a CSV log (or synthetic data) and save a checkpoint")
    common(s)
    s.add_argument("--data", help="interactions CSV (user,item,timestamp)")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--precision", choices=sorted(_PRECISION))
    s.add_argument("--checkpoint", default="model.fxln", help="checkpoint output path")
    s.add_argument("--eval", action="store_true", help="also report held-out metrics")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="leave-last-out ranking metrics for a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="interactions CSV")
    s.add_argument("--ks", default="10,50", help="comma-separated cutoffs")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="time prefill or decode across history lengths")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--lengths", type=_int_list)
    s.add_argument("--repeats", type=int)
    s.add_argument("--mode", choices=["prefill", "decode"])
    s.add_argument("--comparator", choices=["none", "quadratic"])
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("verify", help="run the invariant suites on fresh random weights")
    common(s)
    s.add_argument("--precision", default="f64", choices=sorted(_PRECISION))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint", help="also write the freshly initialized model here")
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("synth", help="write a synthetic periodic interaction log")
    common(s)
    s.add_argument("--csv", default="synthetic.csv", help="interactions CSV output path")
    s.add_argument("--remap", help="also write an identity raw_id,dense_id table")
    s.add_argument("--users", type=int)
    s.add_argument("--items", type=int)
    s.add_argument("--length", type=int, help="interactions per user")
    s.add_argument("--period", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"fuxi-linear {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
