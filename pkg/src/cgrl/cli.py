"""``cgrl`` command-line entry point.

Exit codes: 0 success, 1 invalid input (bad flags, config, data), 2 runtime failure.
Every command validates its inputs before creating the output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import infotheory
from .errors import CGRLError, DivergenceError, FormatError, ParameterError
from .graph_data import dataset_stats, load_dataset
from .trainer import (
    TrainConfig,
    ablate,
    evaluate,
    export_embeddings,
    hyperparam_sweep,
    load_model,
    noise_sweep,
    save_model,
    train,
    write_json,
)

COMMANDS = ("train", "eval", "ablate", "noise-sweep", "hp-sweep", "theory-check", "stats", "export-emb")
FLAG_NAMES = ("nd", "ed", "ib")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got '{text}'")


def _flag_cell(text: str) -> tuple[bool, bool, bool]:
    """``nd,ib`` enables those components; ``none`` disables all."""
    names = [] if text.strip() == "none" else [v.strip() for v in text.split(",") if v.strip()]
    bad = sorted(set(names) - set(FLAG_NAMES))
    if bad:
        raise argparse.ArgumentTypeError(f"unknown component(s) {bad}; use nd, ed, ib or none")
    return tuple(n in names for n in FLAG_NAMES)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cgrl", description="Contrastive graph representation learning with learnable views.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--data", type=Path, help="dataset directory")
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: $CGRL_OUT or ./cgrl_out)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--num-seeds", type=int, default=3, help="seeds per cell in sweeps: seed, seed+1, ...")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--rates", type=_floats, help="edge-noise rates for noise-sweep")
    p.add_argument("--alphas", type=_floats, help="alpha grid for hp-sweep")
    p.add_argument("--betas", type=_floats, help="beta grid for hp-sweep")
    p.add_argument("--flags", type=_flag_cell, action="append",
                   help="ablation cell as enabled components, e.g. nd,ed or none; repeatable (default: all 8)")
    p.add_argument("--trials", type=int, default=500, help="trials per theory check")
    p.add_argument("--model", type=Path, help="saved model file for eval and export-emb")
    p.add_argument("--split", default="test", help="split evaluated by eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path: Path | None, seed: int | None) -> TrainConfig:
    d = {}
    if path is not None:
        try:
            text = path.read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno} (offset {exc.pos}): {exc.msg}") from exc
        if not isinstance(d, dict):
            raise FormatError(f"{path}: top-level JSON value must be an object")
    if seed is not None:
        d["seed"] = seed
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ParameterError(f"bad config value: {exc}") from exc


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} needs --{name.replace('_', '-')}")


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get("CGRL_OUT", "cgrl_out"))


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["\t".join(header)] + ["\t".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _seeds(args, cfg: TrainConfig) -> list[int]:
    if args.num_seeds < 1:
        raise ParameterError("--num-seeds must be >= 1")
    return list(range(cfg.seed, cfg.seed + args.num_seeds))


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"cgrl: error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"cgrl: runtime error: {exc}", file=sys.stderr)
        return 2
    except CGRLError as exc:
        print(f"cgrl: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"cgrl: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if args.jobs < 1:
        raise ParameterError("--jobs must be >= 1")

    if cmd == "theory-check":
        if args.trials < 1:
            raise ParameterError("--trials must be >= 1")
        out = _out_dir(args)
        report = infotheory.run_all(args.trials, args.seed or 0)
        out.mkdir(parents=True, exist_ok=True)
        write_json(report, out / "theory_report.json")
        print(json.dumps({"max_violation": report["max_violation"], "failures": len(report["failures"])}))
        return 0 if not report["failures"] else 2

    _require(args, "data")
    g = load_dataset(args.data)
    out = _out_dir(args)

    if cmd == "stats":
        st = dataset_stats(g).to_json()
        out.mkdir(parents=True, exist_ok=True)
        write_json(st, out / "stats.json")
        _write_tsv(out / "degree_hist.tsv", ["degree", "count"], [[k, v] for k, v in st["degree_histogram"].items()])
        _write_tsv(out / "class_hist.tsv", ["class", "count"], [[k, v] for k, v in st["class_histogram"].items()])
        return 0

    if cmd in ("eval", "export-emb"):
        _require(args, "model")
        if not args.model.is_file():
            raise FormatError(f"model file not found: {args.model}")
        model = load_model(args.model)
        if cmd == "eval":
            acc = evaluate(model, g, args.split)
            out.mkdir(parents=True, exist_ok=True)
            write_json({"split": args.split, "accuracy": acc}, out / "eval.json")
            print(json.dumps({"accuracy": acc}))
        else:
            out.mkdir(parents=True, exist_ok=True)
            export_embeddings(model, g, out / "embeddings.tsv")
        return 0

    cfg = load_config(args.config, args.seed)

    if cmd == "train":
        start = time.perf_counter()
        model, metrics = train(cfg, g)
        out.mkdir(parents=True, exist_ok=True)
        doc = metrics.to_json()
        doc["wall_clock_seconds"] = time.perf_counter() - start
        write_json(doc, out / "metrics.json")
        save_model(model, out / "model.pt")
        print(json.dumps(metrics.final))
        return 0

    if cmd == "ablate":
        seeds = _seeds(args, cfg)
        rows = ablate(cfg, g, args.flags, seeds, jobs=args.jobs)
        out.mkdir(parents=True, exist_ok=True)
        write_json({"config": cfg.to_dict(), "rows": rows}, out / "ablation.json")
        _write_tsv(out / "ablation.tsv", ["use_nd", "use_ed", "use_ib", "mean", "std"],
                   [[int(r["use_nd"]), int(r["use_ed"]), int(r["use_ib"]), r["mean"], r["std"]] for r in rows])
        return 0

    if cmd == "noise-sweep":
        _require(args, "rates")
        seeds = _seeds(args, cfg)
        curves = noise_sweep(cfg, g, args.rates, seeds, jobs=args.jobs)
        out.mkdir(parents=True, exist_ok=True)
        write_json({"config": cfg.to_dict(), **curves}, out / "curves.json")
        rows = [[name, curves["betas"][name], pt["rate"], pt["mean"], pt["std"]]
                for name, pts in curves["curves"].items() for pt in pts]
        _write_tsv(out / "curves.tsv", ["series", "beta", "rate", "mean", "std"], rows)
        return 0

    if cmd == "hp-sweep":
        _require(args, "alphas", "betas")
        seeds = _seeds(args, cfg)
        surface = hyperparam_sweep(cfg, g, args.alphas, args.betas, seeds, jobs=args.jobs)
        out.mkdir(parents=True, exist_ok=True)
        write_json({"config": cfg.to_dict(), **surface}, out / "surface.json")
        _write_tsv(out / "surface.tsv", ["alpha", "beta", "mean", "std"],
                   [[c["alpha"], c["beta"], c["mean"], c["std"]] for c in surface["cells"]])
        return 0

    raise UsageError(f"unhandled command {cmd}")  # pragma: no cover


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
