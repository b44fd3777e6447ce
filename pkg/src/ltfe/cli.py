"""Command-line entry point.

Every subcommand prints one JSON document to stdout that starts with the
fully resolved configuration. Exit codes: 0 success, 2 usage or input
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import ltf1, pipeline
from .errors import FormatError, LTFEError, NumericalError
from .gradcheck import run_suite
from .liquid import evolve_kernels, horizon
from .perturb import InjectionStrategy, evolve_sequence, schedule_at, step_plan, trajectory_stats
from .temporal import encode_sequence

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
SEEDED = ("train", "infer", "benchmark")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field; dotted keys reach into the schedule")
    common.add_argument("--input", type=Path)
    common.add_argument("--out", type=Path)
    common.add_argument("--strategy", choices=[s.value for s in InjectionStrategy])
    common.add_argument("--literal-eq1", action="store_true", default=None,
                        help="add the blur kernel itself instead of blurred noise")
    common.add_argument("--include-positive", action="store_true", default=None,
                        help="include the positive pair in the contrastive denominator")
    common.add_argument("--infer-T", dest="infer_T", type=int)

    parser = _Parser(prog="ltfe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("schedule", parents=[common], help="alpha_t and sigma_t table")
    sub.add_parser("evolve", parents=[common], help="perturb an LTF1 feature map for T steps")
    p = sub.add_parser("kernels", parents=[common], help="horizons and kernel norms per step")
    p.add_argument("--model", type=Path, help="checkpoint directory (default: fresh initialization)")
    sub.add_parser("gradcheck", parents=[common], help="central-difference check of every module")
    sub.add_parser("train", parents=[common], help="train on synthetic source scenes")
    p = sub.add_parser("infer", parents=[common], help="classify proposals of held-out scenes")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--knob", type=float, default=0.0)
    p.add_argument("--count", type=int, default=10)
    p = sub.add_parser("benchmark", parents=[common], help="shifted-domain accuracy of LTFE vs baseline")
    p.add_argument("--model", type=Path, help="LTFE checkpoint (default: train one)")
    p.add_argument("--baseline", type=Path, help="baseline checkpoint (default: train one)")
    p.add_argument("--knobs", default="0,0.5", help="comma separated domain knobs; empty for none")
    p.add_argument("--eval-seeds", type=int, default=10)
    p.add_argument("--count", type=int, default=50)
    return parser


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise FileNotFoundError(2, "No such file", str(path))
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def resolve_config(args, base: dict | None = None) -> pipeline.TrainConfig:
    """Defaults < ``base`` < config file < ``--set`` < dedicated flags."""
    d = dict(base or {})
    if args.config is not None:
        file_cfg = _read_json(args.config)
        if "schedule" in file_cfg and "schedule" in d and isinstance(file_cfg["schedule"], dict):
            file_cfg = {**file_cfg, "schedule": {**d["schedule"], **file_cfg["schedule"]}}
        d.update(file_cfg)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        value = _parse_value(value)
        if "." in key:
            head, _, tail = key.partition(".")
            if head != "schedule" or "." in tail:
                raise UsageError(f"unknown nested key {key!r}")
            d["schedule"] = {**d.get("schedule", {}), tail: value}
        else:
            d[key] = value
    for name in ("seed", "strategy", "literal_eq1", "include_positive", "infer_T"):
        value = getattr(args, name)
        if value is not None:
            d[name] = value
    return pipeline.TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _need(args, name):
    if getattr(args, name) is None:
        raise UsageError(f"{args.command} requires --{name.replace('_', '-')}")
    return getattr(args, name)


def _read_tensor(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(2, "No such file", str(path))
    return ltf1.read(path)


def _load_model(path: Path):
    for name in ("model.json", "model.ltf"):
        if not (path / name).is_file():
            raise FileNotFoundError(2, "No such file", str(path / name))
    return pipeline.load_checkpoint(path)


def cmd_schedule(args, cfg):
    s = cfg.schedule
    rows = []
    for t in range(1, s.T + 1):
        alpha, sigma = schedule_at(s, t)
        rows.append({"t": t, "alpha": alpha, "sigma": sigma})
    plans = {k.value: [{"alpha": a, "sigma": g} for a, g in step_plan(s, k)] for k in InjectionStrategy}
    return {"rows": rows, "plans": plans}


def cmd_evolve(args, cfg):
    f0 = _read_tensor(_need(args, "input"))
    if f0.ndim != 3:
        raise UsageError(f"{args.input}: expected an h×w×c feature map, got shape {f0.shape}")
    seq = evolve_sequence(f0, cfg.schedule, cfg.strategy, np.random.default_rng(cfg.seed),
                          cfg.padding, cfg.literal_eq1)
    stats = trajectory_stats(f0, seq)
    files = []
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(seq, start=1):
            path = args.out / f"step_{t:02d}.ltf"
            ltf1.write(path, f.data)
            files.append(str(path))
        (args.out / "trajectory.json").write_text(json.dumps(stats, indent=2) + "\n")
    return {"trajectory": stats, "snapshots": files}


def cmd_kernels(args, cfg):
    rng = np.random.default_rng(cfg.seed)
    if args.model is not None:
        model, _ = _load_model(args.model)
    else:
        model = pipeline.init_model(cfg, rng)
    if args.input is not None:
        image = _read_tensor(args.input)
    else:
        image = pipeline.make_scene(rng, cfg.image_size, cfg.image_channels, cfg.proposals,
                                    cfg.num_classes).image
    with dc.no_grad():
        b = pipeline._Bound.of(model)
        f0 = pipeline.extract(b, image, cfg)
        seq = evolve_sequence(f0, cfg.schedule, cfg.strategy, rng, cfg.padding, cfg.literal_eq1)
        enc = encode_sequence(seq, b.lstm, b.fusion)
        ks = evolve_kernels(enc, b.field, b.w0, cfg.ode)
        taus = [horizon(enc, t, cfg.ode).item() for t in range(1, len(enc) + 1)]
    w0 = b.w0.weights.data
    rows = [{"t": t, "tau_hat": tau, "encoding_norm": float(np.linalg.norm(h.data)),
             "kernel_norm": float(np.linalg.norm(k.weights.data)),
             "delta_norm": float(np.linalg.norm(k.weights.data - w0))}
            for t, (tau, h, k) in enumerate(zip(taus, enc.encodings, ks), start=1)]
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        for r, k in zip(rows, ks):
            ltf1.write(args.out / f"kernel_{r['t']:02d}.ltf", k.weights.data)
    return {"kernels": rows}


def cmd_gradcheck(args, cfg):
    report = run_suite(cfg, cfg.seed)
    if not report["passed"]:
        raise NumericalError(f"gradient check above {report['threshold']}: {report['modules']}")
    return report


def cmd_train(args, cfg):
    out = _need(args, "out")
    rejected = []
    model, rows = pipeline.train(cfg, on_reject=rejected.append)
    if not rows:
        raise NumericalError("every training step was rejected")
    pipeline.save_checkpoint(model, out, cfg)
    (out / "metrics.csv").write_text(pipeline.metrics_csv(rows))
    return {"checkpoint": str(out), "steps": len(rows) + len(rejected), "rejected": rejected,
            "final": rows[-1]}


def cmd_infer(args, cfg):
    model, _ = args.loaded
    if args.count < 1:
        raise UsageError("--count must be positive")
    scenes = pipeline.heldout_scenes(cfg, cfg.seed, args.knob, args.count)
    rng = np.random.default_rng(cfg.seed)
    results, hits, total = [], 0, 0
    for i, s in enumerate(scenes):
        r = pipeline.infer(model, s, cfg, rng)
        hits += int((r["predictions"] == s.labels).sum())
        total += len(s.labels)
        results.append({"scene": i, "tau_hat": r["tau_hat"], "labels": s.labels.tolist(),
                        "predictions": r["predictions"].tolist(), "scores": r["scores"].tolist(),
                        "boxes": r["boxes"].tolist()})
    return {"knob": args.knob, "accuracy": 100.0 * hits / total, "scenes": results}


def _parse_knobs(text: str) -> list[float]:
    try:
        return [float(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(f"--knobs: {exc}") from exc


def cmd_benchmark(args, cfg):
    knobs = _parse_knobs(args.knobs)
    if args.eval_seeds < 0 or args.count < 1:
        raise UsageError("--eval-seeds must be >= 0 and --count positive")
    ltfe_model = _load_model(args.model)[0] if args.model else pipeline.train(cfg)[0]
    base_cfg = cfg.replace(evolution=False)
    base_model = _load_model(args.baseline)[0] if args.baseline else pipeline.train(base_cfg)[0]
    seeds = list(range(cfg.seed, cfg.seed + args.eval_seeds)) if knobs else []
    table = pipeline.benchmark(ltfe_model, base_model, knobs, seeds, cfg, base_cfg, args.count)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "benchmark.csv").write_text(pipeline.benchmark_csv(table, seeds))
    return {"knobs": knobs, "seeds": seeds,
            "table": [{**r, "per_seed": {str(k): v for k, v in r["per_seed"].items()}} for r in table]}


COMMANDS = {"schedule": cmd_schedule, "evolve": cmd_evolve, "kernels": cmd_kernels,
            "gradcheck": cmd_gradcheck, "train": cmd_train, "infer": cmd_infer,
            "benchmark": cmd_benchmark}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command in SEEDED and args.seed is None:
            raise UsageError(f"{args.command} requires --seed")
        base = None
        if args.command == "infer":
            args.loaded = _load_model(args.model)
            base = args.loaded[1]
        cfg = resolve_config(args, base)
        result = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, "missing_file", f"no such file: {exc.filename or exc}")
    except OSError as exc:
        return _fail(EXIT_USAGE, "io", f"{exc.filename}: {exc.strerror}")
    except FormatError as exc:
        return _fail(EXIT_USAGE, "format", str(exc))
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except (LTFEError, ValueError) as exc:
        return _fail(EXIT_USAGE, "invalid_argument", str(exc))
    print(json.dumps({"command": args.command, "config": cfg.to_dict(), **result}, indent=2))
    return EXIT_OK


def main() -> None:
    sys.exit(run())
