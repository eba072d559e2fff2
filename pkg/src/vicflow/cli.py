"""Command-line entry point: gen / train / sweep / verify.

This is the only module that writes files.  Exit codes: 0 ok, 1 usage,
2 config, 3 runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint
from .config import ExperimentSpec, SpecError, build_spec, dump_spec, parse_spec
from .evaluator import VARIANTS, SweepRunner, curve_files, results_csv
from .pipeline import ModelBundle, prepare
from .scene import ConfigError, load_scenario, scenario_files, simulate
from .trainer import TrainingError, train_bundle

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
CHECKPOINT_NAME = "bundle.cfwt"


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(message)


def _load_spec(args) -> ExperimentSpec:
    if args.spec:
        try:
            text = Path(args.spec).read_text()
        except OSError as e:
            raise SpecError(f"cannot read spec: {e}") from e
        spec = parse_spec(text)
    else:
        spec = build_spec({"seed": 0})
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    return spec


def _stamp(spec: ExperimentSpec) -> str:
    return f"spec_hash={spec.hash} seed={spec.seed}"


def _write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)


def cmd_gen(spec: ExperimentSpec, out: Path) -> None:
    meta = {"spec_hash": spec.hash, "seed": spec.seed}
    for split, seeds in (("train", spec.train_seeds()), ("test", spec.test_seeds())):
        for k, s in enumerate(seeds):
            scen = simulate(spec.world_config(s))
            for name, data in scenario_files(scen, {**meta, "scenario_seed": s}).items():
                _write(out / split / f"scenario_{k:03d}" / name, data)
    _write(out / "spec.yaml", f"# {_stamp(spec)}\n" + dump_spec(spec))


def _load_split(root: Path, split: str, spec: ExperimentSpec) -> list:
    dirs = sorted(p for p in (root / split).glob("scenario_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no scenarios under {root / split}")
    cfg = spec.model_config()
    return [prepare(load_scenario(d), cfg) for d in dirs]


def cmd_train(spec: ExperimentSpec, scenarios: Path, out: Path) -> None:
    data = _load_split(scenarios, "train", spec)
    bundle = ModelBundle(spec.model_config())
    tlog = train_bundle(bundle, data, spec.train_config())
    buf = bundle.to_bytes()
    _write(out / CHECKPOINT_NAME, buf)
    _write(out / "checkpoint.json", json.dumps({"spec_hash": spec.hash, "seed": spec.seed,
                                                "sha256": checkpoint.digest(buf)}, indent=1) + "\n")
    _write(out / "train_log.csv", f"# {_stamp(spec)}\n" + tlog.to_csv())


def cmd_sweep(spec: ExperimentSpec, scenarios: Path, ckpt: Path, out: Path,
              variants: Sequence[str], latencies: Sequence[int]) -> list:
    buf = ckpt.read_bytes()
    bundle = ModelBundle(spec.model_config())
    bundle.load_bytes(buf)
    data = _load_split(scenarios, "test", spec)
    runner = SweepRunner(bundle, data, spec.eval)
    kw = {"per_byte_cost": spec.channel.per_byte_cost} if spec.channel.per_byte_cost else None
    rows = runner.run(variants, latencies, spec.channel.seed, kw)
    stamp = _stamp(spec)
    _write(out / "results.csv", results_csv(rows, stamp))
    for variant, text in curve_files(rows, stamp).items():
        _write(out / f"curve_{variant}.dat", text)
    for (variant, lat), tlog in runner.logs.items():
        _write(out / "transmissions" / f"{variant}_{lat}ms.csv", f"# {stamp}\n" + tlog.to_csv())
    return rows


def cmd_verify(spec: ExperimentSpec) -> bool:
    from .verify import run_all

    print(f"# {_stamp(spec)}")
    return run_all()


def _csv_list(text: str, cast) -> list:
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise UsageFailure(f"bad list {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vicflow", description="Latency-compensated cooperative detection experiments")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name in ("gen", "train", "sweep", "verify"):
        sp = sub.add_parser(name)
        sp.add_argument("--spec", help="YAML experiment spec")
        sp.add_argument("--seed", type=int, help="overrides the spec seed")
        if name != "verify":
            sp.add_argument("--out", required=True, help="output directory")
        if name in ("train", "sweep"):
            sp.add_argument("--scenarios", required=True, help="directory written by 'gen'")
        if name == "sweep":
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
            sp.add_argument("--latencies", help="comma-separated latencies in ms")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        spec = _load_spec(args)
        if args.cmd == "gen":
            cmd_gen(spec, Path(args.out))
        elif args.cmd == "train":
            cmd_train(spec, Path(args.scenarios), Path(args.out))
        elif args.cmd == "sweep":
            variants = _csv_list(args.variants, str) if args.variants else list(spec.sweep.variants)
            bad = [v for v in variants if v not in VARIANTS]
            if bad:
                raise UsageFailure(f"unknown variants {bad}")
            lats = _csv_list(args.latencies, int) if args.latencies else list(spec.sweep.latencies_ms)
            if any(x < 0 for x in lats):
                raise UsageFailure("latencies must be non-negative")
            cmd_sweep(spec, Path(args.scenarios), Path(args.checkpoint), Path(args.out), variants, lats)
        elif args.cmd == "verify":
            if not cmd_verify(spec):
                return EXIT_RUNTIME
        return EXIT_OK
    except UsageFailure as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SpecError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TrainingError, checkpoint.CheckpointFormatError, KeyError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
