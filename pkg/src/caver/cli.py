"""Batch command-line front end.

    caver forward    decode a feature pyramid into a saliency map
    caver cost       closed-form vs instrumented costs over a patch sweep
    caver check      randomised property / oracle suite
    caver dump-attn  export attention maps of one block
    caver synth      write seeded weights and features as CAVR directories

Settings come from built-in defaults, then a JSON file (``--config``), then
flags; later sources win.  A command either publishes its complete set of
files into ``--out`` or leaves a ``FAILURE.txt`` there, never a partial set.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import instrument
from .checks import CHECKS, FAULTS, run_checks
from .cost import crossover, dumps, format_table, instrument_forward, sweep_document
from .errors import CaverError, ConfigError
from .io import encode_cavr, encode_pgm
from .tipp import RESNET_CHANNELS, LevelSpec, TippConfig, pyramid, tipp_forward
from .weights import (
    feature_artifacts,
    init_weights,
    load_config,
    load_features,
    load_weights,
    repatch,
    synthetic_features,
    weight_artifacts,
)

DEFAULT_SEED = 42
DEFAULT_SWEEP = ((2, 2, 2, 2), (4, 4, 4, 4), (8, 8, 8, 8))
BLOCKS = {
    "imsa_rgb": "imsa_rgb",
    "imsa_dt": "imsa_dt",
    "imca_rgb": "imca/attn_rgb",
    "imca_dt": "imca/attn_dt",
    "cssa": "cssa",
}
CONFIG_KEYS = {
    "dim", "heads", "patch", "levels", "input_size", "channels", "ffn_hidden",
    "predictor_hidden", "seed", "inputs", "weights", "out", "sweep", "level",
    "block", "queries",
}


@dataclass
class RunConfig:
    mode: str
    model: TippConfig
    out: Path
    input_seed: int | None = None
    input_dir: Path | None = None
    weight_seed: int | None = None
    weight_dir: Path | None = None
    seed: int = DEFAULT_SEED
    sweep: tuple[tuple[int, ...], ...] = DEFAULT_SWEEP
    level: int | None = None
    block: str | None = None
    queries: tuple[int, ...] = (0,)
    fault: str | None = None
    only: tuple[str, ...] = ()


@dataclass
class Outcome:
    artifacts: dict[str, bytes] = field(default_factory=dict)
    text: str = ""
    ok: bool = True


# -- configuration -----------------------------------------------------------


def _int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).split(","))
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}") from None


def _source(spec, flag_dir: str | None, flag_seed: int | None, seed: int, what: str) -> tuple[int | None, Path | None]:
    """Resolve one of ``{"seed": n}`` / ``{"dir": path}``; flags win over the file."""
    if flag_dir:
        return None, Path(flag_dir)
    if flag_seed is not None or spec is None:
        return seed, None
    if not isinstance(spec, dict) or len(spec.keys() & {"seed", "dir"}) != 1 or spec.keys() - {"seed", "dir"}:
        raise ConfigError(f"{what} must specify exactly one of 'seed' or 'dir', got {spec!r}")
    return (int(spec["seed"]), None) if "seed" in spec else (None, Path(spec["dir"]))


def _levels(value) -> tuple[LevelSpec, ...]:
    out = []
    for item in value:
        out.append(LevelSpec.parse(item) if isinstance(item, str) else LevelSpec(*map(int, item)))
    return tuple(out)


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the JSON config file and flags; validate geometry."""
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(doc) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    seed = args.seed if args.seed is not None else int(doc.get("seed", DEFAULT_SEED))
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    input_seed, input_dir = _source(doc.get("inputs"), getattr(args, "inputs", None), args.seed, seed, "inputs")
    weight_seed, weight_dir = _source(doc.get("weights"), getattr(args, "weights", None), args.seed, seed, "weights")

    model = load_config(weight_dir) if weight_dir else TippConfig()
    merged = {k: doc[k] for k in ("dim", "heads", "patch", "levels", "input_size", "channels", "ffn_hidden", "predictor_hidden") if k in doc}
    for key in ("dim", "heads", "input_size"):
        if getattr(args, key, None) is not None:
            merged[key] = getattr(args, key)
    if getattr(args, "patch", None):
        merged["patch"] = _int_list(args.patch, "--patch")
    if isinstance(merged.get("patch"), str):
        merged["patch"] = _int_list(merged["patch"], "patch")

    levels = model.levels
    if "levels" in merged:
        levels = _levels(merged["levels"])
    elif "input_size" in merged or "channels" in merged:
        channels = tuple(merged.get("channels", [lv.channels for lv in model.levels] or RESNET_CHANNELS))
        size = int(merged.get("input_size", model.input_size[0]))
        levels = pyramid(size, size, channels)
    dim = int(merged.get("dim", model.dim))
    ffn_hidden = merged.get("ffn_hidden", model.ffn_hidden if dim == model.dim else None)
    model = TippConfig(
        dim=dim,
        heads=int(merged.get("heads", model.heads)),
        levels=levels,
        patch=tuple(int(p) for p in merged.get("patch", model.patch)),
        ffn_hidden=None if ffn_hidden is None else int(ffn_hidden),
        predictor_hidden=int(merged.get("predictor_hidden", model.predictor_hidden)),
    ).validate()

    sweep = DEFAULT_SWEEP
    if getattr(args, "sweep", None):
        sweep = tuple(_int_list(pt, "--sweep") for pt in args.sweep.split(";"))
    elif "sweep" in doc:
        sweep = tuple(tuple(int(p) for p in pt) for pt in doc["sweep"])
    if args.command == "cost":
        for pt in sweep:
            model.with_patch(pt).validate()

    level = getattr(args, "level", None) or doc.get("level")
    block = getattr(args, "block", None) or doc.get("block")
    queries = tuple(getattr(args, "query", None) or doc.get("queries", (0,)))

    return RunConfig(
        mode=args.command,
        model=model,
        out=Path(args.out or doc.get("out", "caver-out")),
        input_seed=input_seed,
        input_dir=input_dir,
        weight_seed=weight_seed,
        weight_dir=weight_dir,
        seed=seed,
        sweep=sweep,
        level=None if level is None else int(level),
        block=block,
        queries=tuple(int(q) for q in queries),
        fault=getattr(args, "inject_fault", None),
        only=tuple(getattr(args, "only", None) or ()),
    )


def prepare(rc: RunConfig):
    """Features and weights for a run, both matching ``rc.model``."""
    if rc.input_dir is not None:
        features = load_features(rc.input_dir, rc.model)
    else:
        features = synthetic_features(rc.model, rc.input_seed)
    if rc.weight_dir is not None:
        weights = load_weights(rc.weight_dir, replace(rc.model, patch=load_config(rc.weight_dir).patch))
    else:
        weights = init_weights(rc.model, rc.weight_seed)
    return features, repatch(weights, rc.model.patch)


def _summary(rc: RunConfig) -> bytes:
    m = rc.model
    doc = {
        "mode": rc.mode,
        "dim": m.dim,
        "heads": m.heads,
        "patch": list(m.patch),
        "levels": [str(lv) for lv in m.levels],
        "ffn_hidden": m.hidden,
        "predictor_hidden": m.predictor_hidden,
        "inputs": {"dir": str(rc.input_dir)} if rc.input_dir else {"seed": rc.input_seed},
        "weights": {"dir": str(rc.weight_dir)} if rc.weight_dir else {"seed": rc.weight_seed},
    }
    return (json.dumps(doc, indent=2) + "\n").encode()


# -- commands --------------------------------------------------------------


def cmd_forward(rc: RunConfig) -> Outcome:
    features, weights = prepare(rc)
    with instrument.probe() as pr:
        saliency = tipp_forward(features, rc.model, weights)
    h, w = saliency.shape[:2]
    return Outcome(
        artifacts={
            "saliency.cavr": encode_cavr(saliency),
            "saliency.pgm": encode_pgm(saliency, normalize="unit"),
            "trace.txt": ("\n".join(pr.trace) + "\n").encode(),
            "run.json": _summary(rc),
        },
        text=f"saliency map {h}x{w}, values in [{saliency.min():.6f}, {saliency.max():.6f}]\n",
    )


def cmd_cost(rc: RunConfig) -> Outcome:
    features, weights = prepare(rc)
    reports, crossings = [], []
    for pt in rc.sweep:
        reports.append(instrument_forward(rc.model.with_patch(pt), weights, features))
        crossings.append(crossover(rc.model.dim, rc.model.heads, pt[0]))
    doc = sweep_document(reports, crossings)
    return Outcome(
        artifacts={
            "cost.txt": format_table(reports, crossings, color=False).encode(),
            "cost.json": dumps(doc).encode(),
            "run.json": _summary(rc),
        },
        text=format_table(reports, crossings),
    )


def cmd_check(rc: RunConfig) -> Outcome:
    unknown = set(rc.only) - set(CHECKS)
    if unknown:
        raise ConfigError(f"unknown checks: {', '.join(sorted(unknown))}")
    results = run_checks(seed=rc.seed, fault=rc.fault, names=rc.only or None)
    artifacts, lines = {}, []
    for r in results:
        lines.append(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<26} {r.detail}  ({r.seconds:.2f}s)")
        for key, arr in r.counterexample.items():
            artifacts[f"counterexamples/{r.name}/{key}.cavr"] = encode_cavr(np.atleast_1d(arr))
    ok = all(r.passed for r in results)
    summary = {
        "passed": ok,
        "fault": rc.fault,
        "seed": rc.seed,
        "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results],
    }
    artifacts["check.json"] = (json.dumps(summary, indent=2) + "\n").encode()
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return Outcome(artifacts, "\n".join(lines) + "\n", ok)


def cmd_dump_attn(rc: RunConfig) -> Outcome:
    if rc.level not in (1, 2, 3, 4):
        raise ConfigError(f"--level must be 1..4, got {rc.level}")
    if rc.block not in BLOCKS:
        raise ConfigError(f"unknown block {rc.block!r}; known: {', '.join(BLOCKS)}")
    lv = rc.model.levels[rc.level - 1]
    p = rc.model.patch[rc.level - 1]
    grid = (lv.h // p, lv.w // p)
    for q in rc.queries:
        if not 0 <= q < grid[0] * grid[1]:
            raise ConfigError(f"query index {q} outside 0..{grid[0] * grid[1] - 1}")
    features, weights = prepare(rc)
    prefix = f"cmiu{rc.level}/{BLOCKS[rc.block]}/"
    with instrument.probe(capture_maps=True, capture_prefix=prefix) as pr:
        tipp_forward(features, rc.model, weights)
    artifacts, lines = {}, []
    for m in pr.maps:
        stem = f"{rc.block}.head{m.head}.{m.kind}"
        artifacts[f"{stem}.cavr"] = encode_cavr(m.matrix)
        artifacts[f"{stem}.pgm"] = encode_pgm(m.matrix)
        lines.append(f"{stem}: {m.matrix.shape[0]}x{m.matrix.shape[1]}")
        if m.kind == "spatial":
            for q in rc.queries:
                row = m.matrix[q].reshape(grid)
                artifacts[f"{rc.block}.head{m.head}.query{q}.cavr"] = encode_cavr(row)
                artifacts[f"{rc.block}.head{m.head}.query{q}.pgm"] = encode_pgm(row)
    artifacts["run.json"] = _summary(rc)
    return Outcome(artifacts, "\n".join(lines) + "\n")


def cmd_synth(rc: RunConfig) -> Outcome:
    features = synthetic_features(rc.model, rc.input_seed if rc.input_seed is not None else rc.seed)
    weights = init_weights(rc.model, rc.weight_seed if rc.weight_seed is not None else rc.seed)
    artifacts = {f"weights/{k}": v for k, v in weight_artifacts(weights, rc.model).items()}
    artifacts.update({f"features/{k}": v for k, v in feature_artifacts(features).items()})
    return Outcome(artifacts, f"wrote {len(artifacts)} files\n")


COMMANDS = {
    "forward": cmd_forward,
    "cost": cmd_cost,
    "check": cmd_check,
    "dump-attn": cmd_dump_attn,
    "synth": cmd_synth,
}


# -- output publication ----------------------------------------------------

FAILURE_REPORT = "FAILURE.txt"


def publish(out: Path, artifacts: dict[str, bytes]) -> None:
    """Stage every file, then move them into ``out`` together."""
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        for name, blob in artifacts.items():
            path = staging / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(blob)
        # manifests go last so a reader never sees one without its tensors
        for name in sorted(artifacts, key=lambda n: n.endswith("manifest.txt")):
            dest = out / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(staging / name, dest)
        (out / FAILURE_REPORT).unlink(missing_ok=True)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def report_failure(out: Path | None, message: str) -> None:
    if out is None:
        return
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILURE_REPORT).write_text(message + "\n")
    except OSError:
        pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="seed for synthetic inputs and weights")
    common.add_argument("--out", metavar="DIR", help="output directory (default: caver-out)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--patch", metavar="P1,P2,P3,P4", help="patch side per level, level 1 first")
    model.add_argument("--dim", type=int, metavar="D", help="embedding width (default 64)")
    model.add_argument("--heads", type=int, metavar="NH", help="attention heads (default 2)")
    model.add_argument("--input-size", type=int, metavar="S", help="square input side; levels are S/4 .. S/32")
    model.add_argument("--inputs", metavar="DIR", help="directory of rgb{i}.cavr / dt{i}.cavr features")
    model.add_argument("--weights", metavar="DIR", help="weight directory with manifest.txt")

    parser = argparse.ArgumentParser(prog="caver", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("forward", parents=[common, model], help="run the decoder")
    cost = sub.add_parser("cost", parents=[common, model], help="cost table across a patch sweep")
    cost.add_argument("--sweep", metavar="P;P;..", help='patch configs, e.g. "2,2,2,2;8,8,8,8"')
    check = sub.add_parser("check", parents=[common], help="property and oracle suite")
    check.add_argument("--inject-fault", choices=FAULTS, help="flip the spatial scale factor to prove checks can fail")
    check.add_argument("--only", nargs="+", metavar="NAME", help="run only these checks")
    dump = sub.add_parser("dump-attn", parents=[common, model], help="export attention maps of one block")
    dump.add_argument("--level", type=int, metavar="I", help="CMIU level 1..4")
    dump.add_argument("--block", metavar="NAME", help="one of " + ", ".join(BLOCKS))
    dump.add_argument("--query", type=int, nargs="+", metavar="K", help="patch-token indices whose attention rows to dump")
    sub.add_parser("synth", parents=[common, model], help="write seeded weights/ and features/")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    try:
        rc = resolve(args)
        out = rc.out
        outcome = COMMANDS[rc.mode](rc)
        publish(rc.out, outcome.artifacts)
    except (CaverError, OSError, ValueError) as exc:
        message = f"caver {args.command}: {exc}"
        print(message, file=sys.stderr)
        report_failure(out, message)
        return 2
    sys.stdout.write(outcome.text)
    return 0 if outcome.ok else 1


if __name__ == "__main__":
    sys.exit(main())
