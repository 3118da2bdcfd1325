"""Command line entry point.

Exit codes: 0 ok, 1 configuration error, 2 missing artifact, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

from ..distill import DISTILL_FIELDS, run_distill
from ..flowtrain import METRIC_FIELDS, run_stage, stage_params
from ..numerics import NumericalError
from ..numerics.rng import Rng
from ..world import write_dataset, write_ppm
from .checkpoint import CheckpointError, HashMismatch, checkpoint_paths, load_checkpoint, read_manifest, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .pipeline import datasets, driving_track, encoded_train, evaluate, generate

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 1, 2, 3

TRAIN_CSV = [f for f in METRIC_FIELDS if f != "wall_ms"] + ["note"]
DISTILL_CSV = [f for f in DISTILL_FIELDS if f != "wall_ms"] + ["note"]


class MissingArtifact(FileNotFoundError):
    pass


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_rows(path: Path, fields: list[str], rows: list[dict], append: bool = False) -> None:
    """CSV without wall-clock columns, so reruns produce identical bytes."""
    exists = append and path.exists()
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    if not exists:
        writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k, "")) for k in fields})
    with open(path, "a" if exists else "w", newline="") as fh:
        fh.write(buf.getvalue())


def _record_timing(run: Path, key: str, value) -> None:
    path = run / "timing.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data[key] = value
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _resolve_config(args) -> RunConfig:
    run = Path(args.out)
    if args.config:
        config = load_config(args.config)
    elif (run / "config.json").exists():
        config = load_config(run / "config.json")
    else:
        config = RunConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _prepare_run(args) -> tuple[Path, RunConfig]:
    config = _resolve_config(args)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(config.to_json())
    return run, config


def _load(run: Path, name: str, config: RunConfig, override: bool):
    manifest, _ = checkpoint_paths(run / "checkpoints", name)
    if not manifest.exists():
        raise MissingArtifact(f"checkpoint {manifest} not found")
    params, header, warnings = load_checkpoint(run / "checkpoints", name, config.hash(), override)
    for msg in warnings:
        print(f"warning: {msg}", file=sys.stderr)
        _write_rows(run / "metrics.csv", TRAIN_CSV, [{"note": f"warning: {msg}"}], append=True)
    return params, header


def _meta(config: RunConfig, stage, step: int, rng: Rng) -> dict:
    return {"stage": stage, "step": step, "config_hash": config.hash(), "rng_state": rng.state()}


# commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run, config = _prepare_run(args)
    train, test = datasets(config)
    write_dataset(train, run / "data" / "train")
    write_dataset(test, run / "data" / "test")
    print(f"wrote {len(train)} train and {len(test)} test scenes to {run / 'data'}")
    return 0


def cmd_train(args) -> int:
    run, config = _prepare_run(args)
    stage = args.stage
    cfg = config.model_config()
    tcfg = config.train_config(stage)
    if stage == 2:
        stage1, _ = _load(run, "stage1", config, args.override_hash)
        params = stage_params(cfg, config.seed, stage1)
    else:
        params = stage_params(cfg, config.seed)
    data = encoded_train(config)
    start = time.perf_counter()
    params, _, rows = run_stage(params, data, tcfg, cfg)
    _record_timing(run, f"train_stage{stage}_ms", round((time.perf_counter() - start) * 1000.0, 1))
    _write_rows(run / "metrics.csv", TRAIN_CSV, rows, append=stage == 2)
    save_checkpoint(run / "checkpoints", f"stage{stage}", params,
                    _meta(config, stage, tcfg.steps, Rng(tcfg.seed, f"train/stage{stage}")))
    print(f"stage {stage}: {tcfg.steps} steps, final total_loss={rows[-1]['total_loss']:.6f}")
    return 0


def cmd_distill(args) -> int:
    run, config = _prepare_run(args)
    teacher, _ = _load(run, "stage2", config, args.override_hash)
    dcfg = config.distill_config()
    data = encoded_train(config)
    start = time.perf_counter()
    state, rows = run_distill(teacher, data, dcfg, config.model_config())
    _record_timing(run, "distill_ms", round((time.perf_counter() - start) * 1000.0, 1))
    _write_rows(run / "distill_metrics.csv", DISTILL_CSV, rows)
    save_checkpoint(run / "checkpoints", "distilled", state.generator,
                    _meta(config, "distilled", dcfg.steps, Rng(dcfg.seed, "distill")))
    print(f"distilled {dcfg.steps} steps, final sds_loss={rows[-1]['sds_loss']:.6g}")
    return 0


def _mode_checkpoint(mode: str) -> str:
    return "stage2" if mode == "teacher" else "distilled"


def cmd_sample(args) -> int:
    run, config = _prepare_run(args)
    mode = args.mode or "teacher"
    params, _ = _load(run, _mode_checkpoint(mode), config, args.override_hash)
    frames = args.frames or config["sampler"]["frames"]
    if frames < 1:
        raise ConfigError("--frames must be >= 1")
    _, test = datasets(config)
    index = config["sampler"]["scene"]
    if not 0 <= index < len(test):
        raise ConfigError(f"sampler.scene {index} out of range")
    scene = test[index]
    root = Rng(config.seed, f"sample/{mode}")
    track = driving_track(scene, frames, root.child("audio"))
    start = time.perf_counter()
    result = generate(params, config, [scene], [track], mode, root.child("noise"))
    wall = round((time.perf_counter() - start) * 1000.0, 1)
    out = run / "frames" / mode
    out.mkdir(parents=True, exist_ok=True)
    for t in range(frames):
        (out / f"{t:03d}.pgm").write_bytes(write_ppm(result.pixels[0, t, 0]))
    info = {"mode": mode, "frames": frames, "windows": result.windows, "nfe": result.nfe,
            "scene": index, "audio": [float(a) for a in track]}
    (run / f"sample_{mode}.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _record_timing(run, f"sample_{mode}_ms", wall)
    print(f"mode={mode} frames={frames} windows={result.windows} nfe={result.nfe} wall_ms={wall}")
    return 0


def cmd_eval(args) -> int:
    run, config = _prepare_run(args)
    mode = args.mode or config["eval"]["mode"]
    params, _ = _load(run, _mode_checkpoint(mode), config, args.override_hash)
    if args.frames:
        data = dict(config.data)
        data["eval"] = dict(data["eval"], frames=args.frames)
        config = RunConfig(data)
    start = time.perf_counter()
    report = evaluate(params, config, mode)
    _record_timing(run, f"eval_{mode}_ms", round((time.perf_counter() - start) * 1000.0, 1))
    (run / "report.json").write_text(report.to_json() + "\n")
    (run / "eval.csv").write_text(report.to_csv())
    agg = report.aggregate()
    print(f"mode={mode} sync_proxy={agg['sync_proxy']:.4f} identity_error={agg['identity_error']:.4f} "
          f"smooth_ratio={agg['smooth_ratio']:.4f}")
    return 0


def cmd_inspect(args) -> int:
    target = Path(args.out)
    ckdir = target / "checkpoints" if (target / "checkpoints").is_dir() else target
    names = sorted(p.stem for p in ckdir.glob("*.json"))
    if not names:
        raise MissingArtifact(f"no checkpoints under {ckdir}")
    for name in names:
        m = read_manifest(ckdir, name)
        h = m["header"]
        print(f"{name}: stage={h['stage']} step={h['step']} tensors={len(m['tensors'])} "
              f"bytes={m['total_bytes']} config_hash={h['config_hash'][:12]}")
        for entry in m["tensors"]:
            print(f"  {entry['name']:<28} {tuple(entry['shape'])!s:<14} offset={entry['offset']}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "distill": cmd_distill,
    "sample": cmd_sample, "eval": cmd_eval, "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkdit", description="Desk-scale audio-driven portrait video DiT")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="run directory (checkpoint directory for inspect)")
        if name == "inspect":
            continue
        p.add_argument("--config", help="JSON config; defaults to <out>/config.json when present")
        p.add_argument("--seed", type=int)
        p.add_argument("--override-hash", action="store_true",
                       help="load checkpoints whose config hash differs (logged as a warning)")
        if name == "train":
            p.add_argument("--stage", type=int, choices=(1, 2), required=True)
        if name in ("sample", "eval"):
            p.add_argument("--mode", choices=("teacher", "distilled"))
            p.add_argument("--frames", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, HashMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
