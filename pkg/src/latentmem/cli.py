"""Command-line entry point: ``latentmem train|eval|ablate|stats|latency``.

Every command takes ``--config PATH --seed N --out DIR`` (``stats`` needs
only the dump and ``--out``) and writes a ``manifest-<command>.json`` into
the output directory listing the config snapshot, seeds, input hashes and
every file written.  Exit codes: 0 success, 1 usage, 2 config, 3 runtime
divergence.  ``LATENTMEM_WORKERS`` sets the number of evaluation worker
processes (default 1).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, stats
from .decoding import Trajectory, dump_trajectories, measure_latency, overhead
from .evaluation import (ABLATION_MODES, forced_policy, harmful_invocations, held_out_suite,
                         mode_policy, run)
from .grpo import delta_score
from .memory import MemorySystem
from .pretrain import pretrain
from .training import DivergenceError, run_stage
from .vlm import ToyVLM

WORKERS_ENV = "LATENTMEM_WORKERS"
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace, cfg: config.RunConfig | None,
                 argv: list[str]):
        self.out = Path(args.out)
        self.data = {
            "command": command,
            "argv": list(argv),
            "seed": getattr(args, "seed", None),
            "output_dir": str(self.out),
            "config": cfg.to_dict() if cfg is not None else None,
            "inputs": {},
            "checkpoints": {},
            "outputs": {},
        }

    def input(self, role: str, path) -> None:
        self.data["inputs"][role] = {"path": str(path), "sha256": file_sha256(path)}

    def checkpoint(self, role: str, path) -> None:
        self.data["checkpoints"][role] = {"path": str(path), "sha256": file_sha256(path)}
        self.output(path)

    def output(self, path) -> None:
        self.data["outputs"][Path(path).name] = file_sha256(path)

    def write(self) -> Path:
        path = self.out / f"manifest-{self.data['command']}.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")
        return path


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError(f"{WORKERS_ENV} must be >= 1")
    return n


# -- model loading -------------------------------------------------------------

def build(cfg: config.RunConfig, seed: int) -> tuple[ToyVLM, MemorySystem]:
    model = ToyVLM(cfg.model)
    return model, MemorySystem(model, seed=seed)


def load_checkpoint(model: ToyVLM, memory: MemorySystem, path, need_memory: bool = True) -> None:
    if path is None or not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found; run `latentmem train` first")
    values = checkpoint.load(path)
    checkpoint.assign(model.parameters(), checkpoint.select(values, "vlm."))
    mem = checkpoint.select(values, "mem.")
    if mem or need_memory:
        checkpoint.assign(memory.parameters(), mem)


def all_parameters(model: ToyVLM, memory: MemorySystem) -> dict:
    return {**model.parameters(), **memory.parameters()}


# -- parallel evaluation ---------------------------------------------------------

_EVAL_STATE: tuple | None = None


def _eval_one(args) -> Trajectory:
    model, memory, policy = _EVAL_STATE
    task, seed = args
    return run(model, memory, task, policy, seed)


def run_suite(model, memory, tasks, policy, seed: int, n_workers: int = 1) -> list[Trajectory]:
    """Evaluate ``tasks`` in order; results do not depend on the worker count."""
    global _EVAL_STATE
    jobs = [(t, seed + i) for i, t in enumerate(tasks)]
    _EVAL_STATE = (model, memory, policy)
    try:
        if n_workers <= 1 or "fork" not in multiprocessing.get_all_start_methods():
            return [_eval_one(j) for j in jobs]
        with multiprocessing.get_context("fork").Pool(n_workers) as pool:
            return pool.map(_eval_one, jobs, chunksize=max(1, len(jobs) // (4 * n_workers)))
    finally:
        _EVAL_STATE = None


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- commands -------------------------------------------------------------------

def cmd_train(args, cfg: config.RunConfig, manifest: Manifest, log) -> None:
    model, memory = build(cfg, args.seed)
    out = manifest.out
    if args.stage == "I":
        if args.base_checkpoint:
            load_checkpoint(model, memory, args.base_checkpoint, need_memory=False)
            manifest.input("base_checkpoint", args.base_checkpoint)
        else:
            pretrain(model, cfg.pretrain, args.seed, log)
            base = out / "base.ck"
            checkpoint.save(base, model.parameters())
            manifest.checkpoint("base", base)
        stage_cfg, stage1 = cfg.stage1, None
    else:
        if not args.stage1_checkpoint or not Path(args.stage1_checkpoint).exists():
            raise UsageError("stage II needs --stage1-checkpoint pointing at a stage I checkpoint; "
                             "run `latentmem train --stage I` first")
        load_checkpoint(model, memory, args.stage1_checkpoint)
        manifest.input("stage1_checkpoint", args.stage1_checkpoint)
        stage_cfg, stage1 = cfg.stage2, args.stage1_checkpoint
    metrics = out / f"metrics-stage{args.stage}.csv"
    report = run_stage(stage_cfg, model, memory, args.seed, stage1, metrics, log)
    manifest.output(metrics)
    ck = out / f"stage{args.stage}.ck"
    checkpoint.save(ck, all_parameters(model, memory))
    manifest.checkpoint(f"stage{args.stage}", ck)
    manifest.data["report"] = {"steps": report.steps, "early_stops": report.early_stops,
                               "seconds": report.seconds,
                               "frozen_digest_before": report.frozen_digest_before,
                               "frozen_digest_after": report.frozen_digest_after}


def cmd_eval(args, cfg: config.RunConfig, manifest: Manifest, log) -> None:
    model, memory = build(cfg, args.seed)
    load_checkpoint(model, memory, args.checkpoint)
    manifest.input("checkpoint", args.checkpoint)
    ev = cfg.eval
    tasks = held_out_suite(ev.families, ev.suite_size, ev.task_seed_base)
    policy = forced_policy(ev.max_new_tokens)
    n = workers()
    trajs = run_suite(model, memory, tasks, policy, args.seed, n)
    bases = run_suite(model, None, tasks, policy.with_(invocation="forbid"), args.seed, n)
    gains = [delta_score(t, b) for t, b in zip(trajs, bases)]
    harm = harmful_invocations(model, memory, tasks, mode_policy("full", ev.max_new_tokens,
                               ev.temperature, greedy=False), ev.samples_per_task, args.seed)
    path = manifest.out / "eval.csv"
    _write_rows(path, ["metric", "value"], [
        ["tasks", len(tasks)],
        ["mean_score_forced", f"{np.mean([t.score for t in trajs]):.6f}"],
        ["mean_score_base", f"{np.mean([b.score for b in bases]):.6f}"],
        ["mean_delta_score", f"{np.mean(gains):.6f}"],
        ["harmful_fraction", f"{harm.fraction:.6f}"],
        ["invocation_rate", f"{harm.invocation_rate:.6f}"],
    ])
    manifest.output(path)
    dump = manifest.out / "eval-trajectories.jsonl"
    dump_trajectories(dump, trajs)
    manifest.output(dump)
    log(f"eval: mean dS {np.mean(gains):+.4f}, harmful fraction {harm.fraction:.3f}")


def cmd_ablate(args, cfg: config.RunConfig, manifest: Manifest, log) -> None:
    modes = ABLATION_MODES if args.mode == ["all"] else args.mode
    for m in modes:
        if m not in ABLATION_MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {', '.join(ABLATION_MODES)} or all")
    model, memory = build(cfg, args.seed)
    load_checkpoint(model, memory, args.checkpoint)
    manifest.input("checkpoint", args.checkpoint)
    ev = cfg.eval
    tasks = held_out_suite(ev.families, ev.suite_size, ev.task_seed_base)
    rows = []
    for mode in modes:
        policy = mode_policy(mode, ev.max_new_tokens)
        trajs = run_suite(model, memory, tasks, policy, args.seed, workers())
        rate = np.mean([bool(t.invocations) for t in trajs])
        rows.append([mode, len(trajs), f"{np.mean([t.score for t in trajs]):.6f}", f"{rate:.6f}"])
        dump = manifest.out / f"ablate-{mode}.jsonl"
        dump_trajectories(dump, trajs)
        manifest.output(dump)
        log(f"ablate {mode}: score {rows[-1][2]} invocation rate {rate:.3f}")
    path = manifest.out / "ablation.csv"
    _write_rows(path, ["mode", "tasks", "mean_score", "invocation_rate"], rows)
    manifest.output(path)


def cmd_stats(args, cfg, manifest: Manifest, log) -> None:
    if not Path(args.dump).exists():
        raise UsageError(f"trajectory dump {args.dump} not found")
    manifest.input("dump", args.dump)
    st = stats.scan_dump(args.dump)
    hist = manifest.out / "invocation-positions.csv"
    stats.write_csv(st, hist, args.sigma)
    summary = manifest.out / "invocation-ratio.csv"
    stats.write_summary(st, summary)
    manifest.output(hist)
    manifest.output(summary)
    if args.svg:
        svg = manifest.out / "invocation-positions.svg"
        stats.write_svg(st, svg, args.sigma or 1.0)
        manifest.output(svg)
    if st.skipped:
        log(f"warning: skipped {st.skipped} malformed line(s)")
    manifest.data["skipped_lines"] = st.skipped


def cmd_latency(args, cfg: config.RunConfig, manifest: Manifest, log) -> None:
    model, memory = build(cfg, args.seed)
    load_checkpoint(model, memory, args.checkpoint)
    manifest.input("checkpoint", args.checkpoint)
    ev = cfg.eval
    tasks = held_out_suite(ev.families, args.samples, ev.task_seed_base)
    vanilla = measure_latency(model, None, tasks, mode_policy("vanilla", ev.max_new_tokens), args.seed)
    full = measure_latency(model, memory, tasks, mode_policy("full", ev.max_new_tokens), args.seed)
    measured, predicted = overhead(vanilla, full)
    path = manifest.out / "latency.csv"
    _write_rows(path, ["mode", "samples", "seconds_per_sample", "samples_per_second",
                       "forward_positions", "invocations", "overhead", "predicted_overhead"], [
        ["vanilla", vanilla.n_samples, f"{vanilla.seconds_per_sample:.6f}",
         f"{vanilla.samples_per_second:.3f}", vanilla.forward_positions, vanilla.invocations,
         "0.000000", "0.000000"],
        ["full", full.n_samples, f"{full.seconds_per_sample:.6f}", f"{full.samples_per_second:.3f}",
         full.forward_positions, full.invocations, f"{measured:.6f}", f"{predicted:.6f}"],
    ])
    manifest.output(path)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "stats": cmd_stats,
            "latency": cmd_latency}


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentmem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train", help="run stage I or stage II")
    common(tr)
    tr.add_argument("--stage", required=True, choices=config.STAGES)
    tr.add_argument("--base-checkpoint", help="pretrained base model (stage I); pretrains when absent")
    tr.add_argument("--stage1-checkpoint", help="stage I checkpoint (required for stage II)")

    ev = sub.add_parser("eval", help="score gain and harmful-invocation rate on the held-out suite")
    common(ev)
    ev.add_argument("--checkpoint", required=True)

    ab = sub.add_parser("ablate", help="score table over invocation modes")
    common(ab)
    ab.add_argument("--checkpoint", required=True)
    ab.add_argument("--mode", nargs="+", required=True, help=f"'all' or any of {', '.join(ABLATION_MODES)}")

    st = sub.add_parser("stats", help="invocation ratio and relative-position histograms")
    common(st, needs_config=False)
    st.add_argument("--dump", required=True, help="trajectory dump (JSON lines)")
    st.add_argument("--sigma", type=float, default=None, help="Gaussian smoothing width in bins")
    st.add_argument("--svg", action="store_true", help="also write an SVG plot")

    la = sub.add_parser("latency", help="wall time per sample, vanilla vs full memory")
    common(la)
    la.add_argument("--checkpoint", required=True)
    la.add_argument("--samples", type=int, default=50)
    return p


def main(argv=None) -> int:
    log = lambda msg: print(msg, file=sys.stderr, flush=True)  # noqa: E731
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = make_parser().parse_args(argv)
        cfg = config.load(args.config) if args.config else None
        Path(args.out).mkdir(parents=True, exist_ok=True)
        manifest = Manifest(args.command, args, cfg, argv)
        if args.config:
            manifest.input("config", args.config)
        COMMANDS[args.command](args, cfg, manifest, log)
        path = manifest.write()
        log(f"wrote {path}")
        return EXIT_OK
    except UsageError as exc:
        log(f"error: {exc}")
        return EXIT_USAGE
    except (config.ConfigError, checkpoint.CheckpointError) as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        log(f"diverged: {exc}")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
