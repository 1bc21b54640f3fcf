"""Command-line harness: data generation, training, solving, evaluation, inspection.

Every command that writes a file also writes ``<out>.manifest.json`` with the
canonical argument list, resolved seeds, versions, timestamps and output
digests. ``deitsp replay <manifest>`` re-runs it and checks the digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .data_io import (
    BUNDLED_TSPLIB,
    ResultRecord,
    atomic_write,
    bundled_tsplib,
    format_result_record,
    generate_labeled_dataset,
    parse_tsplib,
    read_dataset,
    tsplib_reference,
    write_dataset,
)
from .diffusion import iteration_schedule, linear_beta_schedule
from .errors import ConfigError, DeitspError, InputError
from .inference import TWO_OPT_SCOPES, InferenceConfig, evaluate_one, oracle_denoiser, summarize
from .model import ModelConfig, load_model, save_model
from .training import TrainingConfig, format_curve, train
from .tsp import TspInstance

log = logging.getLogger("deitsp")

SEED_ENV = "DEITSP_SEED"
UNIFORM_MODEL = "uniform"
KINDS = ("linear", "cosine", "inverse")


class UsageError(DeitspError):
    exit_code = 2


class ReplayMismatch(DeitspError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# Each option: (flag, dest, kwargs). Kept as data so a manifest can rebuild a
# canonical argv from the parsed namespace.
SEED_OPTION = ("--seed", "seed", dict(type=int, default=None, help=f"falls back to ${SEED_ENV}, then 0"))


COMMANDS: Dict[str, dict] = {
    "gen-data": dict(
        help="generate a Held-Karp labelled uniform dataset",
        options=[
            ("--n", "n", dict(type=int, required=True)),
            ("--count", "count", dict(type=int, required=True)),
            ("--out", "out", dict(required=True)),
        ],
        outputs=["out"],
    ),
    "train": dict(
        help="train the denoiser on a labelled dataset",
        options=[
            ("--data", "data", dict(required=True)),
            ("--steps", "steps", dict(type=int, default=1000)),
            ("--batch", "batch", dict(type=int, default=16)),
            ("--dim", "dim", dict(type=int, default=64)),
            ("--heads", "heads", dict(type=int, default=4)),
            ("--layers", "layers", dict(type=int, default=3)),
            ("--T", "T", dict(type=int, default=1000)),
            ("--k", "k", dict(type=int, default=20)),
            ("--lambda", "lam", dict(type=float, default=1.0)),
            ("--lr", "lr", dict(type=float, default=2e-4)),
            ("--patience", "patience", dict(type=int, default=200, help="0 disables early stopping")),
            ("--out", "out", dict(required=True, help="checkpoint path")),
            ("--curve", "curve", dict(default=None, help="loss curve path (default <out>.curve.csv)")),
        ],
        outputs=["out", "curve"],
    ),
    "solve": dict(
        help="solve every instance of a dataset or TSPLIB file",
        options=[
            ("--model", "model", dict(required=True, help=f"checkpoint, or '{UNIFORM_MODEL}' for a constant heatmap")),
            ("--input", "input", dict(required=True, help=f"dataset, TSPLIB file, or one of {BUNDLED_TSPLIB}")),
            ("--iters", "iters", dict(type=int, default=1)),
            ("--schedule", "schedule", dict(choices=KINDS, default="inverse")),
            ("--interval", "interval", dict(default=None, help="l,r")),
            ("--two-opt", "two_opt", dict(action="store_true")),
            ("--two-opt-scope", "two_opt_scope", dict(choices=TWO_OPT_SCOPES, default="each",
                                                      help="improve every decode, or only the selected best")),
            ("--workers", "workers", dict(type=int, default=1)),
            ("--out", "out", dict(default=None)),
        ],
        outputs=["out"],
    ),
    "eval": dict(
        help="evaluate gap to stored optima for one or more iteration counts",
        options=[
            ("--model", "model", dict(required=True, help=f"checkpoint, or '{UNIFORM_MODEL}'")),
            ("--input", "input", dict(required=True)),
            ("--iters", "iters", dict(default="1", help="comma-separated iteration counts")),
            ("--schedule", "schedule", dict(choices=KINDS, default="inverse")),
            ("--interval", "interval", dict(default=None, help="l,r")),
            ("--two-opt", "two_opt", dict(action="store_true")),
            ("--two-opt-scope", "two_opt_scope", dict(choices=TWO_OPT_SCOPES, default="each",
                                                      help="improve every decode, or only the selected best")),
            ("--oracle", "oracle", dict(action="store_true", help="use ground-truth heatmaps")),
            ("--workers", "workers", dict(type=int, default=1)),
            ("--out", "out", dict(default=None)),
        ],
        outputs=["out"],
    ),
    "schedule-dump": dict(
        help="print the inference noise levels, one per line",
        options=[
            ("--kind", "kind", dict(choices=KINDS, default="inverse")),
            ("--interval", "interval", dict(default=None, help="l,r")),
            ("--iters", "iters", dict(type=int, required=True)),
            ("--T", "T", dict(type=int, default=1000)),
            ("--out", "out", dict(default=None)),
        ],
        outputs=["out"],
        seeded=False,
    ),
    "tsplib-info": dict(
        help="summarise a TSPLIB file and its reference optimum",
        options=[
            ("--input", "input", dict(required=True)),
            ("--out", "out", dict(default=None)),
        ],
        outputs=["out"],
        seeded=False,
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deitsp", description="Discrete-diffusion TSP solver harness.")
    parser.add_argument("--version", action="version", version=f"deitsp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--manifest", default=None, help="manifest path (default <out>.manifest.json)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"])
        for flag, dest, kw in _options(name):
            p.add_argument(flag, dest=dest, **kw)
    rp = sub.add_parser("replay", help="re-run a manifest and compare output digests")
    rp.add_argument("manifest_path")
    rp.add_argument("--outdir", default=None, help="write replayed outputs here instead of in place")
    return parser


def _options(name):
    spec = COMMANDS[name]
    opts = list(spec["options"])
    if spec.get("seeded", True):
        opts.append(SEED_OPTION)
    return opts


# ------------------------------------------------------------------ helpers


def resolve_seed(value: Optional[int]) -> Tuple[int, str]:
    if value is not None:
        return value, "flag"
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env), "env"
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return 0, "default"


def parse_interval(text: Optional[str]):
    if text is None:
        return None
    parts = text.split(",")
    try:
        if len(parts) != 2:
            raise ValueError
        l, r = float(parts[0]), float(parts[1])
    except ValueError:
        raise UsageError(f"--interval expects 'l,r', got {text!r}") from None
    return l, r


def parse_iter_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--iters expects comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in values):
        raise ConfigError("iteration counts must be >= 1")
    return values


def _require_file(path: str, flag: str):
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file {path!r}")


def _check_out_dir(path: Optional[str], flag: str = "--out"):
    if path is not None and not Path(path).resolve().parent.is_dir():
        raise UsageError(f"{flag}: directory of {path!r} does not exist")


def load_instances(spec: str) -> List[Tuple[str, TspInstance, Optional[float]]]:
    """(id, instance, reference length) triples from a dataset, TSPLIB file or bundled name."""
    path = Path(spec)
    if not path.is_file():
        if spec in BUNDLED_TSPLIB:
            inst = bundled_tsplib(spec)
            return [(spec, inst, tsplib_reference(inst))]
        raise UsageError(f"--input: no such file {spec!r}")
    text = path.read_text(encoding="utf-8")
    first = next((ln for ln in text.splitlines() if ln.strip()), "")
    if first.startswith("n="):
        return [(str(k), r.instance, r.optimal_length) for k, r in enumerate(read_dataset(path))]
    inst = parse_tsplib(text)
    return [(inst.name or path.stem, inst, tsplib_reference(inst))]


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def canonical_argv(command: str, ns: argparse.Namespace) -> List[str]:
    argv = [command]
    for flag, dest, kw in _options(command):
        value = getattr(ns, dest)
        if kw.get("action") == "store_true":
            if value:
                argv.append(flag)
        elif value is not None:
            argv += [flag, repr(value) if isinstance(value, float) else str(value)]
    return argv


# ---------------------------------------------------------------- commands


class Run:
    """Collects outputs and extra facts for the manifest of one command."""

    def __init__(self, command: str, ns: argparse.Namespace):
        self.command = command
        self.ns = ns
        self.started = _now()
        self.outputs: Dict[str, str] = {}
        self.extra: dict = {}

    def write(self, dest: str, content):
        path = getattr(self.ns, dest)
        atomic_write(path, content)
        self.outputs[dest] = path


def cmd_gen_data(run: Run):
    ns = run.ns
    if ns.count < 0:
        raise ConfigError("--count must be >= 0")
    _check_out_dir(ns.out)
    records = generate_labeled_dataset(ns.n, ns.count, ns.seed)
    write_dataset(records, ns.out)
    run.outputs["out"] = ns.out
    print(f"wrote {len(records)} records to {ns.out}")


def cmd_train(run: Run):
    ns = run.ns
    if ns.curve is None:
        ns.curve = ns.out + ".curve.csv"
    model_cfg = ModelConfig(layers=ns.layers, dim=ns.dim, heads=ns.heads, T=ns.T)
    train_cfg = TrainingConfig(
        T=ns.T, k=ns.k, lam=ns.lam, lr=ns.lr, batch_size=ns.batch, steps=ns.steps,
        seed=ns.seed, patience=ns.patience,
    )
    _require_file(ns.data, "--data")
    _check_out_dir(ns.out)
    _check_out_dir(ns.curve, "--curve")
    dataset = read_dataset(ns.data)
    start = time.perf_counter()
    state = train(dataset, train_cfg, model_cfg)
    run.extra["train_seconds"] = time.perf_counter() - start
    run.extra["steps_run"] = state.step
    atomic_write(ns.curve, format_curve(state.curve))
    save_model(state.params, ns.out)
    run.outputs.update(out=ns.out, curve=ns.curve)
    last = state.curve[-1] if state.curve else None
    print(f"trained {state.step} steps" + (f", final loss {last[-1]:.6f}" if last else ""))


# Worker-process state for --workers > 1; set once by the pool initializer.
_WORKER: dict = {}


def _init_worker(model_spec, noise_T):
    _WORKER["model"] = _load_denoiser(model_spec, noise_T)
    _WORKER["noise"] = linear_beta_schedule(noise_T)


def _worker_task(task):
    iid, instance, ref, config = task
    return evaluate_one(_WORKER["model"], instance, ref, config, iid, _WORKER["noise"])


def _uniform_denoiser(instance, a_t, t):
    return np.ones((instance.n, instance.n))


def _load_denoiser(model_spec: str, T: int):
    if model_spec == UNIFORM_MODEL:
        return _uniform_denoiser
    return load_model(model_spec)


def _model_T(model_spec: str) -> Tuple[object, int]:
    if model_spec == UNIFORM_MODEL:
        return _uniform_denoiser, 1000
    _require_file(model_spec, "--model")
    params = load_model(model_spec)
    return params, params.config.T


def _run_instances(model, model_spec, T, items, configs, workers, oracle_tours=None) -> List[ResultRecord]:
    noise = linear_beta_schedule(T)
    tasks = [(iid, inst, ref, cfg) for cfg in configs for iid, inst, ref in items]
    if oracle_tours is not None:
        return [
            evaluate_one(oracle_denoiser(oracle_tours[iid]), inst, ref, cfg, iid, noise)
            for iid, inst, ref, cfg in tasks
        ]
    if workers == 1 or len(tasks) <= 1:
        return [evaluate_one(model, inst, ref, cfg, iid, noise) for iid, inst, ref, cfg in tasks]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(model_spec, T)) as pool:
        return list(pool.map(_worker_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _inference_configs(ns, iter_counts, T):
    interval = parse_interval(ns.interval)
    configs = []
    for m in iter_counts:
        cfg = InferenceConfig(m, ns.schedule, interval, ns.two_opt, ns.seed, ns.two_opt_scope)
        cfg.iteration_schedule(T)  # validate before any work
        configs.append(cfg)
    return configs


def _report(records: Sequence[ResultRecord], run: Run, label: str = ""):
    for r in records:
        gap = "NA" if r.gap is None else f"{r.gap:.4f}%"
        print(f"{r.instance_id}\tM={r.iterations}\tlen={r.length:.6f}\tgap={gap}\ttime={r.time:.4f}s")
    s = summarize(records)
    gap = "NA" if s.mean_gap is None else f"{s.mean_gap:.4f}%"
    print(f"{label}mean_len={s.mean_length:.6f} mean_gap={gap} total_time={s.total_time:.4f}s")
    run.extra.setdefault("timing", []).append({"label": label.strip(), "solve_seconds": s.total_time})


def _common_solve(run: Run, iter_counts: List[int], oracle: bool = False):
    ns = run.ns
    if ns.workers < 1:
        raise ConfigError("--workers must be >= 1")
    _check_out_dir(ns.out)
    model, T = _model_T(ns.model)
    configs = _inference_configs(ns, iter_counts, T)
    items = load_instances(ns.input)
    oracle_tours = None
    if oracle:
        if not Path(ns.input).is_file():
            raise UsageError("--oracle needs a labelled dataset file")
        oracle_tours = {str(k): r.optimal_tour for k, r in enumerate(read_dataset(ns.input))}
    return _run_instances(model, ns.model, T, items, configs, ns.workers, oracle_tours), configs


def _write_results(run: Run, records):
    # wall time varies between runs, so it lives in the manifest, not the results file
    if run.ns.out is not None:
        run.write("out", "".join(format_result_record(r, include_time=False) + "\n" for r in records))


def cmd_solve(run: Run):
    if run.ns.iters < 1:
        raise ConfigError("--iters must be >= 1")
    records, _ = _common_solve(run, [run.ns.iters])
    _report(records, run)
    _write_results(run, records)


def cmd_eval(run: Run):
    counts = parse_iter_list(run.ns.iters)
    records, configs = _common_solve(run, counts, oracle=run.ns.oracle)
    for cfg in configs:
        _report([r for r in records if r.iterations == cfg.iterations], run, f"M={cfg.iterations} ")
    _write_results(run, records)


def cmd_schedule_dump(run: Run):
    ns = run.ns
    _check_out_dir(ns.out)
    interval = parse_interval(ns.interval)
    l, r = interval if interval is not None else (None, None)
    sched = iteration_schedule(ns.kind, ns.iters, ns.T, l, r)
    text = "".join(f"{t}\n" for t in sched.steps)
    sys.stdout.write(text)
    if ns.out is not None:
        run.write("out", text)


def cmd_tsplib_info(run: Run):
    ns = run.ns
    _check_out_dir(ns.out)
    items = load_instances(ns.input)
    if len(items) != 1:
        raise InputError("--input must be a single TSPLIB instance")
    iid, inst, ref = items[0]
    lo, hi = inst.coords.min(axis=0), inst.coords.max(axis=0)
    lines = [
        f"name={iid}",
        f"n={inst.n}",
        f"metric={inst.metric_mode}",
        "reference=" + ("NA" if ref is None else repr(ref)),
        f"bbox={lo[0]!r},{lo[1]!r};{hi[0]!r},{hi[1]!r}",
    ]
    text = "".join(ln + "\n" for ln in lines)
    sys.stdout.write(text)
    if ns.out is not None:
        run.write("out", text)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "schedule-dump": cmd_schedule_dump,
    "tsplib-info": cmd_tsplib_info,
}


def write_manifest(run: Run, path: str, seed_source: Optional[str]):
    manifest = {
        "command": run.command,
        "argv": canonical_argv(run.command, run.ns),
        "flags": {dest: getattr(run.ns, dest) for _, dest, _ in _options(run.command)},
        "seeds": {} if seed_source is None else {"seed": run.ns.seed, "source": seed_source},
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": run.started,
        "finished": _now(),
        "outputs": {dest: {"path": p, "sha256": _digest(p)} for dest, p in run.outputs.items()},
        **run.extra,
    }
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_command(argv: Sequence[str], manifest_path: Optional[str] = None) -> Run:
    parser = build_parser()
    ns = parser.parse_args(list(argv))
    return _dispatch(ns, manifest_path or ns.manifest)


def _dispatch(ns: argparse.Namespace, manifest_path: Optional[str]) -> Run:
    command = ns.command
    seed_source = None
    if COMMANDS[command].get("seeded", True):
        ns.seed, seed_source = resolve_seed(ns.seed)
    run = Run(command, ns)
    HANDLERS[command](run)
    if manifest_path is None and getattr(ns, "out", None) is not None:
        manifest_path = ns.out + ".manifest.json"
    if manifest_path is not None:
        write_manifest(run, manifest_path, seed_source)
        run.extra["manifest_path"] = manifest_path
    return run


def replay(manifest_path: str, outdir: Optional[str] = None) -> Dict[str, bool]:
    """Re-run a manifest single-worker; map each output flag to whether its bytes match."""
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        argv = list(manifest["argv"])
        outputs = manifest["outputs"]
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"unreadable manifest {manifest_path!r}: {exc}") from None
    flag_of = {dest: flag for flag, dest, _ in _options(argv[0])}
    if "--workers" in argv:
        argv[argv.index("--workers") + 1] = "1"
    targets = {}
    for dest, info in outputs.items():
        target = info["path"]
        if outdir is not None:
            target = str(Path(outdir) / Path(info["path"]).name)
            flag = flag_of[dest]
            if flag in argv:
                argv[argv.index(flag) + 1] = target
            else:
                argv += [flag, target]
        targets[dest] = target
    rerun_manifest = None
    if outdir is not None:
        rerun_manifest = str(Path(outdir) / Path(manifest_path).name)
    run_command(argv, rerun_manifest)
    return {dest: _digest(targets[dest]) == info["sha256"] for dest, info in outputs.items()}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
        if ns.command == "replay":
            if ns.outdir is not None and not Path(ns.outdir).is_dir():
                raise UsageError(f"--outdir {ns.outdir!r} is not a directory")
            result = replay(ns.manifest_path, ns.outdir)
            for dest, same in result.items():
                print(f"{dest}: {'identical' if same else 'DIFFERS'}")
            if not all(result.values()):
                raise ReplayMismatch("replayed outputs differ from the manifest digests")
            return 0
        _dispatch(ns, ns.manifest)
        return 0
    except DeitspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
