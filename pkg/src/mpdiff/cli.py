"""Command-line entry point: ``mpdiff <command> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure.
``MPDIFF_THREADS`` caps the BLAS thread pool (default 1, which keeps runs
bit-reproducible).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pydantic
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, save_checkpoint
from .config import load_config
from .ema import ReconstructionError, parse_grid
from .features import MelConfig, load_waveform, mel_encode
from .tensor import NonFiniteError
from .toydata import ToySpec, gen_toy_dataset, load_dataset, save_dataset
from .train import ConfigMismatch, load_model, train
from .workflows import (
    decode_all, evaluate, load_snapshots, reconstruction_checkpoint, sample_dataset, sweep, write_eval,
    write_samples, EvalResult,
)

log = logging.getLogger("mpdiff")

LOCK_NAME = ".mpdiff.lock"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


@contextlib.contextmanager
def exclusive_dir(path: Path):
    """Hold the directory lock for the whole block (training)."""
    path.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(path / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise UsageError(f"{path} is in use by another training process") from None
    try:
        yield
    finally:
        lock.release()


def ensure_not_training(path: Path) -> None:
    """Refuse to write into a directory a training process currently owns."""
    if not (path / LOCK_NAME).exists():
        return
    lock = FileLock(str(path / LOCK_NAME))
    try:
        lock.acquire(timeout=5)
    except Timeout:
        raise UsageError(f"{path} is in use by a training process") from None
    lock.release()


def _read_spec(arg: str | None) -> ToySpec:
    if arg is None:
        return ToySpec()
    text = Path(arg).read_text() if Path(arg).is_file() else arg
    try:
        return ToySpec.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--spec is neither a JSON file nor JSON text: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_data_gen(args) -> int:
    if args.items < 1:
        raise UsageError("items must be ≥ 1")
    ds = gen_toy_dataset(args.seed, args.items, _read_spec(args.spec))
    out = Path(args.out)
    if not out.parent.is_dir():
        raise UsageError(f"cannot write {out}: directory does not exist")
    save_dataset(ds, out)
    print(f"wrote {len(ds)} items to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.out_dir)
    with exclusive_dir(out):
        res = train(cfg, resume=args.resume, force=args.force, stop_at=args.stop_at)
    print(f"step {res.step}: state {res.state_path}, metrics {res.metrics_path}, snapshots {res.snapshot_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    out = Path(args.out)
    ensure_not_training(out)
    model = load_model(args.ckpt)
    ds = load_dataset(args.dataset)
    samples = sample_dataset(model, ds, args.steps, args.seed)
    labels, rmse = decode_all(samples, ds)
    result = EvalResult(np.mean(labels == ds.labels(), axis=1), rmse, labels)
    path = write_samples(samples, result, out)
    print(f"label accuracy {result.accuracy.mean():.4f}, rmse {rmse.mean():.4f}; wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    ensure_not_training(out)
    model = load_model(args.ckpt)
    ds = load_dataset(args.dataset)
    result = evaluate(model, ds, args.steps, args.seed, swap=not args.no_swap)
    metrics, series = write_eval(result, out)
    for name, mean, std, n in result.rows():
        print(f"{name}: {mean:.4f} ± {std:.4f} (n={n})")
    print(f"wrote {metrics} and {series}")
    return EXIT_OK


def cmd_ema_reconstruct(args) -> int:
    if (args.sigma_rel is None) == (args.grid is None):
        raise UsageError("give exactly one of --sigma-rel or --grid")
    snaps = load_snapshots(args.snapshots_dir)
    out = Path(args.out)
    if args.grid is not None:
        if args.dataset is None:
            raise UsageError("--grid needs --dataset to score each reconstruction")
        rows = sweep(snaps, parse_grid(args.grid), load_dataset(args.dataset), args.steps, args.seed,
                     out, step=args.step)
        print(f"wrote {len(rows)} rows to {out}")
        return EXIT_OK
    ckpt = reconstruction_checkpoint(snaps, args.sigma_rel, args.step)
    save_checkpoint(out, ckpt)
    print(f"sigma_rel {args.sigma_rel} (gamma {ckpt.gamma:.6f}) at step {ckpt.step} -> {out}")
    return EXIT_OK


def cmd_mel(args) -> int:
    cfg = MelConfig(n_mels=args.n_mels)
    mel = mel_encode(load_waveform(args.input, cfg.sample_rate), cfg)
    np.save(args.out, mel.astype("<f4"))
    print(f"{mel.shape[1]} frames x {mel.shape[0]} bins -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("data-gen", help="generate a synthetic dataset file")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--items", type=int, required=True)
    g.add_argument("--spec", help="dataset spec as a JSON file or JSON text")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_data_gen)

    t = sub.add_parser("train", help="train (or resume) a run")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="training-state checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="resume even if the config hash differs")
    t.add_argument("--stop-at", type=int, help="stop after this step (resumable)")
    t.set_defaults(func=cmd_train)

    def sampling(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--steps", type=int, default=32)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("sample", help="generate feature tracks for every dataset item")
    sampling(s)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="sample, decode and aggregate metrics")
    sampling(e)
    e.add_argument("--no-swap", action="store_true", help="skip the speaker-swap test")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("ema-reconstruct", help="post-hoc EMA from stored snapshots")
    r.add_argument("--snapshots-dir", required=True)
    r.add_argument("--sigma-rel", type=float)
    r.add_argument("--grid", help="lo:hi:n sweep of sigma_rel values (writes a CSV)")
    r.add_argument("--step", type=int, help="target step (default: last snapshot)")
    r.add_argument("--dataset", help="dataset scored by --grid")
    r.add_argument("--steps", type=int, default=32, help="sampler steps for --grid")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_ema_reconstruct)

    m = sub.add_parser("mel", help="log-mel features of a waveform (.wav or raw f32)")
    m.add_argument("--input", required=True)
    m.add_argument("--out", required=True, help=".npy output")
    m.add_argument("--n-mels", type=int, default=80)
    m.set_defaults(func=cmd_mel)
    return p


def _threads() -> int:
    raw = os.environ.get("MPDIFF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MPDIFF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("MPDIFF_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, pydantic.ValidationError, CheckpointError, ConfigMismatch, ReconstructionError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
