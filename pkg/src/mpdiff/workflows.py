"""Sampling, evaluation and post-hoc EMA workflows on trained checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, config_hash, load_checkpoint
from .diffusion import heun_solve, precondition, sigma_steps
from .ema import EmaSnapshotStore, ReconstructionError, ema_length_sweep, gamma_from_sigma_rel, posthoc_reconstruct
from .rng import Rng, derive_stream
from .tensor import NonFiniteError, Tensor
from .toydata import ToyDataset, decode_templates
from .train import ConfigMismatch, LoadedModel, model_from_checkpoint

log = logging.getLogger(__name__)

EVAL_COLUMNS = ["metric", "mean", "std", "n"]


def check_compatible(model: LoadedModel, dataset: ToyDataset) -> None:
    expected = config_hash(model.net.cfg.to_dict(), dataset.spec.to_dict())
    if expected != model.ckpt.config_hash:
        raise ConfigMismatch("checkpoint and dataset are incompatible (config hash mismatch)")


def initial_noise(seed: int, index: int, shape: tuple[int, ...]) -> np.ndarray:
    """Unit-variance start noise for one item; independent of batching."""
    return Rng(seed, derive_stream(0, "sample", index)).normal(shape)


def sample_dataset(model: LoadedModel, dataset: ToyDataset, steps: int, seed: int,
                   speakers: np.ndarray | None = None, batch: int = 32) -> np.ndarray:
    """Heun samples for every item, ``[n, n_a, T]`` in raw feature units.

    ``speakers`` replaces the items' own speaker latents when given.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    check_compatible(model, dataset)
    net, schedule = model.net, model.schedule
    sigmas = sigma_steps(schedule, steps)
    _, s_all, v_all = dataset.arrays()
    if speakers is not None:
        s_all = np.asarray(speakers, dtype=np.float32)
    n_a, length = dataset.items[0].x.shape
    out = np.empty((len(dataset), n_a, length))
    for lo in range(0, len(dataset), batch):
        hi = min(lo + batch, len(dataset))
        s, v = s_all[lo:hi], v_all[lo:hi]
        x0 = sigmas[0] * np.stack([initial_noise(seed, i, (n_a, length)) for i in range(lo, hi)])

        def denoise(x, sigma):
            d, _ = precondition(Tensor(x.astype(net.dtype)), s, v, sigma, net, schedule)
            return d.data.astype(np.float64)

        out[lo:hi] = heun_solve(denoise, x0, sigmas)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("sampler produced non-finite values")
    return model.standardizer.inverse(out)


def swapped_speakers(dataset: ToyDataset) -> tuple[np.ndarray, np.ndarray]:
    """Each item re-voiced by the next speaker: latents and that speaker's ids."""
    world = dataset.world
    n = dataset.spec.n_speakers
    new = np.array([(it.speaker + 1) % n for it in dataset.items])
    return world.speaker_latents[new].astype(np.float32), new


@dataclass
class EvalResult:
    accuracy: np.ndarray  # per item
    rmse: np.ndarray  # per item
    labels: np.ndarray  # [n, n_segments] decoded
    swap_flips: np.ndarray | None = None  # per changed ambiguous segment, 1 if it took the new speaker's label

    def rows(self) -> list[tuple[str, float, float, int]]:
        rows = [
            ("label_accuracy", *_stats(self.accuracy)),
            ("rmse", *_stats(self.rmse)),
        ]
        if self.swap_flips is not None:
            rows.append(("swap_flip_rate", *_stats(self.swap_flips)))
        return rows


def _stats(a: np.ndarray) -> tuple[float, float, int]:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return float("nan"), float("nan"), 0
    return float(a.mean()), float(a.std()), int(a.size)


def decode_all(samples: np.ndarray, dataset: ToyDataset) -> tuple[np.ndarray, np.ndarray]:
    bank = dataset.world.bank
    decoded = [decode_templates(x, bank) for x in samples]
    return np.stack([d[0] for d in decoded]), np.array([d[1] for d in decoded])


def evaluate(model: LoadedModel, dataset: ToyDataset, steps: int, seed: int, swap: bool = True) -> EvalResult:
    samples = sample_dataset(model, dataset, steps, seed)
    labels, rmse = decode_all(samples, dataset)
    acc = np.mean(labels == dataset.labels(), axis=1)
    flips = None
    if swap:
        flips = swap_flip_indicators(model, dataset, steps, seed)
    return EvalResult(acc, rmse, labels, flips)


def swap_flip_indicators(model: LoadedModel, dataset: ToyDataset, steps: int, seed: int) -> np.ndarray:
    """Re-sample with swapped speaker latents; score the segments whose label should change."""
    world = dataset.world
    s_new, spk_new = swapped_speakers(dataset)
    labels, _ = decode_all(sample_dataset(model, dataset, steps, seed, speakers=s_new), dataset)
    flips = []
    for i, it in enumerate(dataset.items):
        expected = world.label(it.codes.astype(np.int64), spk_new[i])
        changed = expected != it.labels
        flips.extend((labels[i][changed] == expected[changed]).astype(float))
    return np.array(flips)


def write_eval(result: EvalResult, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = out_dir / "metrics.csv"
    with open(metrics, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(EVAL_COLUMNS)
        for name, mean, std, n in result.rows():
            wr.writerow([name, repr(mean), repr(std), n])
    series = out_dir / "accuracy_series.csv"
    with open(series, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y"])
        for i, a in enumerate(result.accuracy):
            wr.writerow([i, repr(float(a))])
    return metrics, series


def write_samples(samples: np.ndarray, result: EvalResult, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "samples.npy", samples.astype("<f4"))
    path = out_dir / "sample_metrics.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["item", "label_accuracy", "rmse"])
        for i, (a, r) in enumerate(zip(result.accuracy, result.rmse)):
            wr.writerow([i, repr(float(a)), repr(float(r))])
    return path


# ---------------------------------------------------------------------------
# post-hoc EMA


@dataclass
class SnapshotSet:
    store: EmaSnapshotStore
    template: Checkpoint
    names: list[str]
    shapes: list[tuple[int, ...]]


def load_snapshots(directory: str | Path) -> SnapshotSet:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"snapshot directory not found: {directory}")
    ckpts = [load_checkpoint(p) for p in sorted(directory.glob("*.mpdf"))]
    ckpts = [c for c in ckpts if c.gamma is not None]
    if len(ckpts) < 2:
        raise ReconstructionError(f"need at least 2 EMA snapshots in {directory}, found {len(ckpts)}")
    ckpts.sort(key=lambda c: (c.step, c.gamma))
    template = ckpts[0]
    params = template.prefixed("param/")
    names, shapes = list(params), [a.shape for a in params.values()]
    store = EmaSnapshotStore()
    for c in ckpts:
        if c.config_hash != template.config_hash:
            raise ConfigMismatch("snapshots come from different configurations")
        p = c.prefixed("param/")
        store.add(c.gamma, c.step, np.concatenate([p[k].reshape(-1) for k in names]))
    return SnapshotSet(store, template, names, shapes)


def reconstruction_checkpoint(snaps: SnapshotSet, sigma_rel: float, step: int | None = None) -> Checkpoint:
    step = max(snaps.store.steps()) if step is None else step
    gamma = gamma_from_sigma_rel(sigma_rel)
    return _as_checkpoint(snaps, posthoc_reconstruct(snaps.store, gamma, step), gamma, step, sigma_rel)


def _as_checkpoint(snaps: SnapshotSet, flat: np.ndarray, gamma: float | None, step: int,
                   sigma_rel: float | None) -> Checkpoint:
    tensors = {}
    i = 0
    for name, shape in zip(snaps.names, snaps.shapes):
        size = int(np.prod(shape, dtype=np.int64))
        tensors[f"param/{name}"] = flat[i : i + size].reshape(shape)
        i += size
    for name, buf in snaps.template.prefixed("buffer/").items():
        tensors[f"buffer/{name}"] = buf
    meta = dict(snaps.template.meta, kind="ema_reconstruction", sigma_rel=sigma_rel)
    return Checkpoint(step, snaps.template.config_hash, tensors, meta, gamma)


def sweep(snaps: SnapshotSet, grid: list[float], dataset: ToyDataset, steps: int, seed: int,
          out_csv: str | Path, step: int | None = None):
    """Label accuracy of the reconstruction at every ``sigma_rel`` in ``grid``."""
    step = max(snaps.store.steps()) if step is None else step

    def score(flat: np.ndarray) -> float:
        model = model_from_checkpoint(_as_checkpoint(snaps, flat, None, step, None))
        return float(evaluate(model, dataset, steps, seed, swap=False).accuracy.mean())

    return ema_length_sweep(snaps.store, grid, score, step, out_csv)
