"""Training loop, resumable state and EMA snapshot bookkeeping.

All randomness for step ``k`` comes from a stream addressed by ``(seed, k)``,
so resuming needs no generator state: a run interrupted at ``k`` and resumed
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, config_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import NoiseSchedule, estimate_sigma_data, training_objective
from .ema import EmaState
from .features import Standardizer, fit_standardizer
from .net import DenoiserConfig, DenoiserNet
from .optim import Adam, lr_schedule
from .rng import Rng, derive_stream
from .tensor import NonFiniteError
from .toydata import ToyDataset, load_dataset

log = logging.getLogger(__name__)

STATE_FILE = "train_state.mpdf"
METRICS_FILE = "metrics.csv"
SNAPSHOT_DIR = "snapshots"
METRIC_COLUMNS = [
    "step", "lr", "objective", "loss", "u_mean",
    "film_gain_abs_mean", "film_gamma_mean", "mag_min", "mag_max",
]


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, last_good: Path | None):
        where = str(last_good) if last_good is not None else "none (no checkpoint written yet)"
        super().__init__(f"non-finite objective at step {step}; last good checkpoint: {where}")
        self.step = step
        self.last_good = last_good


class ConfigMismatch(ValueError):
    pass


@dataclass
class TrainResult:
    step: int
    state_path: Path
    metrics_path: Path
    snapshot_dir: Path


# ---------------------------------------------------------------------------
# model <-> checkpoint


def model_meta(cfg: DenoiserConfig, spec: dict, std: Standardizer, schedule: NoiseSchedule, **extra) -> dict:
    meta = {
        "model": cfg.to_dict(),
        "data_spec": spec,
        "standardizer": {"shift": std.shift, "scale": std.scale, "target_var": std.target_var},
        "schedule": {
            "sigma_data": schedule.sigma_data, "p_mean": schedule.p_mean, "p_std": schedule.p_std,
            "sigma_min": schedule.sigma_min, "sigma_max": schedule.sigma_max, "rho": schedule.rho,
        },
    }
    meta.update(extra)
    return meta


def model_tensors(net: DenoiserNet, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """``param/*`` records (from ``flat`` when given) plus ``buffer/*`` records."""
    out = {}
    i = 0
    for name, p in net.parameters().items():
        if flat is None:
            out[f"param/{name}"] = p.data
        else:
            out[f"param/{name}"] = flat[i : i + p.size].reshape(p.shape)
            i += p.size
    for name, b in net.buffers().items():
        out[f"buffer/{name}"] = b
    return out


@dataclass
class LoadedModel:
    net: DenoiserNet
    standardizer: Standardizer
    schedule: NoiseSchedule
    ckpt: Checkpoint

    @property
    def data_spec(self) -> dict:
        return self.ckpt.meta["data_spec"]


def load_model(path: str | Path) -> LoadedModel:
    return model_from_checkpoint(load_checkpoint(path), str(path))


def model_from_checkpoint(ckpt: Checkpoint, path: str = "checkpoint") -> LoadedModel:
    meta = ckpt.meta
    for key in ("model", "data_spec", "standardizer", "schedule"):
        if key not in meta:
            raise ConfigMismatch(f"{path}: checkpoint lacks '{key}' metadata")
    cfg = DenoiserConfig(**meta["model"])
    if config_hash(cfg.to_dict(), meta["data_spec"]) != ckpt.config_hash:
        raise ConfigMismatch(f"{path}: stored config hash does not match its metadata")
    net = DenoiserNet(cfg)
    params = ckpt.prefixed("param/")
    for name, p in net.parameters().items():
        if name not in params or params[name].shape != p.shape:
            raise ConfigMismatch(f"{path}: missing or mis-shaped parameter {name!r}")
        p.data[...] = params[name]
    net.load_buffers(ckpt.prefixed("buffer/"))
    return LoadedModel(net, Standardizer(**meta["standardizer"]), NoiseSchedule(**meta["schedule"]), ckpt)


# ---------------------------------------------------------------------------
# training


def check_dims(cfg: DenoiserConfig, spec) -> None:
    pairs = [("in_channels", cfg.in_channels, "n_a", spec.n_a), ("speaker_dim", cfg.speaker_dim, "n_s", spec.n_s),
             ("cond_dim", cfg.cond_dim, "n_v", spec.n_v)]
    for a, va, b, vb in pairs:
        if va != vb:
            raise ConfigMismatch(f"model {a}={va} does not match dataset {b}={vb}")


def _film_gain_abs_mean(net: DenoiserNet) -> float:
    # g * h == (-g) * (-h), so only the magnitude of a gain is meaningful
    gains = net.film_gains()
    return float(np.abs(gains).mean()) if gains.size else 0.0


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: ToyDataset | None = None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else load_dataset(cfg.data.train)
        self.spec = self.dataset.spec.to_dict()
        x, s, v = self.dataset.arrays()
        self.standardizer = fit_standardizer(x)
        self.x = self.standardizer.transform(x).astype(np.float32)
        self.s, self.v = s, v
        sd = cfg.schedule.sigma_data or estimate_sigma_data(self.x)
        self.schedule = cfg.schedule.build(sd)
        self.model_cfg = cfg.denoiser
        check_dims(self.model_cfg, self.dataset.spec)
        self.hash = config_hash(self.model_cfg.to_dict(), self.spec)

        self.net = DenoiserNet(self.model_cfg, seed=cfg.seed)
        self.params = self.net.parameters()
        o = cfg.optimizer
        self.opt = Adam(self.params, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        self.ema = EmaState.from_sigma_rels(cfg.ema.sigma_rels)
        self.step = 0

        self.out_dir = Path(cfg.out_dir)
        self.state_path = self.out_dir / STATE_FILE
        self.metrics_path = self.out_dir / METRICS_FILE
        self.snapshot_dir = self.out_dir / SNAPSHOT_DIR
        self.last_good: Path | None = None

    # -- state -----------------------------------------------------------------
    def meta(self, **extra) -> dict:
        return model_meta(self.model_cfg, self.spec, self.standardizer, self.schedule, **extra)

    def save_state(self) -> Path:
        tensors = model_tensors(self.net)
        for name in self.params:
            tensors[f"adam.m/{name}"] = self.opt.state.m[name]
            tensors[f"adam.v/{name}"] = self.opt.state.v[name]
        for i, buf in enumerate(self.ema.buffers):
            tensors[f"ema/{i}"] = buf
        meta = self.meta(kind="train_state", adam_step=self.opt.state.step, ema_step=self.ema.step,
                         ema_sigma_rels=list(self.cfg.ema.sigma_rels))
        save_checkpoint(self.state_path, Checkpoint(self.step, self.hash, tensors, meta))
        self.last_good = self.state_path
        return self.state_path

    def load_state(self, path: str | Path, force: bool = False) -> None:
        ckpt = load_checkpoint(path)
        if ckpt.config_hash != self.hash and not force:
            raise ConfigMismatch(f"{path}: config hash differs from the current run (use --force to override)")
        params = ckpt.prefixed("param/")
        m, v = ckpt.prefixed("adam.m/"), ckpt.prefixed("adam.v/")
        for name, p in self.params.items():
            if name not in params or params[name].shape != p.shape:
                raise ConfigMismatch(f"{path}: missing or mis-shaped parameter {name!r}")
            p.data[...] = params[name]
            self.opt.state.m[name][...] = m[name]
            self.opt.state.v[name][...] = v[name]
        self.net.load_buffers(ckpt.prefixed("buffer/"))
        self.opt.state.step = int(ckpt.meta["adam_step"])
        ema = ckpt.prefixed("ema/")
        self.ema.buffers = [ema[str(i)].copy() for i in range(len(self.ema.gammas))] if ema else []
        self.ema.step = int(ckpt.meta["ema_step"])
        self.step = ckpt.step

    def save_snapshots(self) -> list[Path]:
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for sr, gamma, buf in zip(self.cfg.ema.sigma_rels, self.ema.gammas, self.ema.buffers):
            path = self.snapshot_dir / f"ema_{sr:.4f}_{self.step:08d}.mpdf"
            meta = self.meta(kind="ema_snapshot", sigma_rel=sr)
            save_checkpoint(path, Checkpoint(self.step, self.hash, model_tensors(self.net, buf), meta, gamma))
            paths.append(path)
        return paths

    # -- loop --------------------------------------------------------------------
    def _batch_objective(self, step: int, audit: dict | None = None):
        rng = Rng(self.cfg.seed, derive_stream(0, "train-step", step))
        idx = rng.child("batch").integers(0, len(self.x), self.cfg.batch_size)
        stats: dict = {}
        batch = (self.x[idx], self.s[idx], self.v[idx])
        obj = training_objective(batch, self.net, self.schedule, rng, stats=stats, audit=audit)
        return obj, stats

    def _row(self, step: int, lr: float, obj: float, stats: dict, audit: dict) -> list:
        gammas = [v for k, v in audit.items() if k.endswith(".gamma")]
        mags = [v for k, v in audit.items() if not k.endswith(".gamma")] or [float("nan")]
        return [step, lr, obj, float(np.mean(stats["loss"])), float(np.mean(stats["u"])),
                _film_gain_abs_mean(self.net), float(np.mean(gammas)) if gammas else 0.0,
                float(min(mags)), float(max(mags))]

    def _open_metrics(self, resumed: bool):
        rows = []
        if resumed and self.metrics_path.exists():
            with open(self.metrics_path, newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) <= self.step]
        fh = open(self.metrics_path, "w", newline="")
        wr = csv.writer(fh)
        wr.writerow(METRIC_COLUMNS)
        wr.writerows(rows)
        return fh, wr

    def run(self, resume: str | Path | None = None, force: bool = False, stop_at: int | None = None) -> TrainResult:
        total = self.cfg.total_steps
        end = total if stop_at is None else min(stop_at, total)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if resume is not None:
            self.load_state(resume, force=force)
            self.last_good = Path(resume)
            log.info("resumed at step %d", self.step)
        fh, wr = self._open_metrics(resumed=resume is not None)
        try:
            if self.step == 0:
                audit: dict = {}
                obj, stats = self._batch_objective(0, audit)
                wr.writerow(self._row(0, 0.0, obj.item(), stats, audit))
            every = self.cfg.snapshot_every
            warmup = self.cfg.warmup_steps
            t0 = time.time()
            while self.step < end:
                step = self.step + 1
                lr = lr_schedule(step, self.cfg.optimizer.lr, warmup)
                audit = {}
                self.opt.zero_grad()
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        obj, stats = self._batch_objective(step, audit)
                        value = obj.item()
                        if not np.isfinite(value):
                            raise NonFiniteError("objective is not finite")
                        obj.backward()
                        self.opt.step(lr)
                except NonFiniteError:
                    raise TrainingDiverged(step, self.last_good) from None
                self.net.renormalize()
                self.ema.update(self.net.get_flat(), step)
                self.step = step
                wr.writerow(self._row(step, lr, value, stats, audit))
                if step % every == 0 or step == total:
                    self.save_snapshots()
                    self.save_state()
                    fh.flush()
                    log.info("step %d/%d objective %.4f (%.1fs)", step, total, value, time.time() - t0)
            if self.last_good is None or self.step % every:
                self.save_state()
        finally:
            fh.close()
        return TrainResult(self.step, self.state_path, self.metrics_path, self.snapshot_dir)


def train(cfg: RunConfig, resume: str | Path | None = None, force: bool = False,
          stop_at: int | None = None) -> TrainResult:
    return Trainer(cfg).run(resume=resume, force=force, stop_at=stop_at)


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in METRIC_COLUMNS}
