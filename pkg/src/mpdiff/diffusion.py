"""Preconditioned denoiser, uncertainty-weighted objective and Heun sampling.

Noise level and process time coincide (``sigma(t) = t``). The skip/out/in
scalings are the standard ones for data of RMS ``sigma_data``; combined with
the loss weight ``lambda(t) = (t^2 + sd^2) / (t sd)^2`` they make the
effective weight on the raw network error equal to one at every ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import NonFiniteError, Tensor

DenoiseFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_data: float = 0.5**0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 20.0
    rho: float = 7.0

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError(f"NoiseSchedule: sigma_data must be > 0, got {self.sigma_data}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("NoiseSchedule: need 0 < sigma_min < sigma_max")
        if not self.rho > 0 or not self.p_std > 0:
            raise ValueError("NoiseSchedule: rho and p_std must be positive")

    @staticmethod
    def sigma(t):
        return t

    def c_skip(self, t):
        sd2 = self.sigma_data**2
        return sd2 / (np.square(t) + sd2)

    def c_out(self, t):
        sd = self.sigma_data
        return t * sd / np.sqrt(np.square(t) + sd**2)

    def c_in(self, t):
        return 1.0 / np.sqrt(np.square(t) + self.sigma_data**2)

    def weight(self, t):
        """Loss weight ``lambda(t)``."""
        sd = self.sigma_data
        return (np.square(t) + sd**2) / np.square(t * sd)

    def sample_t(self, rng: Rng, n: int) -> np.ndarray:
        """Draw ``ln t ~ N(p_mean, p_std)``, truncated to ``[sigma_min, 2 sigma_max]``."""
        t = np.exp(self.p_mean + self.p_std * rng.normal(n))
        return np.clip(t, self.sigma_min, 2.0 * self.sigma_max)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    deterministic: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"SamplerConfig: steps must be >= 1, got {self.steps}")
        if not self.deterministic:
            raise ValueError("SamplerConfig: only the deterministic sampler is supported")


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise ValueError(f"process time must be finite and > 0, got {t}")
    return t


def _per_item(t: np.ndarray, batch: int) -> np.ndarray:
    return np.broadcast_to(t, (batch,)).astype(np.float64)


def precondition(x_t, s, v, t, net, schedule: NoiseSchedule, audit: dict | None = None) -> tuple[Tensor, Tensor]:
    """``D = c_skip x_t + c_out F(c_in x_t, s, v, t)``; also returns the net's ``u``."""
    t = _check_t(t)
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=net.dtype))
    B = x_t.shape[0]
    tb = _per_item(t, B)
    col = lambda a: a.reshape(B, 1, 1).astype(x_t.dtype)  # noqa: E731
    f_out, u = net(x_t * col(schedule.c_in(tb)), s, v, tb, audit=audit)
    d = x_t * col(schedule.c_skip(tb)) + f_out * col(schedule.c_out(tb))
    return d, u


def per_item_loss(d: Tensor, x: Tensor) -> Tensor:
    """Mean squared error per batch item (mean over feature and time)."""
    diff = d - x
    return T.mean(diff * diff, axis=(1, 2))


def loss_at_t(batch, t, net, schedule: NoiseSchedule, rng: Rng) -> Tensor:
    """Denoising loss at a single process time, mean over batch and elements."""
    x, s, v = batch
    t = float(_check_t(t))
    x = np.asarray(x, dtype=net.dtype)
    noise = (t * rng.normal(x.shape)).astype(x.dtype)
    d, _ = precondition(Tensor(x + noise), s, v, t, net, schedule)
    return T.mean(per_item_loss(d, Tensor(x)))


def training_objective(batch, net, schedule: NoiseSchedule, rng: Rng, t=None, stats: dict | None = None,
                       audit: dict | None = None) -> Tensor:
    """Uncertainty-weighted objective: ``mean(lambda(t) e^{-u(t)} J(t) + u(t))`` over items.

    One process time per item, drawn from ``rng`` unless ``t`` is given.
    ``stats`` receives per-item ``t``, ``u`` and loss; ``audit`` per-block magnitudes.
    """
    x, s, v = batch
    x = np.asarray(x, dtype=net.dtype)
    B = x.shape[0]
    t = schedule.sample_t(rng.child("t"), B) if t is None else _per_item(_check_t(t), B)
    noise = (t.reshape(B, 1, 1) * rng.child("noise").normal(x.shape)).astype(x.dtype)
    d, u = precondition(Tensor(x + noise), s, v, t, net, schedule, audit)
    if not np.all(np.isfinite(u.data)):
        raise NonFiniteError("training_objective: uncertainty head produced non-finite values")
    j = per_item_loss(d, Tensor(x))
    lam = schedule.weight(t).astype(x.dtype)
    obj = T.mean(j * lam * T.exp(-u) + u)
    if stats is not None:
        stats["t"] = t
        stats["u"] = u.data.copy()
        stats["loss"] = j.data.copy()
    return obj


def uncertainty_weighted(weighted_loss: float, u: float) -> float:
    """Scalar form ``L e^{-u} + u``; minimized at ``u = ln L``."""
    return weighted_loss * math.exp(-u) + u


# ---------------------------------------------------------------------------
# sampling


def sigma_steps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """``steps`` decreasing noise levels plus a trailing zero.

    ``sigma_i = (smax^(1/rho) + i/(M-1) (smin^(1/rho) - smax^(1/rho)))^rho``;
    a single step goes straight from ``sigma_max`` to zero.
    """
    if steps < 1:
        raise ValueError(f"sigma_steps: steps must be >= 1, got {steps}")
    r = 1.0 / schedule.rho
    if steps == 1:
        grid = np.array([schedule.sigma_max])
    else:
        i = np.arange(steps, dtype=np.float64)
        lo, hi = schedule.sigma_min**r, schedule.sigma_max**r
        grid = (hi + i / (steps - 1) * (lo - hi)) ** schedule.rho
    return np.append(grid, 0.0)


def heun_solve(denoise: DenoiseFn, x0: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Second-order deterministic integration of ``dx/dsigma = (x - D(x, sigma)) / sigma``.

    Heun's method on every step except the last one to ``sigma = 0``,
    which is a plain Euler step.
    """
    x = np.asarray(x0, dtype=np.float64)
    for i in range(len(sigmas) - 1):
        s_cur, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d = (x - denoise(x, s_cur)) / s_cur
        x_next = x + (s_next - s_cur) * d
        if s_next > 0:
            d2 = (x_next - denoise(x_next, s_next)) / s_next
            x_next = x + (s_next - s_cur) * 0.5 * (d + d2)
        x = x_next
    return x


def heun_sample(s, v, net, schedule: NoiseSchedule, cfg: SamplerConfig, rng: Rng, length: int) -> np.ndarray:
    """Generate ``[B, n_a, length]`` feature tracks conditioned on ``(s, v)``.

    The only randomness is the initial draw ``x ~ N(0, sigma_0^2 I)``.
    """
    s = np.asarray(s)
    B = s.shape[0]
    sigmas = sigma_steps(schedule, cfg.steps)
    x0 = sigmas[0] * rng.normal((B, net.cfg.in_channels, length))

    def denoise(x, sigma):
        d, _ = precondition(Tensor(x.astype(net.dtype)), s, v, sigma, net, schedule)
        return d.data.astype(np.float64)

    return heun_solve(denoise, x0, sigmas)


def estimate_sigma_data(features) -> float:
    """RMS of (standardized) feature values; needs at least 100 frames."""
    if isinstance(features, (list, tuple)):
        if not features:
            raise ValueError("estimate_sigma_data: empty subset")
        frames = sum(np.asarray(f).shape[-1] for f in features)
        sq = sum(float(np.sum(np.square(np.asarray(f, dtype=np.float64)))) for f in features)
        count = sum(np.asarray(f).size for f in features)
    else:
        arr = np.asarray(features, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("estimate_sigma_data: empty subset")
        frames = arr.shape[-1] * (int(np.prod(arr.shape[:-2])) if arr.ndim > 2 else 1)
        sq, count = float(np.sum(arr * arr)), arr.size
    if count == 0:
        raise ValueError("estimate_sigma_data: empty subset")
    if frames < 100:
        raise ValueError(f"estimate_sigma_data: need >= 100 frames, got {frames}")
    return math.sqrt(sq / count)
