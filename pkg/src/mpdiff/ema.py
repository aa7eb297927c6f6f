"""Power-function EMA tracking and post-hoc profile reconstruction.

A power EMA with exponent ``gamma`` averages the trajectory with weights
proportional to ``t^gamma`` over ``[0, n]``; its width relative to the
run length is ``sigma_rel``. Snapshots taken at several steps and two
exponents span enough profiles that any other ``(gamma, n)`` profile can be
approximated by a least-squares combination of them.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SIGMA_REL_MAX = 0.28


class ReconstructionError(RuntimeError):
    pass


def classic_ema_update(theta_hat, theta, beta: float):
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"classic_ema_update: beta must be in [0, 1), got {beta}")
    return beta * theta_hat + (1.0 - beta) * theta


def power_beta(gamma: float, n: int) -> float:
    """Decay at step ``n``: ``(1 - 1/n)^(gamma + 1)``; zero at ``n = 1``."""
    if n < 1:
        raise ValueError(f"power_beta: step must be >= 1, got {n}")
    return (1.0 - 1.0 / n) ** (gamma + 1.0)


def power_profile_weights(gamma: float, n: int) -> np.ndarray:
    """Exact weights the power-EMA recurrence gives steps ``1..n``.

    ``w_k = (k^(g+1) - (k-1)^(g+1)) / n^(g+1)``, i.e. the continuous power
    profile integrated over each step.
    """
    k = np.arange(1, n + 1, dtype=np.float64)
    return ((k / n) ** (gamma + 1) - ((k - 1) / n) ** (gamma + 1))


def sigma_rel_from_gamma(gamma: float) -> float:
    return math.sqrt((gamma + 1) / ((gamma + 2) ** 2 * (gamma + 3)))


def gamma_from_sigma_rel(sigma_rel: float, tol: float = 1e-10) -> float:
    """Invert :func:`sigma_rel_from_gamma` by bisection (monotone decreasing in gamma)."""
    if not 0.0 < sigma_rel <= SIGMA_REL_MAX:
        raise ValueError(f"gamma_from_sigma_rel: sigma_rel must be in (0, {SIGMA_REL_MAX}], got {sigma_rel}")
    lo, hi = 0.0, 1.0
    while sigma_rel_from_gamma(hi) > sigma_rel:
        hi *= 2.0
        if hi > 1e12:
            raise ValueError(f"gamma_from_sigma_rel: sigma_rel {sigma_rel} too small to solve")
    if sigma_rel_from_gamma(lo) < sigma_rel:
        raise ValueError(f"gamma_from_sigma_rel: sigma_rel {sigma_rel} exceeds the gamma=0 profile width")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if sigma_rel_from_gamma(mid) > sigma_rel:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class EmaState:
    """Power-EMA buffers for several exponents. Buffers are filled at step 1."""

    gammas: tuple[float, ...]
    step: int = 0
    buffers: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_sigma_rels(cls, sigma_rels: Iterable[float]) -> "EmaState":
        return cls(tuple(gamma_from_sigma_rel(s) for s in sigma_rels))

    def update(self, theta: np.ndarray, n: int) -> None:
        power_ema_update(self, theta, n)


def power_ema_update(state: EmaState, theta: np.ndarray, n: int) -> EmaState:
    if n < 1:
        raise ValueError(f"power_ema_update: step must be >= 1, got {n}")
    theta = np.asarray(theta)
    if not state.buffers:
        state.buffers = [np.zeros_like(theta) for _ in state.gammas]
    for buf, gamma in zip(state.buffers, state.gammas):
        if buf.shape != theta.shape:
            raise ValueError(f"power_ema_update: buffer shape {buf.shape} != parameter shape {theta.shape}")
        beta = power_beta(gamma, n)
        if beta == 0.0:
            buf[...] = theta
        else:
            buf *= beta
            buf += (1.0 - beta) * theta
    state.step = n
    return state


# ---------------------------------------------------------------------------
# snapshots and reconstruction


@dataclass(frozen=True)
class Snapshot:
    gamma: float
    step: int
    theta: np.ndarray


@dataclass
class EmaSnapshotStore:
    records: list[Snapshot] = field(default_factory=list)

    def add(self, gamma: float, step: int, theta: np.ndarray) -> None:
        prior = [r.step for r in self.records if r.gamma == gamma]
        if prior and step <= max(prior):
            raise ValueError(f"snapshot steps must increase per gamma: {step} after {max(prior)}")
        self.records.append(Snapshot(float(gamma), int(step), np.array(theta, copy=True)))

    def __len__(self) -> int:
        return len(self.records)

    def gammas(self) -> list[float]:
        return sorted({r.gamma for r in self.records})

    def steps(self) -> list[int]:
        return sorted({r.step for r in self.records})

    def find(self, gamma: float, step: int) -> Snapshot | None:
        for r in self.records:
            if r.step == step and abs(r.gamma - gamma) <= 1e-12 * max(1.0, abs(gamma)):
                return r
        return None


def profile_inner(g1: float, n1: float, g2: float, n2: float) -> float:
    """``<p1, p2>`` for profiles ``p(t) = (g+1) t^g / n^(g+1)`` on ``[0, n]``."""
    m = min(n1, n2)
    # log-space keeps large exponents finite
    logv = (
        math.log(g1 + 1) + math.log(g2 + 1) + (g1 + g2 + 1) * math.log(m)
        - math.log(g1 + g2 + 1) - (g1 + 1) * math.log(n1) - (g2 + 1) * math.log(n2)
    )
    return math.exp(logv)


def solve_weights(profiles: Sequence[tuple[float, int]], target: tuple[float, int]) -> np.ndarray:
    """Least-squares coefficients of ``target`` in the span of ``profiles``."""
    k = len(profiles)
    A = np.empty((k, k))
    b = np.empty(k)
    for i, (gi, ni) in enumerate(profiles):
        b[i] = profile_inner(gi, ni, *target)
        for j, (gj, nj) in enumerate(profiles):
            A[i, j] = profile_inner(gi, ni, gj, nj)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        A = A + 1e-12 * np.trace(A) / k * np.eye(k)
        cond = np.linalg.cond(A)
    try:
        w = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise ReconstructionError(f"snapshot Gram matrix is singular (condition estimate {cond:.3e})") from None
    if not np.all(np.isfinite(w)):
        raise ReconstructionError(f"snapshot Gram solve failed (condition estimate {cond:.3e})")
    return w


def posthoc_reconstruct(store: EmaSnapshotStore, gamma: float, step: int) -> np.ndarray:
    """Parameter vector approximating the power EMA ``(gamma, step)`` from snapshots.

    Uses every stored snapshot taken at or before ``step``. A target that is
    itself stored is returned as-is.
    """
    usable = [r for r in store.records if r.step <= step]
    if len(usable) < 2:
        raise ReconstructionError(f"need at least 2 snapshots at or before step {step}, have {len(usable)}")
    hit = store.find(gamma, step)
    if hit is not None:
        return hit.theta.copy()
    w = solve_weights([(r.gamma, r.step) for r in usable], (gamma, step))
    out = np.zeros(usable[0].theta.shape, dtype=np.float64)
    for wi, r in zip(w, usable):
        out += wi * r.theta
    return out.astype(usable[0].theta.dtype)


def ema_length_sweep(
    store: EmaSnapshotStore,
    sigma_rels: Sequence[float],
    evaluate: Callable[[np.ndarray], float],
    step: int | None = None,
    out_csv: str | Path | None = None,
) -> list[tuple[float, float, float]]:
    """Reconstruct and evaluate each EMA length; failed rows carry ``nan``."""
    step = max(store.steps()) if step is None else step
    rows = []
    for sr in sigma_rels:
        gamma = float("nan")
        try:
            gamma = gamma_from_sigma_rel(sr)
            metric = float(evaluate(posthoc_reconstruct(store, gamma, step)))
        except (ValueError, ReconstructionError) as exc:
            log.warning("sweep row sigma_rel=%s failed: %s", sr, exc)
            metric = float("nan")
        rows.append((float(sr), gamma, metric))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sigma_rel", "gamma", "metric"])
            for r in rows:
                wr.writerow([repr(x) for x in r])
    return rows


def parse_grid(spec: str) -> list[float]:
    """``"lo:hi:n"`` -> ``n`` evenly spaced values including both ends."""
    try:
        lo, hi, n = spec.split(":")
        lo_f, hi_f, n_i = float(lo), float(hi), int(n)
    except ValueError:
        raise ValueError(f"grid must look like lo:hi:n, got {spec!r}") from None
    if n_i < 1:
        raise ValueError("grid needs at least one point")
    return [lo_f] if n_i == 1 else list(np.linspace(lo_f, hi_f, n_i))
