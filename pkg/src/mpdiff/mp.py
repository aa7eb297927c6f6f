"""Magnitude-preserving layers.

Everything here assumes activations with unit expected magnitude (RMS) and
is built so that the output keeps unit magnitude when inputs are
uncorrelated: forced-weight-normalized convolutions, a blended sum, a
rescaled SiLU, and the FiLM variant whose blend factor is produced by the
conditioning signal.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

SILU_MAGNITUDE = 0.596
WEIGHT_EPS = 1e-4


def magnitude(x) -> float:
    """Root-mean-square of all elements."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.size == 0:
        raise ValueError("magnitude: empty tensor")
    return float(np.sqrt(np.mean(np.square(arr, dtype=np.float64))))


def mp_sum(a, b, t: float = 0.5):
    """``((1-t) a + t b) / sqrt((1-t)^2 + t^2)``; works on tensors or arrays."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"mp_sum: blend t must be in [0, 1], got {t}")
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    norm = math.sqrt((1 - t) ** 2 + t**2)
    return a * ((1 - t) / norm) + b * (t / norm)


def mp_silu(x):
    if isinstance(x, Tensor):
        return T.silu(x) * (1.0 / SILU_MAGNITUDE)
    x = np.asarray(x)
    return x * T._sigmoid_np(x) / SILU_MAGNITUDE


def mp_cat(a: Tensor, b: Tensor, axis: int = 1, t: float = 0.5) -> Tensor:
    """Concatenate along ``axis`` keeping unit magnitude, ``t`` weighting ``b``."""
    na, nb = a.shape[axis], b.shape[axis]
    c = math.sqrt((na + nb) / ((1 - t) ** 2 + t**2))
    wa = c / math.sqrt(na) * (1 - t)
    wb = c / math.sqrt(nb) * t
    return T.concat([a * wa, b * wb], axis=axis)


def pixel_norm(x: Tensor, axis: int = 1, eps: float = WEIGHT_EPS) -> Tensor:
    """Rescale every position so the vector along ``axis`` has unit RMS."""
    rms = T.sqrt(T.mean(x * x, axis=axis, keepdims=True))
    return x / (rms + eps)


def normalize_rows(w: np.ndarray, eps: float = WEIGHT_EPS) -> np.ndarray:
    """Scale each output-channel slice of ``w`` to unit RMS (idempotent)."""
    flat = w.reshape(w.shape[0], -1).astype(np.float64)
    rms = np.sqrt(np.mean(flat * flat, axis=1, keepdims=True))
    return (flat / np.maximum(rms, eps)).reshape(w.shape).astype(w.dtype)


def normalized_weight(w: Tensor, gain=1.0, eps: float = WEIGHT_EPS) -> Tensor:
    """``gain * w / max(rms_row(w), eps) / sqrt(fan_in)`` as a single tape node."""
    gain_t = gain if isinstance(gain, Tensor) else None
    g_val = float(gain_t.data) if gain_t is not None else float(gain)
    wd = w.data
    rows = wd.shape[0]
    fan = wd.size // rows
    flat = wd.reshape(rows, -1).astype(np.float64)
    rms = np.sqrt(np.mean(flat * flat, axis=1, keepdims=True))
    live = rms > eps
    denom = np.where(live, rms, eps)
    unit = flat / denom / math.sqrt(fan)
    out = (g_val * unit).reshape(wd.shape).astype(wd.dtype)

    def grad_fn(up):
        gf = up.reshape(rows, -1).astype(np.float64)
        gw = None
        if w.requires_grad:
            scale = g_val / math.sqrt(fan)
            dot = np.sum(gf * flat, axis=1, keepdims=True)
            gw = scale * (gf / denom - np.where(live, flat * dot / (denom**3 * fan), 0.0))
            gw = gw.reshape(wd.shape).astype(wd.dtype)
        gg = None
        if gain_t is not None and gain_t.requires_grad:
            gg = np.asarray(np.sum(gf * unit), dtype=gain_t.dtype).reshape(gain_t.shape)
        return gw, gg

    parents = (w, gain_t) if gain_t is not None else (w,)
    return T._make(out, parents, grad_fn, "normalized_weight")


class MpConv1d:
    """Bias-free 1-D convolution with forced weight normalization.

    The stored kernel keeps unit-RMS output-channel slices (restored by
    :meth:`renormalize` after each optimizer step); at use the slices are
    normalized again inside the graph and scaled by ``1/sqrt(fan_in)`` so
    each output channel applies a unit-norm filter.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: Rng, name: str = "conv", dtype=np.float32):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.name = name
        w = rng.normal((out_ch, in_ch, kernel)).astype(dtype)
        self.weight = Tensor(normalize_rows(w), requires_grad=True)

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kernel

    def effective_weight(self, gain=1.0) -> Tensor:
        return normalized_weight(self.weight, gain)

    def __call__(self, x: Tensor, gain=1.0) -> Tensor:
        return T.conv1d(x, self.effective_weight(gain), padding=self.kernel // 2)

    def renormalize(self) -> None:
        self.weight.data[...] = normalize_rows(self.weight.data)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight}


class FilmHeads:
    """Condition networks for MP-FiLM.

    ``beta``: k=5 conv -> mp_silu -> pointwise conv, then per-frame unit-RMS
    normalization across channels. ``gamma``: k=5 conv -> mp_silu ->
    pointwise conv -> learned scalar gain (initialized to 0) -> clamp to [0, 1].
    """

    def __init__(self, cond_ch: int, out_ch: int, hidden: int, rng: Rng, name: str = "film", dtype=np.float32):
        self.name = name
        self.beta_conv = MpConv1d(cond_ch, hidden, 5, rng.child("beta_conv"), f"{name}.beta_conv", dtype)
        self.beta_pw = MpConv1d(hidden, out_ch, 1, rng.child("beta_pw"), f"{name}.beta_pw", dtype)
        self.gamma_conv = MpConv1d(cond_ch, hidden, 5, rng.child("gamma_conv"), f"{name}.gamma_conv", dtype)
        self.gamma_pw = MpConv1d(hidden, out_ch, 1, rng.child("gamma_pw"), f"{name}.gamma_pw", dtype)
        self.gain = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def convs(self) -> list[MpConv1d]:
        return [self.beta_conv, self.beta_pw, self.gamma_conv, self.gamma_pw]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for conv in self.convs():
            out.update(conv.parameters())
        out[f"{self.name}.gain"] = self.gain
        return out

    def beta(self, c: Tensor) -> Tensor:
        return pixel_norm(self.beta_pw(mp_silu(self.beta_conv(c))))

    def gamma(self, c: Tensor) -> Tensor:
        h = self.gamma_pw(mp_silu(self.gamma_conv(c)))
        return T.clamp(h * self.gain, 0.0, 1.0)


def film_blend(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-element MP blend of ``x`` toward ``beta`` by ``gamma`` in [0, 1]."""
    keep = 1.0 - gamma
    denom = T.sqrt(keep * keep + gamma * gamma)
    return (keep * x + gamma * beta) / denom


def mp_film(x: Tensor, c: Tensor, heads: FilmHeads, audit: dict | None = None) -> Tensor:
    """MP-FiLM of activations ``x [B, C, T]`` by condition ``c [B, Cc, T]``.

    With the gain at zero the blend factor is identically zero and the
    formula reduces to ``x`` bit-exactly, while the gain still receives a
    gradient. ``audit`` (optional) receives the mean blend factor under
    ``"<heads.name>.gamma"``.
    """
    if x.ndim != 3 or c.ndim != 3 or x.shape[0] != c.shape[0] or x.shape[2] != c.shape[2]:
        raise T.ShapeError(
            f"mp_film: condition {c.shape} must share batch and time length with activations {x.shape}"
        )
    gamma = heads.gamma(c)
    if audit is not None:
        audit[f"{heads.name}.gamma"] = float(np.mean(gamma.data, dtype=np.float64))
    return film_blend(x, gamma, heads.beta(c))
