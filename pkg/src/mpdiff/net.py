"""1-D magnitude-preserving U-Net denoiser with per-frame condition fusion.

Layout per level ``l`` (channels ``base_width * channel_mults[l]``, length
``T / 2**l``):

* encoder: optional down block, then ``blocks_per_level`` blocks; every block
  output is kept as a skip.
* decoder (deepest level first): optional up block, then
  ``blocks_per_level + 1`` blocks, each consuming one skip through ``mp_cat``.
  Every decoder block ends with one MP-FiLM layer fed by the condition track,
  resampled to the block's temporal resolution.

Noise level and speaker enter through a shared embedding (Fourier features of
``ln(sigma)/4`` -> two MP linears, blended with a projection of the speaker
latent) that modulates each block channel-wise. The uncertainty head is a
separate bias-free linear map on the same Fourier features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .mp import FilmHeads, MpConv1d, magnitude, mp_cat, mp_film, mp_silu, mp_sum, pixel_norm
from .rng import Rng
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 16
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 2
    emb_dim: int = 64
    speaker_dim: int = 16
    cond_dim: int = 32
    film_hidden: int = 32
    down_factor: int = 2
    fourier_dim: int = 32
    speaker_blend: float = 0.3
    res_blend: float = 0.3
    concat_blend: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        dims = [self.in_channels, self.base_width, self.emb_dim, self.speaker_dim, self.cond_dim,
                self.film_hidden, self.fourier_dim, self.down_factor]
        if any(d < 1 for d in dims) or not self.channel_mults or min(self.channel_mults) < 1:
            raise ValueError(f"DenoiserConfig: all dimensions must be positive: {self}")
        if self.blocks_per_level < 0:
            raise ValueError("DenoiserConfig: blocks_per_level must be >= 0")
        for name in ("speaker_blend", "res_blend", "concat_blend"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"DenoiserConfig: {name} must be in [0, 1]")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def total_downsample(self) -> int:
        return self.down_factor ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


def resample_condition(v, target_len: int, level_factor: int = 1) -> Tensor:
    """Linear interpolation of ``v [B, C, N]`` onto ``target_len`` frames, then
    average pooling by ``level_factor``."""
    if target_len < 1:
        raise ValueError(f"resample_condition: target_len must be >= 1, got {target_len}")
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v))
    if v.shape[-1] < 2:
        raise ShapeError(f"resample_condition: need at least 2 condition frames, got {v.shape}")
    out = T.resample_linear(v, target_len)
    return T.avg_pool1d(out, level_factor)


class Block:
    def __init__(self, name: str, in_ch: int, out_ch: int, cfg: DenoiserConfig, rng: Rng,
                 flavor: str, resample: str = "keep", dtype=np.float32):
        self.name, self.flavor, self.resample = name, flavor, resample
        self.in_ch, self.out_ch = in_ch, out_ch
        self.res_blend = cfg.res_blend
        self.factor = cfg.down_factor
        self.conv_skip = MpConv1d(in_ch, out_ch, 1, rng.child("skip"), f"{name}.conv_skip", dtype) if in_ch != out_ch else None
        self.conv0 = MpConv1d(out_ch if flavor == "enc" else in_ch, out_ch, 3, rng.child("c0"), f"{name}.conv0", dtype)
        self.emb_linear = MpConv1d(cfg.emb_dim, out_ch, 1, rng.child("emb"), f"{name}.emb_linear", dtype)
        self.emb_gain = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.conv1 = MpConv1d(out_ch, out_ch, 3, rng.child("c1"), f"{name}.conv1", dtype)
        self.film = (
            FilmHeads(cfg.cond_dim, out_ch, cfg.film_hidden, rng.child("film"), f"{name}.film", dtype)
            if flavor == "dec" else None
        )

    def convs(self) -> list[MpConv1d]:
        out = [c for c in (self.conv_skip, self.conv0, self.emb_linear, self.conv1) if c is not None]
        if self.film is not None:
            out += self.film.convs()
        return out

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for c in (self.conv_skip, self.conv0, self.emb_linear, self.conv1):
            if c is not None:
                params.update(c.parameters())
        params[f"{self.name}.emb_gain"] = self.emb_gain
        if self.film is not None:
            params.update(self.film.parameters())
        return params

    def __call__(self, x: Tensor, emb: Tensor, cond: Tensor | None, audit: dict | None = None) -> Tensor:
        if self.resample == "down":
            x = T.avg_pool1d(x, self.factor)
        elif self.resample == "up":
            x = T.upsample_nearest1d(x, self.factor)
        if self.flavor == "enc":
            if self.conv_skip is not None:
                x = self.conv_skip(x)
            x = pixel_norm(x)
        y = self.conv0(mp_silu(x))
        scale = self.emb_linear(emb, gain=self.emb_gain) + 1.0
        y = mp_silu(y * scale)
        y = self.conv1(y)
        if self.flavor == "dec" and self.conv_skip is not None:
            x = self.conv_skip(x)
        x = mp_sum(x, y, self.res_blend)
        if self.film is not None:
            x = mp_film(x, cond, self.film, audit)
        return x


class DenoiserNet:
    """``forward(x_in, s, v, sigma) -> (F, u)``; see module docstring."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = Rng(seed, 0x5EED)
        fr = rng.child("fourier")
        # f32-representable so checkpoints reproduce them exactly
        self.fourier_freqs = fr.normal(cfg.fourier_dim).astype(np.float32).astype(np.float64)
        self.fourier_phases = fr.uniform(0.0, 1.0, cfg.fourier_dim).astype(np.float32).astype(np.float64)

        self.emb_fourier = MpConv1d(cfg.fourier_dim, cfg.emb_dim, 1, rng.child("emb_fourier"), "emb.fourier", dtype)
        self.emb_noise = MpConv1d(cfg.emb_dim, cfg.emb_dim, 1, rng.child("emb_noise"), "emb.noise", dtype)
        self.emb_speaker = MpConv1d(cfg.speaker_dim, cfg.emb_dim, 1, rng.child("emb_speaker"), "emb.speaker", dtype)
        self.u_weight = Tensor(np.zeros((1, cfg.fourier_dim), dtype=dtype), requires_grad=True)

        widths = [cfg.base_width * m for m in cfg.channel_mults]
        self.conv_in = MpConv1d(cfg.in_channels + 1, widths[0], 3, rng.child("conv_in"), "conv_in", dtype)
        self.enc: list[tuple[int, Block]] = []
        skip_ch = [widths[0]]
        cout = widths[0]
        for level, width in enumerate(widths):
            if level > 0:
                blk = Block(f"enc.{level}.down", cout, cout, cfg, rng.child("enc", level, "down"), "enc", "down", dtype)
                self.enc.append((level, blk))
                skip_ch.append(cout)
            for i in range(cfg.blocks_per_level):
                blk = Block(f"enc.{level}.block{i}", cout, width, cfg, rng.child("enc", level, i), "enc", "keep", dtype)
                cout = width
                self.enc.append((level, blk))
                skip_ch.append(cout)

        self.dec: list[tuple[int, Block, bool]] = []
        for level in reversed(range(cfg.levels)):
            width = widths[level]
            if level < cfg.levels - 1:
                blk = Block(f"dec.{level}.up", cout, cout, cfg, rng.child("dec", level, "up"), "dec", "up", dtype)
                self.dec.append((level, blk, False))
            for i in range(cfg.blocks_per_level + 1):
                cin = cout + skip_ch.pop()
                blk = Block(f"dec.{level}.block{i}", cin, width, cfg, rng.child("dec", level, i), "dec", "keep", dtype)
                cout = width
                self.dec.append((level, blk, True))
        self.conv_out = MpConv1d(cout, cfg.in_channels, 3, rng.child("conv_out"), "conv_out", dtype)
        self.out_gain = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    # -- parameter bookkeeping ---------------------------------------------
    def mp_convs(self) -> list[MpConv1d]:
        convs = [self.emb_fourier, self.emb_noise, self.emb_speaker, self.conv_in]
        for _, blk in self.enc:
            convs += blk.convs()
        for _, blk, _ in self.dec:
            convs += blk.convs()
        convs.append(self.conv_out)
        return convs

    def film_heads(self) -> list[FilmHeads]:
        return [blk.film for _, blk, _ in self.dec if blk.film is not None]

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for c in (self.emb_fourier, self.emb_noise, self.emb_speaker, self.conv_in):
            params.update(c.parameters())
        params["u.weight"] = self.u_weight
        for _, blk in self.enc:
            params.update(blk.parameters())
        for _, blk, _ in self.dec:
            params.update(blk.parameters())
        params.update(self.conv_out.parameters())
        params["conv_out.gain"] = self.out_gain
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        return {"fourier.freqs": self.fourier_freqs, "fourier.phases": self.fourier_phases}

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        self.fourier_freqs = np.asarray(bufs["fourier.freqs"], dtype=np.float64)
        self.fourier_phases = np.asarray(bufs["fourier.phases"], dtype=np.float64)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def renormalize(self) -> None:
        for c in self.mp_convs():
            c.renormalize()

    def film_gains(self) -> np.ndarray:
        return np.array([float(h.gain.data) for h in self.film_heads()])

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters().values()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.parameters().values():
            p.data[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def receptive_radius(self) -> int:
        """Conservative bound (in full-rate frames) on how far any output frame can see.

        Sums every conv half-width, resampling step and the condition
        interpolation along the whole network, so it bounds every path.
        """
        f = self.cfg.down_factor
        total = 3 + 1  # conv_in, conv_out
        for level, blk in self.enc:
            scale = f**level
            total += 2 * scale + (scale if blk.resample == "down" else 0)
        for level, blk, _ in self.dec:
            scale = f**level
            total += 2 * scale + 2 * scale + f ** (level + 1)  # convs, FiLM k=5 conv, up/pool
        return total + 3  # linear interpolation support

    # -- forward --------------------------------------------------------------
    def fourier(self, sigma: np.ndarray) -> np.ndarray:
        c_noise = np.log(np.asarray(sigma, dtype=np.float64)) / 4.0
        arg = 2 * np.pi * (c_noise[:, None] * self.fourier_freqs[None, :] + self.fourier_phases[None, :])
        return (np.sqrt(2.0) * np.cos(arg)).astype(self.dtype)

    def forward(self, x_in, s, v, sigma, audit: dict | None = None) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        x_in = x_in if isinstance(x_in, Tensor) else Tensor(np.asarray(x_in, dtype=self.dtype))
        s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=self.dtype))
        v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=self.dtype))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x_in.shape[0],))
        self._check_inputs(x_in, s, v, sigma)

        B, _, t_len = x_in.shape
        fourier = self.fourier(sigma)
        u = T.matmul(Tensor(fourier), T.transpose(self.u_weight)).reshape(B)

        emb = self.emb_noise(mp_silu(self.emb_fourier(Tensor(fourier[:, :, None]))))
        emb = mp_sum(emb, self.emb_speaker(s.reshape(B, cfg.speaker_dim, 1)), cfg.speaker_blend)
        emb = mp_silu(emb)

        mult = cfg.total_downsample
        pad = (-t_len) % mult
        cond = resample_condition(v, t_len)
        x = x_in
        if pad:
            x = T.concat([x, Tensor(np.zeros((B, cfg.in_channels, pad), dtype=x.dtype))], axis=2)
            cond = T.concat([cond, Tensor(np.zeros((B, cfg.cond_dim, pad), dtype=cond.dtype))], axis=2)
        conds = [cond]
        for _ in range(1, cfg.levels):
            conds.append(T.avg_pool1d(conds[-1], cfg.down_factor))

        ones = Tensor(np.ones((B, 1, x.shape[2]), dtype=x.dtype))
        x = self.conv_in(T.concat([x, ones], axis=1))
        skips = [x]
        for _, blk in self.enc:
            x = blk(x, emb, None)
            skips.append(x)
            if audit is not None:
                audit[blk.name] = magnitude(x)
        for level, blk, takes_skip in self.dec:
            if takes_skip:
                x = mp_cat(x, skips.pop(), axis=1, t=cfg.concat_blend)
            x = blk(x, emb, conds[level], audit)
            if audit is not None:
                audit[blk.name] = magnitude(x)
        out = self.conv_out(x, gain=self.out_gain)
        if pad:
            out = out[:, :, :t_len]
        return out, u

    __call__ = forward

    def _check_inputs(self, x_in: Tensor, s: Tensor, v: Tensor, sigma: np.ndarray) -> None:
        cfg = self.cfg
        if x_in.ndim != 3 or x_in.shape[1] != cfg.in_channels:
            raise ShapeError(f"forward: x_in must be [B, {cfg.in_channels}, T], got {x_in.shape}")
        B = x_in.shape[0]
        if s.shape != (B, cfg.speaker_dim):
            raise ShapeError(f"forward: s must be [{B}, {cfg.speaker_dim}], got {s.shape}")
        if v.ndim != 3 or v.shape[0] != B or v.shape[1] != cfg.cond_dim:
            raise ShapeError(f"forward: v must be [{B}, {cfg.cond_dim}, N], got {v.shape}")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError(f"forward: sigma must be finite and positive, got {sigma}")


def count_params(cfg: DenoiserConfig) -> int:
    return DenoiserNet(cfg).num_params()


def smoke_config(**overrides) -> DenoiserConfig:
    """Smallest valid topology: one level, no extra blocks, width 4."""
    base = dict(in_channels=4, base_width=4, channel_mults=(1,), blocks_per_level=0, emb_dim=4,
                speaker_dim=3, cond_dim=3, film_hidden=2, fourier_dim=4)
    base.update(overrides)
    return DenoiserConfig(**base)
