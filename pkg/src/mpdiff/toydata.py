"""Synthetic conditional task with a one-to-many condition-to-target map.

A fixed *world* (derived from ``world_seed``) holds condition code vectors,
speaker latents, and a bank of target templates. Each condition code admits
``templates_per_code`` templates; on *ambiguous* codes the speaker picks which
one is realized, on the rest every speaker realizes the same one. Condition
tracks run at 25 Hz, targets at 62.5 Hz (2.5 target frames per condition
frame), both segment-aligned.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .rng import Rng, derive_stream

MAGIC = b"MPAV"
VERSION = 1
CONDITION_RATE = 25.0
TARGET_RATE = 62.5


@dataclass(frozen=True)
class ToySpec:
    world_seed: int = 1234
    n_templates: int = 8
    n_codes: int = 8
    templates_per_code: int = 2
    ambiguous_fraction: float = 0.5
    n_speakers: int = 4
    n_segments: int = 8
    video_frames_per_segment: int = 4
    n_a: int = 16
    n_s: int = 16
    n_v: int = 32
    cond_noise: float = 0.3
    speaker_jitter: float = 0.1
    feature_offset: float = -4.0
    feature_gain: float = 2.0

    def __post_init__(self):
        if self.templates_per_code < 2:
            raise ValueError("ToySpec: templates_per_code must be >= 2")
        if self.templates_per_code > self.n_templates:
            raise ValueError("ToySpec: templates_per_code cannot exceed n_templates")
        if min(self.n_codes, self.n_speakers, self.n_segments, self.n_a, self.n_s, self.n_v) < 1:
            raise ValueError("ToySpec: counts and dimensions must be >= 1")
        if self.n_templates > 65535 or self.n_codes > 65535 or self.n_speakers > 65535:
            raise ValueError("ToySpec: ids must fit in 16 bits")
        if self.video_frames_per_segment < 2 or self.video_frames_per_segment % 2:
            raise ValueError("ToySpec: video_frames_per_segment must be even and >= 2")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise ValueError("ToySpec: ambiguous_fraction must be in [0, 1]")

    @property
    def frames_per_segment(self) -> int:
        return self.video_frames_per_segment * 5 // 2

    @property
    def n_video(self) -> int:
        return self.n_segments * self.video_frames_per_segment

    @property
    def n_frames(self) -> int:
        return self.n_segments * self.frames_per_segment

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"ToySpec: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ToyAVExample:
    v: np.ndarray  # [n_v, N] condition track, 25 Hz
    s: np.ndarray  # [n_s] speaker latent
    x: np.ndarray  # [n_a, T] target track, 62.5 Hz
    labels: np.ndarray  # [n_segments] template ids
    codes: np.ndarray  # [n_segments] condition code ids
    speaker: int


class ToyWorld:
    def __init__(self, spec: ToySpec):
        self.spec = spec
        rng = Rng(spec.world_seed, derive_stream(0, "world"))
        self.code_vectors = rng.child("codes").normal((spec.n_codes, spec.n_v))
        self.speaker_latents = rng.child("speakers").normal((spec.n_speakers, spec.n_s))

        sig = rng.child("templates").normal((spec.n_a, spec.n_templates))
        sig -= sig.mean(axis=0, keepdims=True)
        if spec.n_templates <= spec.n_a - 1:
            sig, _ = np.linalg.qr(sig)
            sig -= sig.mean(axis=0, keepdims=True)
        sig /= np.sqrt(np.mean(sig**2, axis=0, keepdims=True))
        self.signatures = sig.T  # [K, n_a], zero-mean, unit RMS

        L = spec.frames_per_segment
        self.envelope = np.sin(np.pi * (np.arange(L) + 0.5) / L)
        self.bank = (
            spec.feature_offset
            + spec.feature_gain * self.signatures[:, :, None] * self.envelope[None, None, :]
        ).astype(np.float32)

        perm = rng.child("admissible").permutation(spec.n_templates)
        self.admissible = np.array(
            [[perm[(c + j) % spec.n_templates] for j in range(spec.templates_per_code)] for c in range(spec.n_codes)]
        )
        n_amb = int(round(spec.ambiguous_fraction * spec.n_codes))
        amb_codes = rng.child("ambiguous").permutation(spec.n_codes)[:n_amb]
        self.ambiguous = np.zeros(spec.n_codes, dtype=bool)
        self.ambiguous[amb_codes] = True
        offsets = rng.child("offsets").integers(0, spec.templates_per_code, spec.n_codes)
        spk = np.arange(spec.n_speakers)[:, None]
        self.choice = np.where(self.ambiguous[None, :], (spk + offsets[None, :]) % spec.templates_per_code, 0)

    def label(self, code, speaker):
        """Realized template for condition ``code`` spoken by ``speaker``."""
        return self.admissible[code, self.choice[speaker, code]]

    def render_target(self, labels) -> np.ndarray:
        return np.concatenate([self.bank[k] for k in labels], axis=1)

    def render_condition(self, codes, rng: Rng) -> np.ndarray:
        spec = self.spec
        frames = np.repeat(self.code_vectors[codes], spec.video_frames_per_segment, axis=0).T
        frames = frames + spec.cond_noise * rng.normal(frames.shape)
        padded = np.pad(frames, ((0, 0), (1, 1)), mode="edge")
        return 0.25 * padded[:, :-2] + 0.5 * padded[:, 1:-1] + 0.25 * padded[:, 2:]

    def example(self, seed: int, index: int) -> ToyAVExample:
        spec = self.spec
        rng = Rng(seed, derive_stream(spec.world_seed, "item", index))
        speaker = int(rng.integers(0, spec.n_speakers))
        codes = rng.integers(0, spec.n_codes, spec.n_segments)
        s = self.speaker_latents[speaker] + spec.speaker_jitter * rng.normal(spec.n_s)
        labels = self.label(codes, speaker)
        return ToyAVExample(
            v=self.render_condition(codes, rng.child("cond")).astype(np.float32),
            s=s.astype(np.float32),
            x=self.render_target(labels),
            labels=labels.astype(np.uint16),
            codes=codes.astype(np.uint16),
            speaker=speaker,
        )


@dataclass
class ToyDataset:
    spec: ToySpec
    items: list[ToyAVExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    @cached_property
    def world(self) -> ToyWorld:
        return ToyWorld(self.spec)

    def arrays(self, idx=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        items = self.items if idx is None else [self.items[i] for i in idx]
        return (
            np.stack([it.x for it in items]),
            np.stack([it.s for it in items]),
            np.stack([it.v for it in items]),
        )

    def labels(self) -> np.ndarray:
        return np.stack([it.labels for it in self.items])


def gen_toy_dataset(seed: int, n_items: int, spec: ToySpec = ToySpec()) -> ToyDataset:
    if n_items < 1:
        raise ValueError("items must be ≥ 1")
    world = ToyWorld(spec)
    ds = ToyDataset(spec, [world.example(seed, i) for i in range(n_items)])
    ds.__dict__["world"] = world
    return ds


def decode_templates(x_hat: np.ndarray, bank: np.ndarray) -> tuple[np.ndarray, float]:
    """Nearest template (by RMSE) in each segment window; returns labels and mean best RMSE."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    K, n_a, L = bank.shape
    if x_hat.ndim != 2 or x_hat.shape[0] != n_a or x_hat.shape[1] % L:
        raise ValueError(f"decode_templates: track {x_hat.shape} incompatible with bank {bank.shape}")
    windows = x_hat.reshape(n_a, -1, L).transpose(1, 0, 2)  # [n_seg, n_a, L]
    err = np.sqrt(np.mean((windows[:, None] - bank[None]) ** 2, axis=(2, 3)))  # [n_seg, K]
    labels = np.argmin(err, axis=1)
    return labels, float(np.mean(err[np.arange(len(labels)), labels]))


# ---------------------------------------------------------------------------
# serialization


def save_dataset(ds: ToyDataset, path: str | Path) -> None:
    spec_json = json.dumps(ds.spec.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<III", VERSION, len(ds.items), len(spec_json)), spec_json]
    for it in ds.items:
        n_v, n = it.v.shape
        n_a, t = it.x.shape
        parts.append(struct.pack("<IIIIIIH", n_v, n, it.s.shape[0], n_a, t, len(it.labels), it.speaker))
        parts += [
            np.ascontiguousarray(it.v, dtype="<f4").tobytes(),
            np.ascontiguousarray(it.s, dtype="<f4").tobytes(),
            np.ascontiguousarray(it.x, dtype="<f4").tobytes(),
            np.ascontiguousarray(it.labels, dtype="<u2").tobytes(),
            np.ascontiguousarray(it.codes, dtype="<u2").tobytes(),
        ]
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | Path) -> ToyDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    version, n_items, spec_len = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 16
    spec = ToySpec.from_dict(json.loads(buf[off : off + spec_len]))
    off += spec_len
    items = []
    head = struct.Struct("<IIIIIIH")
    for _ in range(n_items):
        if off + head.size > len(buf):
            raise ValueError(f"{path}: file is truncated")
        n_v, n, n_s, n_a, t, n_seg, speaker = head.unpack_from(buf, off)
        off += head.size

        def take(count, dtype, shape):
            nonlocal off
            if off + count * np.dtype(dtype).itemsize > len(buf):
                raise ValueError(f"{path}: file is truncated")
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
            off += arr.nbytes
            return arr.astype(dtype[1:] if dtype[0] == "<" else dtype)

        v = take(n_v * n, "<f4", (n_v, n))
        s = take(n_s, "<f4", (n_s,))
        x = take(n_a * t, "<f4", (n_a, t))
        labels = take(n_seg, "<u2", (n_seg,))
        codes = take(n_seg, "<u2", (n_seg,))
        items.append(ToyAVExample(v=v, s=s, x=x, labels=labels, codes=codes, speaker=int(speaker)))
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes after {n_items} items")
    return ToyDataset(spec, items)
