"""Desk-scale data: synthetic mixtures, WAV I/O, segmentation and dynamic mixing."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, RejectedItem

F0_RANGE_HZ = (80.0, 560.0)
DM_GAIN_DB = 5.0
SILENCE_STD = 1e-8


@dataclass
class MixtureItem:
    mix: np.ndarray                  # [L]
    refs: np.ndarray                 # [N, L]
    noise: np.ndarray | None = None  # [L]
    sample_rate: int = 8000
    id: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.refs = np.atleast_2d(self.refs)
        lengths = {self.mix.shape[-1], self.refs.shape[-1]}
        if self.noise is not None:
            lengths.add(self.noise.shape[-1])
        if len(lengths) != 1:
            raise ConfigError(f"item {self.id!r}: waveforms differ in length {sorted(lengths)}")

    @property
    def n_srcs(self) -> int:
        return self.refs.shape[0]

    @property
    def length(self) -> int:
        return self.mix.shape[-1]


def _compose(refs: np.ndarray, noise: np.ndarray | None) -> np.ndarray:
    mix = refs.sum(axis=0)
    return mix if noise is None else mix + noise


# ---------------------------------------------------------------- synthesis

def f0_bands(n_srcs: int) -> list[tuple[float, float]]:
    """Disjoint geometric fundamental-frequency bands, one per source."""
    edges = np.geomspace(*F0_RANGE_HZ, n_srcs + 1)
    return [(float(edges[i]), float(edges[i + 1])) for i in range(n_srcs)]


def harmonic_tone(rng: np.random.Generator, n: int, sr: int, band: tuple[float, float]) -> np.ndarray:
    """Amplitude-modulated harmonic tone with unit RMS."""
    t = np.arange(n) / sr
    f0 = rng.uniform(*band)
    n_harm = int(rng.integers(3, 6))
    tone = np.zeros(n)
    for h in range(1, n_harm + 1):
        if h * f0 >= 0.45 * sr:
            break
        tone += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    am = 1.0 + rng.uniform(0.3, 0.9) * np.sin(2 * np.pi * rng.uniform(2.0, 8.0) * t + rng.uniform(0, 2 * np.pi))
    tone *= am
    return tone / np.sqrt(np.mean(tone ** 2))


def synth_mixture(seed: int, n_srcs: int = 2, duration_s: float = 1.0, sr: int = 8000,
                  snr_range_db: tuple[float, float] | None = None, dtype=np.float32) -> MixtureItem:
    """Sum of ``n_srcs`` harmonic AM tones from disjoint f0 bands, plus optional white noise."""
    if duration_s < 0.25:
        raise ConfigError(f"duration_s must be at least 0.25 s, got {duration_s}")
    if n_srcs < 1:
        raise ConfigError(f"n_srcs must be positive, got {n_srcs}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sr))
    gains = 10.0 ** (rng.uniform(-DM_GAIN_DB, DM_GAIN_DB, n_srcs) / 20.0)
    refs = np.stack([g * harmonic_tone(rng, n, sr, band) for g, band in zip(gains, f0_bands(n_srcs))]).astype(dtype)
    noise = None
    info = {}
    if snr_range_db is not None:
        snr = rng.uniform(*snr_range_db)
        power = np.mean(refs.sum(axis=0).astype(np.float64) ** 2)
        noise = (rng.standard_normal(n) * np.sqrt(power / 10.0 ** (snr / 10.0))).astype(dtype)
        info["snr_db"] = float(snr)
    return MixtureItem(_compose(refs, noise), refs, noise, sr, f"synth-{seed}", info)


# ---------------------------------------------------------------- WAV

@dataclass
class Wav:
    samples: np.ndarray
    sample_rate: int


_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def _need(buf: bytes, offset: int, size: int, what: str) -> None:
    if offset + size > len(buf):
        raise FormatError(f"{what}: file truncated (need {size} bytes at offset {offset}, file has {len(buf)})")


def load_wav(path) -> Wav:
    """Read a mono RIFF/WAVE file, 16-bit PCM or 32-bit float. PCM maps to [-1, 1)."""
    buf = Path(path).read_bytes()
    _need(buf, 0, 12, "RIFF header")
    if buf[0:4] != b"RIFF":
        raise FormatError(f"RIFF id: expected b'RIFF', got {buf[0:4]!r}")
    if buf[8:12] != b"WAVE":
        raise FormatError(f"RIFF form type: expected b'WAVE', got {buf[8:12]!r}")
    fmt = data = None
    pos = 12
    while pos + 8 <= len(buf):
        cid, size = buf[pos:pos + 4], struct.unpack_from("<I", buf, pos + 4)[0]
        body = pos + 8
        if cid == b"fmt ":
            _need(buf, body, 16, "fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", buf, body)
            if fmt[0] == _EXTENSIBLE:
                _need(buf, body, 26, "fmt extensible subformat")
                fmt = (struct.unpack_from("<H", buf, body + 24)[0],) + fmt[1:]
        elif cid == b"data":
            _need(buf, body, size, "data chunk")
            data = buf[body:body + size]
            break
        pos = body + size + (size & 1)
    if fmt is None:
        raise FormatError("fmt chunk: missing")
    if data is None:
        raise FormatError("data chunk: missing or truncated")
    codec, channels, sr, _, block_align, bits = fmt
    if channels != 1:
        raise FormatError(f"channels: only mono is supported, got {channels}")
    if (codec, bits) == (_PCM, 16):
        dt, scale = "<i2", 1.0 / 32768.0
    elif (codec, bits) == (_FLOAT, 32):
        dt, scale = "<f4", None
    else:
        raise FormatError(f"audio format: unsupported codec {codec} with {bits} bits per sample "
                          "(supported: PCM 16-bit, IEEE float 32-bit)")
    if block_align != bits // 8:
        raise FormatError(f"block align: expected {bits // 8}, got {block_align}")
    if len(data) % block_align:
        raise FormatError(f"data chunk: {len(data)} bytes is not a whole number of {block_align}-byte samples")
    samples = np.frombuffer(data, dtype=dt)
    samples = samples.astype(np.float32) * np.float32(scale) if scale else samples.astype(np.float32)
    return Wav(samples, int(sr))


def save_wav(path, w, sr: int, subtype: str = "PCM_16") -> None:
    """Write mono ``w``; PCM_16 clamps to [-1, 1) and rounds, FLOAT stores float32 exactly."""
    w = np.asarray(w)
    if w.ndim != 1:
        raise FormatError(f"channels: save_wav writes mono, got array of shape {w.shape}")
    if subtype == "PCM_16":
        codec, bits = _PCM, 16
        payload = np.clip(np.round(w.astype(np.float64) * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif subtype == "FLOAT":
        codec, bits = _FLOAT, 32
        payload = w.astype("<f4").tobytes()
    else:
        raise ConfigError(f"subtype must be 'PCM_16' or 'FLOAT', got {subtype!r}")
    align = bits // 8
    fmt = struct.pack("<HHIIHH", codec, 1, int(sr), int(sr) * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\0"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- segmentation / mixing

def segment_normalize(item: MixtureItem, segment_s: float, seed: int = 0) -> MixtureItem:
    """Random seeded crop (zero-pad if short), then divide mix, refs and noise by std(mix)."""
    if segment_s <= 0:
        raise ConfigError(f"segment_s must be positive, got {segment_s}")
    n = int(round(segment_s * item.sample_rate))
    rng = np.random.default_rng(seed)

    def cut(x, start):
        if x is None:
            return None
        x = x[..., start:start + n]
        short = n - x.shape[-1]
        return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, short)]) if short else x

    start = int(rng.integers(0, item.length - n + 1)) if item.length > n else 0
    mix, refs, noise = cut(item.mix, start), cut(item.refs, start), cut(item.noise, start)
    std = float(np.std(mix.astype(np.float64)))
    if std < SILENCE_STD:
        raise RejectedItem(f"item {item.id!r}: mixture std {std:.3g} below {SILENCE_STD} (silent segment)")
    scale = mix.dtype.type(1.0 / std)
    refs = refs * scale
    noise = None if noise is None else noise * scale
    info = dict(item.info, start=start, scale=1.0 / std)
    return replace(item, mix=_compose(refs, noise), refs=refs, noise=noise, info=info)


def dynamic_mix(pool: Sequence[np.ndarray], n_srcs: int, seed: int, gain_db: float = DM_GAIN_DB,
                sample_rate: int = 8000, picks: Sequence[int] | None = None) -> MixtureItem:
    """Remix ``n_srcs`` distinct pool signals with per-source gains uniform in +-``gain_db`` dB."""
    if len(pool) < n_srcs:
        raise ConfigError(f"dynamic mixing needs a pool of at least n_srcs={n_srcs} signals, got {len(pool)}")
    rng = np.random.default_rng(seed)
    idx = np.asarray(picks) if picks is not None else rng.choice(len(pool), size=n_srcs, replace=False)
    gains = rng.uniform(-gain_db, gain_db, n_srcs) if gain_db > 0 else np.zeros(n_srcs)
    chosen = [np.asarray(pool[i]) for i in idx]
    length = min(c.shape[-1] for c in chosen)
    dtype = chosen[0].dtype
    refs = np.stack([c[:length] * dtype.type(10.0 ** (g / 20.0)) for c, g in zip(chosen, gains)])
    info = {"picks": [int(i) for i in idx], "gains_db": [float(g) for g in gains]}
    return MixtureItem(_compose(refs, None), refs, None, sample_rate, f"dm-{seed}", info)


def epoch_order(n_items: int, epoch: int, seed: int) -> np.ndarray:
    """Item order for one epoch; a pure function of (epoch, seed)."""
    return np.random.default_rng([seed, epoch]).permutation(n_items)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    id: str
    mix: Path
    refs: list[Path]


def read_manifest(path) -> list[ManifestEntry]:
    """``id <tab> mix <tab> ref1 [<tab> ref2 ...]`` per line; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) < 3:
            raise FormatError(f"{path}:{lineno}: expected id, mix path and at least one ref path, got {len(fields)} fields")
        out.append(ManifestEntry(fields[0], base / fields[1], [base / f for f in fields[2:]]))
    return out


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    lines = ["\t".join([e.id, str(e.mix)] + [str(r) for r in e.refs]) for e in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))
