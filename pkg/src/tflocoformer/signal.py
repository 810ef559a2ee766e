"""STFT analysis and overlap-add synthesis in the [2, T, F] real/imag layout.

Framing convention (exact, so frame counts are reproducible):

* the signal of length ``L`` is zero-padded by ``pad = win_length - hop_length``
  on both ends, then by ``extra`` zeros on the right so the frames tile it;
* ``T = ceil((L + 2*pad - win_length) / hop_length) + 1``;
* ``extra = (T - 1) * hop_length + win_length - (L + 2*pad)``.

The transform is a direct real DFT expressed as a matrix product, so any even
window size works (including 768) and gradients come for free.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Tensor, ops


def sqrt_hann(n: int) -> np.ndarray:
    """Square root of the periodic Hann window; its square is COLA at hop n/2."""
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


@dataclass(frozen=True)
class StftConfig:
    win_length: int
    sample_rate: int = 8000
    hop_length: int | None = None
    window: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.win_length < 2 or self.win_length % 2:
            raise ConfigError(f"stft win_length must be an even integer >= 2, got {self.win_length}")
        if self.hop_length is None:
            object.__setattr__(self, "hop_length", self.win_length // 2)
        if self.hop_length * 2 != self.win_length:
            raise ConfigError(f"hop_length must be win_length/2 (50% overlap), got {self.hop_length}")
        if self.window is None:
            object.__setattr__(self, "window", sqrt_hann(self.win_length))
        elif len(self.window) != self.win_length:
            raise ConfigError("window length must equal win_length")

    @classmethod
    def from_ms(cls, sample_rate: int, window_ms: float = 16.0) -> "StftConfig":
        win = int(round(sample_rate * window_ms / 1000.0))
        return cls(win_length=win + (win % 2), sample_rate=sample_rate)

    @property
    def fft_size(self) -> int:
        return self.win_length

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.win_length - self.hop_length

    def n_frames(self, length: int) -> int:
        span = length + 2 * self.pad - self.win_length
        return max(0, math.ceil(span / self.hop_length)) + 1

    def cola_error(self) -> float:
        """Max deviation of the hop-summed squared window from its mean."""
        w2 = self.window ** 2
        acc = w2[: self.hop_length] + w2[self.hop_length:]
        return float(np.max(np.abs(acc - acc.mean())))


@dataclass
class SpectrogramRI:
    values: Tensor  # [..., 2, T, F]
    config: StftConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[-2]


@lru_cache(maxsize=32)
def _bases(n: int, dtype_name: str):
    dtype = np.dtype(dtype_name)
    k = np.arange(n // 2 + 1)
    t = np.arange(n)
    ang = 2.0 * np.pi * np.outer(t, k) / n  # [N, F]
    fwd_re, fwd_im = np.cos(ang), -np.sin(ang)
    weight = np.full(n // 2 + 1, 2.0)
    weight[0] = 1.0
    weight[-1] = 1.0
    inv_re = (weight[:, None] * np.cos(ang).T) / n   # [F, N]
    inv_im = (-weight[:, None] * np.sin(ang).T) / n
    return tuple(a.astype(dtype) for a in (fwd_re, fwd_im, inv_re, inv_im))


def _win(cfg: StftConfig, dtype) -> np.ndarray:
    return cfg.window.astype(dtype, copy=False)


def stft(x, cfg: StftConfig) -> SpectrogramRI:
    """Real/imag STFT of ``x`` [..., L] -> values [..., 2, T, F]."""
    x = ops.as_tensor(x)
    if not np.isfinite(x.data).all():
        raise DimensionError("stft input must be finite")
    length = x.shape[-1]
    n_frames = cfg.n_frames(length)
    extra = (n_frames - 1) * cfg.hop_length + cfg.win_length - (length + 2 * cfg.pad)
    xp = ops.pad_last(x, cfg.pad, cfg.pad + extra)
    frames = ops.frame(xp, cfg.win_length, cfg.hop_length) * _win(cfg, x.dtype)   # [..., T, N]
    fre, fim, _, _ = _bases(cfg.fft_size, x.dtype.name)
    re = ops.matmul(frames, Tensor(fre))
    im = ops.matmul(frames, Tensor(fim))
    return SpectrogramRI(ops.stack([re, im], axis=-3), cfg)


def _wsum(cfg: StftConfig, n_frames: int, dtype) -> np.ndarray:
    w2 = np.broadcast_to(_win(cfg, np.float64) ** 2, (n_frames, cfg.win_length))
    env = ops._ola(np.ascontiguousarray(w2), cfg.hop_length)
    return np.where(env > 1e-10, env, 1.0).astype(dtype)


def istft(spec, cfg: StftConfig | None = None, out_len: int | None = None) -> Tensor:
    """Overlap-add inverse of :func:`stft`, normalised by the summed squared window."""
    if isinstance(spec, SpectrogramRI):
        cfg = cfg or spec.config
        values = spec.values
    else:
        values = ops.as_tensor(spec)
    if cfg is None or out_len is None:
        raise DimensionError("istft needs a config and out_len")
    if values.ndim < 3 or values.shape[-3] != 2 or values.shape[-1] != cfg.n_bins:
        raise DimensionError(f"istft expects [..., 2, T, {cfg.n_bins}], got {values.shape}")
    n_frames = values.shape[-2]
    if cfg.n_frames(out_len) != n_frames:
        raise DimensionError(
            f"out_len {out_len} implies {cfg.n_frames(out_len)} frames, spectrogram has {n_frames}"
        )
    _, _, ire, iim = _bases(cfg.fft_size, values.dtype.name)
    re = values[..., 0, :, :]
    im = values[..., 1, :, :]
    frames = ops.matmul(re, Tensor(ire)) + ops.matmul(im, Tensor(iim))      # [..., T, N]
    y = ops.overlap_add(frames * _win(cfg, values.dtype), cfg.hop_length)
    y = y / _wsum(cfg, n_frames, values.dtype)
    return y[..., cfg.pad:cfg.pad + out_len]


def magnitude(spec: SpectrogramRI, floor: float = 1e-12) -> Tensor:
    """|X| = sqrt(re^2 + im^2 + floor); the floor keeps the gradient finite at 0."""
    v = spec.values
    return ops.sqrt(ops.sum(ops.square(v), axis=-3) + floor)
