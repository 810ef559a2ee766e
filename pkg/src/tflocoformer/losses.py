"""Training objectives and evaluation metrics.

Waveform arguments are ``[..., L]``; leading axes are independent items.
Losses return differentiable :class:`Tensor` values, metrics return numpy.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UnsupportedError
from .numerics import Tensor, no_grad, ops
from .signal import StftConfig, magnitude, stft

EPS = 1e-8
MAX_PIT_SOURCES = 4
ENH_RESOLUTIONS = (256, 512, 768, 1024)
_DB = 10.0 / math.log(10.0)


def _check_lengths(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"{what}: length mismatch, {a.shape[-1]} vs {b.shape[-1]} samples")


def _tensors(*xs):
    first = next((x for x in xs if isinstance(x, Tensor)), None)
    return [ops.as_tensor(x, first) for x in xs]


def si_snr(est, ref, eps: float = EPS) -> Tensor:
    """Scale-invariant SNR in dB over the last axis (both signals zero-meaned)."""
    est, ref = _tensors(est, ref)
    _check_lengths(est, ref, "si_snr")
    est = est - ops.mean(est, axis=-1, keepdims=True)
    ref = ref - ops.mean(ref, axis=-1, keepdims=True)
    dot = ops.sum(est * ref, axis=-1, keepdims=True)
    energy = ops.sum(ref * ref, axis=-1, keepdims=True)
    target = ref * (dot / (energy + eps))
    noise = est - target
    num = ops.sum(target * target, axis=-1) + eps
    den = ops.sum(noise * noise, axis=-1) + eps
    return ops.log(num / den) * _DB


@dataclass
class PitResult:
    loss: Tensor                    # scalar, -mean best SI-SNR
    permutation: np.ndarray         # [..., N]: estimate index assigned to each reference
    per_pair_scores: np.ndarray     # [..., N, N]: scores[e, r] = si_snr(est_e, ref_r)


def pit_loss(est, ref) -> PitResult:
    """Permutation-invariant SI-SNR over estimates/references ``[..., N, L]``.

    All N! assignments are enumerated; with leading batch axes each item picks
    its own and the loss averages over items and sources.
    """
    est, ref = _tensors(est, ref)
    _check_lengths(est, ref, "pit_loss")
    if est.shape != ref.shape or est.ndim < 2:
        raise DimensionError(f"pit_loss needs matching [..., N, L] inputs, got {est.shape} and {ref.shape}")
    n = est.shape[-2]
    if n > MAX_PIT_SOURCES:
        raise UnsupportedError(f"pit_loss enumerates permutations only for N <= {MAX_PIT_SOURCES}, got N={n}")
    lead = est.shape[:-2]
    pairs = si_snr(
        ops.reshape(est, lead + (n, 1, est.shape[-1])),
        ops.reshape(ref, lead + (1, n, ref.shape[-1])),
    )                                                               # [..., N_est, N_ref]
    scores = pairs.data.reshape(-1, n, n)
    perms = np.array(list(itertools.permutations(range(n))))        # [P, N]
    ref_idx = np.arange(n)
    totals = scores[:, perms, ref_idx].sum(axis=-1)                 # [B, P]
    best = perms[np.argmax(totals, axis=1)]                         # [B, N]
    flat = ops.reshape(pairs, (-1, n, n))
    rows = np.arange(flat.shape[0])[:, None]
    chosen = ops.getitem(flat, (rows, best, ref_idx[None, :]))      # [B, N]
    loss = ops.neg(ops.mean(chosen))
    return PitResult(loss, best.reshape(lead + (n,)), scores.reshape(lead + (n, n)).copy())


def enh_loss(est, ref, resolutions=ENH_RESOLUTIONS) -> Tensor:
    """Time-domain L1 plus multi-resolution STFT-magnitude L1 (unit weights)."""
    est, ref = _tensors(est, ref)
    _check_lengths(est, ref, "enh_loss")
    total = ops.mean(ops.abs(est - ref))
    for n_fft in resolutions:
        cfg = StftConfig(win_length=n_fft)
        diff = magnitude(stft(est, cfg)) - magnitude(stft(ref, cfg))
        total = total + ops.mean(ops.abs(diff))
    return total


# ---------------------------------------------------------------- metrics

def _np_tensors(*xs):
    out = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)) for x in xs]
    for other in out[1:]:
        _check_lengths(out[0], other, "metric")
    return out


def sdr(est, ref, eps: float = EPS) -> np.ndarray:
    """Plain SDR 10*log10(|ref|^2 / (|est-ref|^2 + eps)); no BSS-Eval projection."""
    e, r = (t.data for t in _np_tensors(est, ref))
    return 10.0 * np.log10(np.sum(r * r, axis=-1) / (np.sum((e - r) ** 2, axis=-1) + eps))


def si_snri(est, ref, mix) -> np.ndarray:
    e, r, m = _np_tensors(est, ref, mix)
    with no_grad():
        return si_snr(e, r).data - si_snr(m, r).data


def sdri(est, ref, mix) -> np.ndarray:
    return sdr(est, ref) - sdr(mix, ref)
