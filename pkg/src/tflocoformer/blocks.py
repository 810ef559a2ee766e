"""Locoformer building blocks.

Sequence tensors are channel-first, ``[..., D, L]``: any leading axes are
independent sequences that share parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Tensor, ops
from .numerics.params import ones, uniform, zeros


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor
    groups: int = 1
    eps: float = 1e-6

    def __post_init__(self):
        dim = self.gain.shape[0]
        if self.groups < 1 or dim % self.groups:
            raise ConfigError(f"norm groups G={self.groups} must divide D={dim}")


@dataclass
class ConvSwiGLUParams:
    norm: NormParams
    gate_w: Tensor          # [C, D, K]
    gate_b: Tensor          # [C]
    deconv_w: Tensor        # [C, D, K]
    deconv_b: Tensor        # [D]
    value_w: Tensor | None = None   # None: plain Swish (no gating branch)
    value_b: Tensor | None = None

    @property
    def kernel(self) -> int:
        return self.gate_w.shape[2]


@dataclass
class AttentionParams:
    norm: NormParams
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    rope_base: float = 10000.0

    def __post_init__(self):
        dim = self.wq.shape[0]
        if self.heads < 1 or dim % self.heads:
            raise ConfigError(f"heads H={self.heads} must divide D={dim}")
        if (dim // self.heads) % 2:
            raise ConfigError(f"head dimension D/H={dim // self.heads} must be even for rotary encoding")


@dataclass
class LocoformerBlockParams:
    attn: AttentionParams
    ffn_post: ConvSwiGLUParams
    ffn_pre: ConvSwiGLUParams | None = None   # None: single-FFN ablation, full-weight residual


# ---------------------------------------------------------------- init

def init_norm(dim: int, groups: int, dtype=np.float32, eps: float = 1e-6) -> NormParams:
    return NormParams(ones(dim, dtype), zeros(dim, dtype), groups, eps)


def init_conv_swiglu(rng, dim: int, hidden: int, kernel: int, groups: int, *,
                     gated: bool = True, dtype=np.float32) -> ConvSwiGLUParams:
    p = ConvSwiGLUParams(
        norm=init_norm(dim, groups, dtype),
        gate_w=uniform(rng, (hidden, dim, kernel), dim * kernel, dtype),
        gate_b=zeros(hidden, dtype),
        deconv_w=uniform(rng, (hidden, dim, kernel), hidden * kernel, dtype),
        deconv_b=zeros(dim, dtype),
    )
    if gated:
        p.value_w = uniform(rng, (hidden, dim, kernel), dim * kernel, dtype)
        p.value_b = zeros(hidden, dtype)
    return p


def init_attention(rng, dim: int, heads: int, groups: int, *, rope_base: float = 10000.0,
                   dtype=np.float32) -> AttentionParams:
    w = [uniform(rng, (dim, dim), dim, dtype) for _ in range(4)]
    return AttentionParams(init_norm(dim, groups, dtype), *w, heads=heads, rope_base=rope_base)


def init_block(rng, dim: int, hidden: int, kernel: int, heads: int, groups: int, *,
               macaron: bool = True, gated: bool = True, rope_base: float = 10000.0,
               dtype=np.float32) -> LocoformerBlockParams:
    """Macaron block, or the single-FFN / Swish ablations.

    ``hidden`` is the per-FFN hidden size actually used; the caller widens it
    for the ablations so the parameter count stays comparable.
    """
    pre = init_conv_swiglu(rng, dim, hidden, kernel, groups, gated=gated, dtype=dtype) if macaron else None
    attn = init_attention(rng, dim, heads, groups, rope_base=rope_base, dtype=dtype)
    post = init_conv_swiglu(rng, dim, hidden, kernel, groups, gated=gated, dtype=dtype)
    return LocoformerBlockParams(attn=attn, ffn_post=post, ffn_pre=pre)


# ---------------------------------------------------------------- ops

def rms_group_norm(z: Tensor, p: NormParams, axis: int = -2) -> Tensor:
    """RMS-normalise each of G channel groups separately, per position.

    ``axis`` is the channel axis (D); statistics never mix positions.
    """
    ndim = z.ndim
    ax = axis % ndim
    dim = z.shape[ax]
    if dim != p.gain.shape[0]:
        raise DimensionError(f"norm: channel axis {axis} has {dim} entries, params expect {p.gain.shape[0]}")
    g = p.groups
    grouped = ops.reshape(z, z.shape[:ax] + (g, dim // g) + z.shape[ax + 1:])
    ms = ops.mean(ops.square(grouped), axis=ax + 1, keepdims=True)
    y = ops.reshape(grouped / ops.sqrt(ms + p.eps), z.shape)
    bshape = (dim,) + (1,) * (ndim - ax - 1)
    return y * ops.reshape(p.gain, bshape) + ops.reshape(p.bias, bshape)


def _swap(x: Tensor) -> Tensor:
    nd = x.ndim
    return ops.transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def conv_swiglu_last(z: Tensor, p: ConvSwiGLUParams) -> Tensor:
    """:func:`conv_swiglu` on channels-last z [..., L, D]."""
    n = rms_group_norm(z, p.norm, axis=-1)
    h = ops.swish(ops.conv1d_last(n, p.gate_w, p.gate_b))
    if p.value_w is not None:
        h = h * ops.conv1d_last(n, p.value_w, p.value_b)
    return ops.transposed_conv1d_last(h, p.deconv_w, p.deconv_b)


def conv_swiglu(z: Tensor, p: ConvSwiGLUParams) -> Tensor:
    """Deconv1D(Swish(Conv1D(Norm z)) * Conv1D(Norm z)) on [..., D, L]."""
    return _swap(conv_swiglu_last(_swap(z), p))


def rope_angles(length: int, head_dim: int, base: float = 10000.0, positions=None):
    if head_dim % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {head_dim}")
    pos = np.arange(length, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, base: float = 10000.0, positions=None) -> Tensor:
    """Rotate pairs (2i, 2i+1) of x [..., L, dh] by pos * base**(-2i/dh)."""
    cos, sin = rope_angles(x.shape[-2], x.shape[-1], base, positions)
    return ops.rotate_pairs(x, cos, sin)


def mhsa_last(z: Tensor, p: AttentionParams) -> Tensor:
    """:func:`mhsa` on channels-last z [..., L, D]."""
    lead, (length, dim) = z.shape[:-2], z.shape[-2:]
    h = p.heads
    dh = dim // h
    n = rms_group_norm(ops.reshape(z, (-1, length, dim)), p.norm, axis=-1)

    def heads(w):
        return ops.transpose(ops.reshape(ops.linear(n, w), (-1, length, h, dh)), (0, 2, 1, 3))

    cos, sin = rope_angles(length, dh, p.rope_base)
    q = ops.rotate_pairs(heads(p.wq), cos, sin) * (1.0 / np.sqrt(dh))
    k = ops.rotate_pairs(heads(p.wk), cos, sin)
    v = heads(p.wv)
    att = ops.softmax_lastdim(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))))
    o = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (-1, length, dim))
    return ops.reshape(ops.linear(o, p.wo), lead + (length, dim))


def mhsa(z: Tensor, p: AttentionParams) -> Tensor:
    """Norm -> Q,K,V -> rotary Q,K -> softmax(QK^T/sqrt(dh)) V -> output projection, on [..., D, L]."""
    return _swap(mhsa_last(_swap(z), p))


def locoformer_block_last(z: Tensor, p: LocoformerBlockParams) -> Tensor:
    """:func:`locoformer_block` on channels-last z [..., L, D]."""
    if p.ffn_pre is not None:
        z = z + conv_swiglu_last(z, p.ffn_pre) * 0.5
    z = z + mhsa_last(z, p.attn)
    post_scale = 0.5 if p.ffn_pre is not None else 1.0
    return z + conv_swiglu_last(z, p.ffn_post) * post_scale


def locoformer_block(z: Tensor, p: LocoformerBlockParams) -> Tensor:
    """Macaron block on [..., D, L]: half FFN, attention, half FFN, each residual."""
    return _swap(locoformer_block_last(_swap(z), p))


def dual_path_last(z: Tensor, p: LocoformerBlockParams, axis: Literal["frequency", "time"]) -> Tensor:
    """:func:`dual_path_pass` on channels-last z [..., T, F, D]."""
    if z.ndim < 3:
        raise DimensionError(f"dual_path_pass expects [..., T, F, D], got {z.shape}")
    t, f, dim = z.shape[-3:]
    if axis == "frequency":
        out = locoformer_block_last(ops.reshape(z, (-1, f, dim)), p)
        return ops.reshape(out, z.shape)
    if axis == "time":
        nd = z.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        zt = ops.transpose(z, perm)
        out = locoformer_block_last(ops.reshape(zt, (-1, t, dim)), p)
        return ops.transpose(ops.reshape(out, zt.shape), perm)
    raise ConfigError(f"axis must be 'frequency' or 'time', got {axis!r}")


def dual_path_pass(z: Tensor, p: LocoformerBlockParams, axis: Literal["frequency", "time"]) -> Tensor:
    """Apply one block along F (per frame) or along T (per bin) of z [..., D, T, F]."""
    if z.ndim < 3:
        raise DimensionError(f"dual_path_pass expects [..., D, T, F], got {z.shape}")
    nd = z.ndim
    lead = tuple(range(nd - 3))
    to_last = ops.transpose(z, lead + (nd - 2, nd - 1, nd - 3))
    out = dual_path_last(to_last, p, axis)
    return ops.transpose(out, lead + (nd - 1, nd - 3, nd - 2))
