"""End-to-end TF-Locoformer: STFT -> encoder -> B dual-path pairs -> decoder -> iSTFT."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import LocoformerBlockParams, dual_path_last, init_block
from .errors import ConfigError, DimensionError
from .numerics import Tensor, ops
from .numerics.params import named_tensors, ones, uniform, zeros
from .signal import StftConfig, istft, stft

PRESETS = {
    "S": dict(dim=96, blocks=4, hidden=256),
    "M": dict(dim=128, blocks=6, hidden=384),
    "L": dict(dim=128, blocks=9, hidden=384),
}


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128            # D, embedding per TF bin
    blocks: int = 6           # B
    hidden: int = 384         # C, ConvSwiGLU hidden size
    kernel: int = 4           # K
    stride: int = 1           # S
    heads: int = 4            # H
    groups: int = 4           # G
    n_srcs: int = 2           # N
    sample_rate: int = 8000
    window_ms: float = 16.0
    single_ffn: bool = False      # drop the pre-attention FFN, 2x hidden in the remaining one
    swish_only: bool = False      # Swish instead of SwiGLU, 1.5x hidden
    plain_rmsnorm: bool = False   # G = 1 everywhere
    rope_base: float = 10000.0
    codec_kernel: int = 3         # encoder Conv2D / decoder DeConv2D kernel (square)
    size: str = "M"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("dim", "blocks", "hidden", "kernel", "heads", "groups", "n_srcs", "sample_rate", "codec_kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.stride != 1:
            raise ConfigError(f"model.stride must be 1, got {self.stride}")
        if self.dim % self.heads:
            raise ConfigError(f"model.heads={self.heads} must divide model.dim={self.dim}")
        if (self.dim // self.heads) % 2:
            raise ConfigError(f"head dimension dim/heads={self.dim // self.heads} must be even")
        if self.dim % self.groups:
            raise ConfigError(f"model.groups={self.groups} must divide model.dim={self.dim}")
        if self.codec_kernel % 2 == 0:
            raise ConfigError("model.codec_kernel must be odd so same padding is symmetric")
        hidden = self.hidden * (2 if self.single_ffn else 1) * (3 if self.swish_only else 2)
        if hidden % 2:
            raise ConfigError("swish_only needs an even effective hidden size")

    @property
    def ffn_hidden(self) -> int:
        """Per-FFN hidden size after the ablation widening (2C single-FFN, 3C with Swish)."""
        h = self.hidden * (2 if self.single_ffn else 1)
        return h * 3 // 2 if self.swish_only else h

    @property
    def norm_groups(self) -> int:
        return 1 if self.plain_rmsnorm else self.groups

    @property
    def stft(self) -> StftConfig:
        return StftConfig.from_ms(self.sample_rate, self.window_ms)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def build_config(size: str = "M", n_srcs: int = 2, **overrides) -> ModelConfig:
    """Preset S/M/L (K=4, S=1, H=4, G=4) with keyword overrides applied."""
    size = size.upper()
    if size not in PRESETS:
        raise ConfigError(f"unknown model size {size!r}; expected one of S, M, L")
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    bad = sorted(set(overrides) - names)
    if bad:
        raise ConfigError(f"unknown model config keys: {', '.join(bad)}")
    kwargs = dict(PRESETS[size], kernel=4, stride=1, heads=4, groups=4, n_srcs=n_srcs, size=size)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def reverberant_variant(cfg: ModelConfig) -> ModelConfig:
    """Long-kernel setting for strongly reverberant data: K=8 and half the hidden size."""
    return dataclasses.replace(cfg, kernel=8, hidden=cfg.hidden // 2)


@dataclass
class DualPathParams:
    freq: LocoformerBlockParams
    time: LocoformerBlockParams


@dataclass
class ModelParams:
    enc_w: Tensor      # [D, 2, k, k]
    enc_b: Tensor      # [D]
    gln_gain: Tensor   # [D]
    gln_bias: Tensor   # [D]
    blocks: list[DualPathParams] = field(default_factory=list)
    dec_w: Tensor | None = None       # [D, 2N, k, k] (transposed-conv layout)
    dec_b: Tensor | None = None       # [2N]

    def named(self) -> dict[str, Tensor]:
        return dict(named_tensors(self))

    def tensors(self) -> list[Tensor]:
        return [t for _, t in named_tensors(self)]


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, k = cfg.dim, cfg.codec_kernel

    def block():
        return init_block(
            rng, d, cfg.ffn_hidden, cfg.kernel, cfg.heads, cfg.norm_groups,
            macaron=not cfg.single_ffn, gated=not cfg.swish_only, rope_base=cfg.rope_base, dtype=dtype,
        )

    params = ModelParams(
        enc_w=uniform(rng, (d, 2, k, k), 2 * k * k, dtype),
        enc_b=zeros(d, dtype),
        gln_gain=ones(d, dtype),
        gln_bias=zeros(d, dtype),
    )
    for _ in range(cfg.blocks):
        params.blocks.append(DualPathParams(freq=block(), time=block()))
    params.dec_w = uniform(rng, (d, 2 * cfg.n_srcs, k, k), d * k * k, dtype)
    params.dec_b = zeros(2 * cfg.n_srcs, dtype)
    return params


def cast_params(params: ModelParams, dtype) -> ModelParams:
    """Deep copy with every tensor converted to ``dtype`` (fresh leaves)."""
    out = copy.deepcopy(params)
    for t in out.tensors():
        t.data = t.data.astype(dtype)
        t.grad = None
        t.requires_grad = True
    return out


def state_dict(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in named_tensors(params)}


def load_state(params: ModelParams, state: dict[str, np.ndarray]) -> ModelParams:
    """Copy arrays into a parameter skeleton; names and shapes must match exactly."""
    named = params.named()
    missing = sorted(set(named) - set(state))
    extra = sorted(set(state) - set(named))
    if missing or extra:
        raise ConfigError(f"parameter names differ: missing={missing[:3]} unexpected={extra[:3]}")
    for name, t in named.items():
        arr = np.asarray(state[name])
        if arr.shape != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.astype(t.dtype, copy=True)
    return params


def count_params(params) -> int:
    return int(sum(t.size for _, t in named_tensors(params)))


def global_layer_norm(y: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalise over all (D, T, F) of each utterance; per-channel affine."""
    axes = (-3, -2, -1)
    mu = ops.mean(y, axis=axes, keepdims=True)
    centred = y - mu
    var = ops.mean(ops.square(centred), axis=axes, keepdims=True)
    yn = centred / ops.sqrt(var + eps)
    shape = (gain.shape[0], 1, 1)
    return yn * ops.reshape(gain, shape) + ops.reshape(bias, shape)


def encode(spec, params: ModelParams) -> Tensor:
    """[..., 2, T, F] real/imag -> gLN(Conv2D(X)) feature map [..., D, T, F]."""
    values = spec.values if hasattr(spec, "values") else ops.as_tensor(spec)
    y = ops.conv2d(values, params.enc_w, params.enc_b)
    return global_layer_norm(y, params.gln_gain, params.gln_bias)


def decode(z: Tensor, params: ModelParams, n_srcs: int) -> Tensor:
    """Feature map -> [..., 2, N, T, F], channel order real_1..real_N, imag_1..imag_N."""
    y = ops.transposed_conv2d(z, params.dec_w, params.dec_b)
    return ops.reshape(y, z.shape[:-3] + (2, n_srcs) + z.shape[-2:])


def separate_spectra(spec_values: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Mixture spectrum [..., 2, T, F] -> source spectra [..., 2, N, T, F]."""
    z = encode(spec_values, params)
    nd = z.ndim
    lead = tuple(range(nd - 3))
    z = ops.transpose(z, lead + (nd - 2, nd - 1, nd - 3))      # blocks run channels-last
    for pair in params.blocks:
        z = dual_path_last(z, pair.freq, "frequency")
        z = dual_path_last(z, pair.time, "time")
    z = ops.transpose(z, lead + (nd - 1, nd - 3, nd - 2))
    return decode(z, params, cfg.n_srcs)


def forward(x, cfg: ModelConfig, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Separate mixture(s) x [..., L].

    Returns ``(sources [..., N, L], spectra [..., 2, N, T, F])``.
    """
    x = ops.as_tensor(x, params.enc_w)
    if x.data.dtype != params.enc_w.dtype:
        x = Tensor(x.data.astype(params.enc_w.dtype))
    scfg = cfg.stft
    length = x.shape[-1]
    if length < scfg.win_length:
        raise DimensionError(f"input has {length} samples, shorter than one STFT window ({scfg.win_length})")
    spectra = separate_spectra(stft(x, scfg).values, cfg, params)
    nd = spectra.ndim
    lead = tuple(range(nd - 4))
    per_source = ops.transpose(spectra, lead + (nd - 3, nd - 4, nd - 2, nd - 1))   # [..., N, 2, T, F]
    return istft(per_source, scfg, length), spectra
