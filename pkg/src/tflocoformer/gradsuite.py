"""The finite-difference gradient suite run by ``tflocoformer gradcheck``.

Each case builds float64 leaves, reduces the op output against a fixed random
weighting so every output entry contributes, and compares the reverse-mode
gradient with central differences.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import blocks
from .losses import enh_loss, pit_loss, si_snr
from .model import ModelConfig, build_config, cast_params, forward, init_params
from .numerics import GradCheckResult, Tensor, check_gradients, leaf64, ops
from .numerics.params import named_tensors
from .signal import StftConfig, istft, magnitude, stft

TINY_MODEL = dict(dim=8, blocks=1, heads=2, groups=2, kernel=4, hidden=16, n_srcs=2)
TINY_SECONDS = 0.25


def _weighted(fn: Callable, leaves: list[Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalarise ``fn(*leaves)`` against one fixed random weighting."""
    cache = {}

    def f():
        y = fn(*leaves)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(y.shape)
        return ops.sum(y * cache["w"])
    return f


def _jitter(params, rng, scale=0.3):
    """Move gains/biases off their 1/0 init so every path carries gradient."""
    for _, t in named_tensors(params):
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return params


def _op_cases(rng: np.random.Generator) -> Iterator[tuple[str, list[Tensor], Callable]]:
    g = rng.standard_normal
    yield "add/mul/sub broadcast", [leaf64(g((3, 4))), leaf64(g(4))], lambda a, b: (a + b) * b - a
    yield "div/log/sqrt", [leaf64(rng.uniform(0.5, 2, 6)), leaf64(rng.uniform(0.5, 2, 6))], \
        lambda a, b: ops.log(ops.sqrt(a) / b)
    yield "exp/square/abs", [leaf64(g(7) + 0.5 * np.sign(g(7)))], lambda a: ops.exp(ops.square(a) * 0.1) + ops.abs(a)
    yield "sigmoid/swish", [leaf64(g((4, 3)) * 3)], lambda a: ops.sigmoid(a) + ops.swish(a)
    yield "sum/mean", [leaf64(g((2, 3, 4)))], lambda a: ops.mean(a, axis=(0, 2), keepdims=True) * ops.sum(a, axis=1, keepdims=True)
    yield "reshape/transpose/getitem", [leaf64(g((2, 3, 4)))], \
        lambda a: ops.getitem(ops.transpose(ops.reshape(a, (3, 2, 4)), (2, 0, 1)), (slice(1, 3), [0, 2, 2]))
    yield "concat/stack/pad", [leaf64(g((2, 3))), leaf64(g((2, 3)))], \
        lambda a, b: ops.pad_last(ops.concat([a, ops.stack([a, b], 0)[1]], 0), 1, 2)
    yield "matmul", [leaf64(g((2, 5, 3))), leaf64(g((3, 4)))], ops.matmul
    yield "linear", [leaf64(g((5, 3))), leaf64(g((2, 3))), leaf64(g(2))], ops.linear
    yield "softmax", [leaf64(g((3, 6)))], ops.softmax_lastdim
    yield "rotate_pairs", [leaf64(g((2, 5, 4)))], \
        lambda a: ops.rotate_pairs(a, np.cos(np.arange(10.0).reshape(5, 2)), np.sin(np.arange(10.0).reshape(5, 2)))
    for k in (1, 2, 3, 4):
        yield f"conv1d K={k}", [leaf64(g((2, 3, 7))), leaf64(g((4, 3, k))), leaf64(g(4))], ops.conv1d
        yield f"transposed_conv1d K={k}", [leaf64(g((2, 3, 7))), leaf64(g((3, 4, k))), leaf64(g(4))], ops.transposed_conv1d
    yield "conv2d", [leaf64(g((2, 5, 4))), leaf64(g((3, 2, 3, 3))), leaf64(g(3))], ops.conv2d
    yield "transposed_conv2d", [leaf64(g((2, 5, 4))), leaf64(g((2, 3, 3, 3))), leaf64(g(3))], ops.transposed_conv2d
    yield "frame/overlap_add", [leaf64(g(35))], lambda a: ops.overlap_add(ops.frame(a, 8, 4) * 1.5, 4)


def _signal_cases(rng) -> Iterator[tuple[str, list[Tensor], Callable]]:
    cfg = StftConfig(16)
    yield "stft", [leaf64(rng.standard_normal(50))], lambda x: stft(x, cfg).values
    spec = leaf64(rng.standard_normal((2, 7, 9)))
    yield "istft", [spec], lambda s: istft(s, cfg, 48)
    yield "magnitude", [leaf64(rng.standard_normal(50))], lambda x: magnitude(stft(x, cfg))


def _block_cases(rng) -> Iterator[tuple[str, list[Tensor], Callable, int | None]]:
    d, L = 8, 6
    norm = _jitter(blocks.init_norm(d, 2, np.float64), rng)
    yield "rms_group_norm", [leaf64(rng.standard_normal((d, L)))] + [norm.gain, norm.bias], \
        lambda z, *_: blocks.rms_group_norm(z, norm), None
    for gated in (True, False):
        p = _jitter(blocks.init_conv_swiglu(rng, d, 12, 4, 2, gated=gated, dtype=np.float64), rng)
        leaves = [leaf64(rng.standard_normal((d, L)))] + [t for _, t in named_tensors(p)]
        yield f"conv_swiglu gated={gated}", leaves, (lambda p: lambda z, *_: blocks.conv_swiglu(z, p))(p), 24
    att = _jitter(blocks.init_attention(rng, d, 2, 2, dtype=np.float64), rng)
    yield "mhsa", [leaf64(rng.standard_normal((d, L)))] + [t for _, t in named_tensors(att)], \
        lambda z, *_: blocks.mhsa(z, att), 24
    blk = _jitter(blocks.init_block(rng, d, 12, 4, 2, 2, dtype=np.float64), rng)
    for axis in ("frequency", "time"):
        yield f"dual_path_pass {axis}", [leaf64(rng.standard_normal((d, 4, 5)))] + [t for _, t in named_tensors(blk)], \
            (lambda a: lambda z, *_: blocks.dual_path_pass(z, blk, a))(axis), 12


def _loss_cases(rng) -> Iterator[tuple[str, list[Tensor], Callable]]:
    g = rng.standard_normal
    yield "si_snr", [leaf64(g((2, 64))), leaf64(g((2, 64)))], lambda e, r: ops.sum(si_snr(e, r))
    yield "pit_loss N=2", [leaf64(g((2, 2, 64))), leaf64(g((2, 2, 64)))], lambda e, r: pit_loss(e, r).loss
    yield "pit_loss N=3", [leaf64(g((3, 64))), leaf64(g((3, 64)))], lambda e, r: pit_loss(e, r).loss
    # est = 2 ref with |ref| >= 0.5 keeps every |est - ref| and magnitude gap away from the L1 kink
    ref = np.sign(g(1100)) * (0.5 + np.abs(g(1100)))
    yield "enh_loss", [leaf64(2 * ref), leaf64(ref)], enh_loss


def model_gradcheck(cfg: ModelConfig, *, seed: int = 0, max_coords: int = 8, seconds: float = TINY_SECONDS,
                    name: str = "tiny model", tol: float = 1e-4) -> GradCheckResult:
    """Gradient check of the full forward pass w.r.t. every parameter tensor."""
    rng = np.random.default_rng(seed)
    params = cast_params(init_params(cfg, seed=seed), np.float64)
    x = rng.standard_normal(int(round(seconds * cfg.sample_rate)))
    target = rng.standard_normal((cfg.n_srcs, x.size))

    def fn():
        src, _ = forward(x, cfg, params)
        return ops.sum(src * target)

    return check_gradients(fn, params.tensors(), name=name, max_coords=max_coords, seed=seed, tol=tol)


def tiny_config(**overrides) -> ModelConfig:
    return build_config("M", **dict(TINY_MODEL, **overrides))


ABLATIONS = {
    "A1 single FFN": dict(single_ffn=True),
    "A2 single FFN + Swish": dict(single_ffn=True, swish_only=True),
    "plain RMSNorm": dict(plain_rmsnorm=True),
}


def run_suite(seed: int = 0, *, ablations: bool = True, tol: float = 1e-4) -> list[GradCheckResult]:
    """Every differentiable op, block, loss and the tiny full model (plus ablations)."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, leaves, fn, max_coords=None):
        w_rng = np.random.default_rng([seed, len(results)])
        results.append(check_gradients(_weighted(fn, leaves, w_rng), leaves, name=name,
                                       max_coords=max_coords, seed=seed, tol=tol))

    for name, leaves, fn in _op_cases(rng):
        check(name, leaves, fn)
    for name, leaves, fn in _signal_cases(rng):
        check(name, leaves, fn)
    for name, leaves, fn, mc in _block_cases(rng):
        check(name, leaves, fn, mc)
    for name, leaves, fn in _loss_cases(rng):
        results.append(check_gradients(lambda fn=fn, leaves=leaves: fn(*leaves), leaves, name=name,
                                       max_coords=40, seed=seed, tol=tol))
    results.append(model_gradcheck(tiny_config(), seed=seed, tol=tol))
    if ablations:
        for name, over in ABLATIONS.items():
            results.append(model_gradcheck(tiny_config(**over), seed=seed, name=f"tiny model, {name}", tol=tol))
    return results
