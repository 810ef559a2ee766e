"""Optimisation recipe: warmup + plateau schedule, AdamW, clipping, early stop,
checkpoints and checkpoint averaging, and the training loop."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from .data import MixtureItem, RejectedItem, dynamic_mix, epoch_order, segment_normalize
from .errors import ConfigError, FormatError, NumericError
from .losses import enh_loss, pit_loss, si_snri
from .model import ModelConfig, ModelParams, forward, init_params, load_state, state_dict
from .numerics import Tensor, gradients, no_grad

TASKS = ("separation", "enhancement")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 4000
    weight_decay: float = 1e-2
    plateau_patience_epochs: int = 3
    plateau_factor: float = 0.5
    early_stop_epochs: int = 10
    max_epochs: int | None = None       # None: 150, or 200 with dynamic mixing
    clip_norm: float = 5.0
    batch_size: int = 4
    segment_s: float | None = 4.0       # None: use items as given
    dynamic_mixing: bool = False
    dm_gate_epoch: int | None = None    # None: 75 (65 for the Large model) when dynamic mixing
    min_improvement: float = 1e-6
    keep_best: int = 5
    max_steps: int | None = None
    task: str = "separation"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("peak_lr", "warmup_steps", "plateau_patience_epochs", "early_stop_epochs",
                     "clip_norm", "batch_size", "keep_best"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"train.plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be non-negative, got {self.weight_decay}")
        if self.segment_s is not None and self.segment_s <= 0:
            raise ConfigError(f"train.segment_s must be positive, got {self.segment_s}")
        if self.max_epochs is not None and self.max_epochs <= 0:
            raise ConfigError(f"train.max_epochs must be positive, got {self.max_epochs}")
        if self.task not in TASKS:
            raise ConfigError(f"train.task must be one of {TASKS}, got {self.task!r}")

    @property
    def epochs(self) -> int:
        if self.max_epochs is not None:
            return self.max_epochs
        return 200 if self.dynamic_mixing else 150

    def gate_epoch(self, model_size: str = "M") -> int | None:
        """Epoch after which decay and early stopping may fire (dynamic mixing only)."""
        if self.dm_gate_epoch is not None:
            return self.dm_gate_epoch
        if not self.dynamic_mixing:
            return None
        return 65 if model_size.upper() == "L" else 75


# ---------------------------------------------------------------- schedule

def _plateau_events(val_history: Sequence[float], patience: int, min_improvement: float,
                    gate: int | None) -> tuple[int, int]:
    """Walk the history; return (number of decays, epochs since the last improvement).

    An epoch improves when its loss is below the best so far by at least
    ``min_improvement``. A decay fires after ``patience`` consecutive
    non-improving epochs (the count then restarts); epochs up to ``gate`` never
    fire.
    """
    best = math.inf
    bad = since_best = decays = 0
    for epoch, loss in enumerate(val_history, 1):
        if loss < best - min_improvement:
            best, bad, since_best = loss, 0, 0
            continue
        bad += 1
        since_best += 1
        if bad >= patience and (gate is None or epoch > gate):
            decays += 1
            bad = 0
    return decays, since_best


def lr_schedule(step: int, epoch: int, val_history: Sequence[float], cfg: TrainConfig,
                model_size: str = "M") -> float:
    """Linear warmup to ``peak_lr`` over ``warmup_steps``, then plateau halving.

    Pure in its arguments. ``val_history`` holds the validation losses of the
    completed epochs; ``epoch`` is accepted for symmetry with the log and only
    bounds how much history is considered.
    """
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    history = list(val_history)[: max(epoch, 0)] if epoch is not None else list(val_history)
    decays, _ = _plateau_events(history, cfg.plateau_patience_epochs, cfg.min_improvement,
                                cfg.gate_epoch(model_size))
    return cfg.peak_lr * cfg.plateau_factor ** decays


def should_stop(val_history: Sequence[float], cfg: TrainConfig, model_size: str = "M") -> bool:
    """True once ``early_stop_epochs`` consecutive epochs failed to improve."""
    _, since_best = _plateau_events(val_history, cfg.plateau_patience_epochs, cfg.min_improvement, None)
    gate = cfg.gate_epoch(model_size)
    if gate is not None and len(val_history) <= gate:
        return False
    return since_best >= cfg.early_stop_epochs


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
               cfg: TrainConfig) -> AdamState:
    """One in-place AdamW update with decoupled weight decay and bias correction.

    Aborts before touching any parameter if a gradient is not finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError(f"adamw_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adamw_step: non-finite gradient for parameter #{i}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ConfigError(f"adamw_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 5.0) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by max_norm/g when their global L2 norm g exceeds max_norm.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * g.dtype.type(scale) for g in grads], norm
    return list(grads), norm


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TFLC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {dt: tag for tag, dt in _DTYPES.items()}
_META = "__meta__"
_M, _V = "__adam_m__.", "__adam_v__."


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    fingerprint: str
    config: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    val_history: list[float] = field(default_factory=list)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    extra: dict = field(default_factory=dict)


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|=<" else arr.dtype
    if dt not in _TAGS:
        raise ConfigError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", _TAGS[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "fingerprint": ckpt.fingerprint, "config": ckpt.config, "step": ckpt.step, "epoch": ckpt.epoch,
        "val_history": [float(v) for v in ckpt.val_history], "adam_t": ckpt.adam_t, "extra": ckpt.extra,
    }
    parts = [MAGIC, struct.pack("<I", VERSION),
             _record(_META, np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))]
    parts += [_record(k, v) for k, v in ckpt.params.items()]
    parts += [_record(_M + k, v) for k, v in ckpt.adam_m.items()]
    parts += [_record(_V + k, v) for k, v in ckpt.adam_v.items()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: checkpoint magic: expected {MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 8:
        raise FormatError(f"{path}: checkpoint version: file truncated")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version: unsupported {version}")
    pos = 8
    records: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise FormatError(f"{path}: record {name!r}: data truncated")
            records[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint record at byte {pos}: {exc}") from None
    if _META not in records:
        raise FormatError(f"{path}: checkpoint meta record missing")
    meta = json.loads(records.pop(_META).tobytes().decode())
    adam_m = {k[len(_M):]: records.pop(k) for k in [k for k in records if k.startswith(_M)]}
    adam_v = {k[len(_V):]: records.pop(k) for k in [k for k in records if k.startswith(_V)]}
    return Checkpoint(records, meta["fingerprint"], meta.get("config", {}), meta.get("step", 0),
                      meta.get("epoch", 0), meta.get("val_history", []), adam_m, adam_v,
                      meta.get("adam_t", 0), meta.get("extra", {}))


def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Per-tensor arithmetic mean. Values are sorted elementwise before summing,
    so the result does not depend on input order."""
    if not states:
        raise ConfigError("cannot average zero checkpoints")
    names = list(states[0])
    for s in states[1:]:
        if set(s) != set(names):
            raise ConfigError("checkpoints to average hold different parameter names")
    out = {}
    for name in names:
        stack = np.sort(np.stack([np.asarray(s[name], dtype=np.float64) for s in states]), axis=0)
        out[name] = (stack.sum(axis=0) / len(states)).astype(states[0][name].dtype)
    return out


def average_checkpoints(paths: Sequence) -> dict[str, np.ndarray]:
    """Average checkpoints that share one config fingerprint; optimiser state is dropped."""
    ckpts = [load_checkpoint(p) for p in paths]
    prints = {c.fingerprint for c in ckpts}
    if len(prints) > 1:
        raise ConfigError(f"cannot average checkpoints from different configs (fingerprints {sorted(prints)})")
    return average_states([c.params for c in ckpts])


# ---------------------------------------------------------------- loop

@dataclass
class StepInfo:
    step: int
    epoch: int
    lr: float
    loss: float
    grad_norm: float
    batch_ids: list[str]


@dataclass
class FitResult:
    params: ModelParams                 # average of the retained best checkpoints
    last_params: dict[str, np.ndarray]
    step_losses: list[float]
    train_history: list[float]
    val_history: list[float]
    steps: int
    stopped: str                        # "max_epochs", "early_stop", "max_steps" or "callback"
    best: list[tuple[float, int]]       # (val loss, epoch) of the averaged checkpoints


def _batch_arrays(items: Sequence[MixtureItem]):
    mix = np.stack([it.mix for it in items])
    refs = np.stack([it.refs for it in items])
    return mix, refs


def batch_loss(model_cfg: ModelConfig, params: ModelParams, items: Sequence[MixtureItem], task: str) -> Tensor:
    mix, refs = _batch_arrays(items)
    est, _ = forward(mix, model_cfg, params)
    if task == "separation":
        return pit_loss(est, refs).loss
    return enh_loss(est[:, 0], refs[:, 0])


def evaluate_items(model_cfg: ModelConfig, params: ModelParams, items: Sequence[MixtureItem],
                   batch_size: int = 4) -> np.ndarray:
    """SI-SNRi per item (best permutation for separation), no gradient."""
    scores = []
    with no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            mix, refs = _batch_arrays(chunk)
            est = forward(mix, model_cfg, params)[0].data
            if refs.shape[1] > 1:
                perm = pit_loss(est, refs).permutation
                est = np.take_along_axis(est, perm[..., None], axis=1)
            scores.extend(si_snri(est, refs, mix[:, None, :]).mean(axis=-1))
    return np.asarray(scores)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _prepare(items: Sequence[MixtureItem], cfg: TrainConfig, epoch: int, salt: int) -> list[MixtureItem]:
    if cfg.segment_s is None:
        return list(items)
    out = []
    for i, it in enumerate(items):
        try:
            out.append(segment_normalize(it, cfg.segment_s, seed=_seed(cfg.seed, salt, epoch, i)))
        except RejectedItem:
            continue
    return out


def fit(model_cfg: ModelConfig, params: ModelParams, train_items: Sequence[MixtureItem],
        val_items: Sequence[MixtureItem], cfg: TrainConfig, *, log: TextIO | None = None,
        out_dir=None, callback: Callable[[StepInfo], bool] | None = None,
        dm_pool: Sequence[np.ndarray] | None = None) -> FitResult:
    """Train ``params`` in place; return the average of the best ``keep_best`` epochs.

    ``callback`` sees every step and may return True to end training early.
    With ``out_dir`` the retained best checkpoints, the last state and the
    averaged model are written there as checkpoint files.
    """
    tensors = params.tensors()
    names = list(params.named())
    adam = AdamState.zeros_like(tensors)
    fingerprint = model_cfg.fingerprint()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def emit(*fields):
        if log is not None:
            log.write("\t".join(str(f) for f in fields) + "\n")
            log.flush()

    val_set = _prepare(val_items, cfg, 0, salt=1)
    step, stopped = 0, "max_epochs"
    step_losses: list[float] = []
    train_history: list[float] = []
    val_history: list[float] = []
    best: list[tuple[float, int, dict]] = []

    for epoch in range(1, cfg.epochs + 1):
        if cfg.dynamic_mixing and dm_pool is not None:
            pool_n = model_cfg.n_srcs
            epoch_items = [dynamic_mix(dm_pool, pool_n, seed=_seed(cfg.seed, 2, epoch, i),
                                       sample_rate=model_cfg.sample_rate) for i in range(len(train_items))]
        else:
            epoch_items = list(train_items)
        train_set = _prepare(epoch_items, cfg, epoch, salt=0)
        order = epoch_order(len(train_set), epoch, cfg.seed)
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[b:b + cfg.batch_size]]
            ids = [it.id for it in batch]
            loss = batch_loss(model_cfg, params, batch, cfg.task)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss {value} at step {step + 1}, epoch {epoch}, batch ids {ids}")
            grads = [g.astype(t.dtype, copy=False) for g, t in zip(gradients(loss, tensors), tensors)]
            grads, norm = clip_grad_norm(grads, cfg.clip_norm)
            step += 1
            lr = lr_schedule(step, epoch, val_history, cfg, model_cfg.size)
            try:
                adamw_step(tensors, grads, adam, lr, cfg)
            except NumericError as exc:
                raise NumericError(f"{exc} at step {step}, epoch {epoch}, batch ids {ids}") from None
            losses.append(value)
            step_losses.append(value)
            emit("step", step, "epoch", epoch, "lr", f"{lr:.6g}", "loss", f"{value:.6f}", "grad_norm", f"{norm:.4f}")
            if callback is not None and callback(StepInfo(step, epoch, lr, value, norm, ids)):
                stopped = "callback"
                break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stopped = "max_steps"
                break
        with no_grad():
            val = float(np.mean([batch_loss(model_cfg, params, val_set[i:i + cfg.batch_size], cfg.task).item()
                                 for i in range(0, len(val_set), cfg.batch_size)])) if val_set else float(np.mean(losses))
        train_history.append(float(np.mean(losses)) if losses else float("nan"))
        val_history.append(val)
        emit("epoch", epoch, "train_loss", f"{train_history[-1]:.6f}", "val_loss", f"{val:.6f}",
             "lr", f"{lr_schedule(step + 1, epoch, val_history, cfg, model_cfg.size):.6g}")

        snapshot = {k: v.copy() for k, v in state_dict(params).items()}
        best.append((val, epoch, snapshot))
        best.sort(key=lambda r: (r[0], r[1]))
        dropped = best[cfg.keep_best:]
        best = best[:cfg.keep_best]
        if out_dir is not None:
            for _, e, _ in dropped:
                (out_dir / f"epoch{e:04d}.tflc").unlink(missing_ok=True)
            if any(e == epoch for _, e, _ in best):
                save_checkpoint(out_dir / f"epoch{epoch:04d}.tflc", Checkpoint(
                    snapshot, fingerprint, model_cfg.to_dict(), step, epoch, list(val_history)))
        if stopped != "max_epochs":
            break
        if should_stop(val_history, cfg, model_cfg.size):
            stopped = "early_stop"
            break

    last = {k: v.copy() for k, v in state_dict(params).items()}
    averaged = average_states([s for _, _, s in best])
    result_params = load_state(init_params(model_cfg, seed=0, dtype=tensors[0].dtype), averaged)
    if out_dir is not None:
        adam_m = {n: m for n, m in zip(names, adam.m)}
        adam_v = {n: v for n, v in zip(names, adam.v)}
        save_checkpoint(out_dir / "last.tflc", Checkpoint(last, fingerprint, model_cfg.to_dict(), step,
                                                           len(val_history), list(val_history), adam_m, adam_v, adam.t,
                                                           {"train": dataclasses.asdict(cfg)}))
        save_checkpoint(out_dir / "averaged.tflc", Checkpoint(averaged, fingerprint, model_cfg.to_dict(), step,
                                                              len(val_history), list(val_history)))
    return FitResult(result_params, last, step_losses, train_history, val_history, step, stopped,
                     [(v, e) for v, e, _ in best])

