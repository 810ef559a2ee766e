"""Command-line entry point: ``tflocoformer {train,separate,evaluate,gradcheck,info}``.

Exit codes: 0 success, 1 usage, 2 config, 3 data/format, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    MixtureItem, load_wav, read_manifest, save_wav, synth_mixture,
)
from .errors import ConfigError, DimensionError, FormatError, NumericError, RejectedItem, UsageError
from .losses import pit_loss, sdri, si_snri
from .model import ModelConfig, build_config, count_params, forward, init_params, load_state
from .numerics import no_grad
from .training import TrainConfig, fit, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str | None = None   # None: synthetic training set
    valid_manifest: str | None = None
    synth_train: int = 100
    synth_valid: int = 20
    synth_duration_s: float = 4.0
    snr_min_db: float | None = None     # None: no noise for separation, 0 dB for enhancement
    snr_max_db: float | None = None

    def __post_init__(self):
        if self.synth_train < 1 or self.synth_valid < 0:
            raise ConfigError("data.synth_train must be >= 1 and data.synth_valid >= 0")
        if self.synth_duration_s < 0.25:
            raise ConfigError(f"data.synth_duration_s must be at least 0.25, got {self.synth_duration_s}")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def task(self) -> str:
        return self.train.task

    def lines(self) -> list[str]:
        out = []
        for section, obj in (("model", self.model), ("train", self.train), ("data", self.data)):
            for f in dataclasses.fields(obj):
                out.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return out


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}
_ALIASES = {"task": "train.task", "seed": "train.seed"}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def known_keys() -> list[str]:
    keys = [f"{s}.{f.name}" for s, cls in _SECTIONS.items() for f in dataclasses.fields(cls)]
    return keys + sorted(_ALIASES)


def _field_type(key: str):
    section, name = key.split(".", 1)
    return typing.get_type_hints(_SECTIONS[section])[name]


def _convert(raw: str, tp, where: str, key: str):
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    optional = type(None) in typing.get_args(tp)
    if optional and raw.lower() in ("none", "null", ""):
        return None
    base = args[0] if args else tp
    try:
        if base is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key} = {raw!r} as {getattr(base, '__name__', base)}") from None


def _assign(values: dict, key: str, raw: str, where: str) -> None:
    key = _ALIASES.get(key, key)
    if key not in known_keys():
        raise ConfigError(f"{where}: unknown key {key!r}")
    values[key] = (_convert(raw, _field_type(key), where, key), where)


def _read_lines(path: Path) -> list[tuple[str, str, str]]:
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        out.append((key, raw, f"{path}:{lineno}"))
    return out


def parse_config(path=None, overrides: Sequence[tuple[str, str]] = ()) -> RunConfig:
    """Defaults (Medium, N=2, separation) <- config file <- ``--key value`` overrides."""
    values: dict[str, tuple[object, str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FormatError(f"config file not found: {path}")
        for key, raw, where in _read_lines(path):
            _assign(values, key, raw, where)
    for key, raw in overrides:
        _assign(values, key, raw, f"--{key}")

    per_section: dict[str, dict] = {s: {} for s in _SECTIONS}
    where_of: dict[str, str] = {}
    for key, (v, where) in values.items():
        section, name = key.split(".", 1)
        per_section[section][name] = v
        where_of[key] = where

    def build(section, fn):
        try:
            return fn(per_section[section])
        except ConfigError as exc:
            # name the line of the offending key when the message points at one
            bad = next((k for k in where_of if k.startswith(section + ".") and k in str(exc)), None)
            if bad is None:
                bad = next((k for k in where_of if k.startswith(section + ".")), None)
            prefix = f"{where_of[bad]}: " if bad else ""
            raise ConfigError(f"{prefix}{exc}") from None

    def model_fn(kw):
        kw = dict(kw)
        size = kw.pop("size", "M")
        return build_config(size, **kw)

    model = build("model", model_fn)
    train = build("train", lambda kw: TrainConfig(**kw))
    data = build("data", lambda kw: DataConfig(**kw))
    return RunConfig(model, train, data)


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _split_overrides(rest: Sequence[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise UsageError(f"unexpected argument {tok!r}; overrides are '--key value'")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"override --{key} needs a value")
            raw = rest[i + 1]
            i += 2
        out.append((key, raw))
    return out


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tflocoformer", allow_abbrev=False, description="TF-Locoformer speech separation / enhancement (numpy).")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model; remaining --key value pairs override the config")
    t.add_argument("--config", type=Path)
    t.add_argument("--out", type=Path, required=True, help="directory for checkpoints and logs")

    s = sub.add_parser("separate", help="separate WAV mixtures with a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("inputs", type=Path, nargs="+")

    e = sub.add_parser("evaluate", help="score estimates named <mix stem>_src<i>.wav against a manifest")
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--est-dir", type=Path, required=True)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-ablations", action="store_true")

    i = sub.add_parser("info", help="print config, parameter count and tensor shapes")
    i.add_argument("--config", type=Path)
    i.add_argument("--checkpoint", type=Path)
    return p


# ---------------------------------------------------------------- commands

def _synth_items(run: RunConfig, count: int, seed_base: int) -> list[MixtureItem]:
    d = run.data
    snr = None
    if d.snr_min_db is not None or d.snr_max_db is not None or run.task == "enhancement":
        lo = 0.0 if d.snr_min_db is None else d.snr_min_db
        hi = lo + 10.0 if d.snr_max_db is None else d.snr_max_db
        snr = (lo, hi)
    return [synth_mixture(seed_base + i, run.model.n_srcs, d.synth_duration_s, run.model.sample_rate, snr)
            for i in range(count)]


def _manifest_items(path, sr: int) -> list[MixtureItem]:
    items = []
    for entry in read_manifest(path):
        mix = _read_checked(entry.mix, sr)
        refs = np.stack([_read_checked(r, sr) for r in entry.refs])
        if refs.shape[-1] != mix.shape[-1]:
            raise FormatError(f"{entry.id}: reference length {refs.shape[-1]} != mixture length {mix.shape[-1]}")
        items.append(MixtureItem(mix, refs, None, sr, entry.id))
    return items


def _read_checked(path, sr: int) -> np.ndarray:
    if not Path(path).is_file():
        raise FormatError(f"audio file not found: {path}")
    w = load_wav(path)
    if w.sample_rate != sr:
        raise FormatError(f"{path}: sample rate {w.sample_rate} != model sample rate {sr}")
    return w.samples


def cmd_train(args, overrides, out) -> int:
    run = parse_config(args.config, overrides)
    seed = run.train.seed
    if run.data.train_manifest:
        train_items = _manifest_items(run.data.train_manifest, run.model.sample_rate)
    else:
        train_items = _synth_items(run, run.data.synth_train, seed * 1_000_003)
    if run.data.valid_manifest:
        val_items = _manifest_items(run.data.valid_manifest, run.model.sample_rate)
    else:
        val_items = _synth_items(run, run.data.synth_valid, seed * 1_000_003 + 500_000)
    if run.task == "enhancement" and run.model.n_srcs != 1:
        raise ConfigError("task = enhancement needs model.n_srcs = 1")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text("\n".join(run.lines()) + "\n")
    params = init_params(run.model, seed=seed)
    pool = [r for it in train_items for r in it.refs] if run.train.dynamic_mixing else None
    with open(args.out / "train.log", "w") as log:
        res = fit(run.model, params, train_items, val_items, run.train, log=log, out_dir=args.out, dm_pool=pool)
    print(f"steps\t{res.steps}\tepochs\t{len(res.val_history)}\tstopped\t{res.stopped}", file=out)
    print(f"best_val_loss\t{min(res.val_history):.6f}\taveraged\t{args.out / 'averaged.tflc'}", file=out)
    return EXIT_OK


def _model_from_checkpoint(path):
    ck = load_checkpoint(path)
    cfg_dict = dict(ck.config)
    if not cfg_dict:
        raise FormatError(f"{path}: checkpoint carries no model config")
    cfg = ModelConfig(**cfg_dict)
    if cfg.fingerprint() != ck.fingerprint:
        raise ConfigError(f"{path}: stored config does not match its fingerprint")
    return cfg, load_state(init_params(cfg, seed=0), ck.params)


def cmd_separate(args, overrides, out) -> int:
    if overrides:
        raise UsageError("separate takes no config overrides")
    cfg, params = _model_from_checkpoint(args.checkpoint)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.inputs:
        mix = _read_checked(path, cfg.sample_rate).astype(np.float32)
        std = float(np.std(mix.astype(np.float64)))
        if std < 1e-8:
            raise RejectedItem(f"{path}: mixture is silent (std {std:.3g})")
        with no_grad():
            est = forward(mix / np.float32(std), cfg, params)[0].data * std
        for i, src in enumerate(est, 1):
            dest = args.out_dir / f"{path.stem}_src{i}.wav"
            save_wav(dest, src, cfg.sample_rate)
            print(f"{path}\t{dest}", file=out)
    return EXIT_OK


def cmd_evaluate(args, overrides, out) -> int:
    if overrides:
        raise UsageError("evaluate takes no config overrides")
    rows = []
    print("id\tsi_snri_db\tsdri_db", file=out)
    for entry in read_manifest(args.manifest):
        mix_w = load_wav(entry.mix) if entry.mix.is_file() else None
        if mix_w is None:
            raise FormatError(f"audio file not found: {entry.mix}")
        sr = mix_w.sample_rate
        refs = np.stack([_read_checked(r, sr) for r in entry.refs]).astype(np.float64)
        ests = np.stack([_read_checked(args.est_dir / f"{entry.mix.stem}_src{i}.wav", sr)
                         for i in range(1, len(entry.refs) + 1)]).astype(np.float64)
        mix = mix_w.samples.astype(np.float64)
        if ests.shape != refs.shape or refs.shape[-1] != mix.shape[-1]:
            raise FormatError(f"{entry.id}: estimate/reference/mixture lengths differ")
        if len(refs) > 1:
            ests = ests[pit_loss(ests, refs).permutation]
        a = float(np.mean(si_snri(ests, refs, mix[None])))
        b = float(np.mean(sdri(ests, refs, mix[None])))
        rows.append((a, b))
        print(f"{entry.id}\t{a:.4f}\t{b:.4f}", file=out)
    if not rows:
        raise FormatError(f"{args.manifest}: manifest lists no items")
    mean = np.mean(rows, axis=0)
    print(f"mean\t{mean[0]:.4f}\t{mean[1]:.4f}", file=out)
    return EXIT_OK


def cmd_gradcheck(args, overrides, out) -> int:
    if overrides:
        raise UsageError("gradcheck takes no config overrides")
    from .gradsuite import run_suite

    failed = 0
    print("case\tmax_rel_error\tprobes\tstatus", file=out)
    for r in run_suite(args.seed, ablations=not args.no_ablations):
        status = "ok" if r.passed else f"FAIL ({r.worst})"
        failed += not r.passed
        print(f"{r.name}\t{r.max_rel_error:.3e}\t{r.n_checked}\t{status}", file=out)
    if failed:
        raise NumericError(f"{failed} gradient check(s) exceeded the tolerance")
    return EXIT_OK


def cmd_info(args, overrides, out) -> int:
    if args.checkpoint is not None:
        if args.config is not None or overrides:
            raise UsageError("info takes either --checkpoint or a config, not both")
        cfg, params = _model_from_checkpoint(args.checkpoint)
        lines = [f"model.{f.name} = {_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    else:
        run = parse_config(args.config, overrides)
        cfg, lines = run.model, run.lines()
        params = init_params(cfg, seed=run.train.seed)
    for line in lines:
        print(line, file=out)
    print(f"parameters\t{count_params(params)}", file=out)
    sr = cfg.sample_rate
    stft = cfg.stft
    t = stft.n_frames(sr)
    print(f"input\t[L] waveform at {sr} Hz; 1 s -> spectrum [2, {t}, {stft.n_bins}]", file=out)
    print(f"output\t[{cfg.n_srcs}, L] waveforms; spectra [2, {cfg.n_srcs}, {t}, {stft.n_bins}]", file=out)
    for name, tensor in params.named().items():
        print(f"{name}\t{list(tensor.shape)}", file=out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "separate": cmd_separate, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck, "info": cmd_info}


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv or argv[0] in ("-h", "--help"):
            _build_parser().print_help(out)
            return EXIT_OK if argv else EXIT_USAGE
        args, rest = _build_parser().parse_known_args(argv)
        overrides = _split_overrides(rest)
        return COMMANDS[args.command](args, overrides, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=err)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except (FormatError, DimensionError, RejectedItem, OSError) as exc:
        print(f"data error: {exc}", file=err)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=err)
        return EXIT_NUMERIC
    except SystemExit as exc:        # argparse --help inside a subcommand
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
