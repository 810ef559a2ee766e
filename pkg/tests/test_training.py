import io

import numpy as np
import pytest

from tflocoformer.data import segment_normalize, synth_mixture
from tflocoformer.errors import ConfigError, FormatError, NumericError
from tflocoformer.model import build_config, forward, init_params, load_state, state_dict
from tflocoformer.numerics import Tensor, no_grad
from tflocoformer.training import (
    AdamState, Checkpoint, TrainConfig, adamw_step, average_checkpoints, average_states,
    batch_loss, clip_grad_norm, fit, global_norm, load_checkpoint, lr_schedule, save_checkpoint,
    should_stop,
)

CFG = TrainConfig()


def test_defaults_follow_recipe():
    assert (CFG.peak_lr, CFG.warmup_steps, CFG.weight_decay) == (1e-3, 4000, 1e-2)
    assert (CFG.plateau_patience_epochs, CFG.plateau_factor, CFG.early_stop_epochs) == (3, 0.5, 10)
    assert (CFG.clip_norm, CFG.batch_size, CFG.segment_s) == (5.0, 4, 4.0)
    assert CFG.epochs == 150 and TrainConfig(dynamic_mixing=True).epochs == 200
    assert TrainConfig(dynamic_mixing=True).gate_epoch("M") == 75
    assert TrainConfig(dynamic_mixing=True).gate_epoch("L") == 65
    assert CFG.gate_epoch("M") is None


@pytest.mark.parametrize("bad", [dict(plateau_factor=1.0), dict(peak_lr=0), dict(task="x"), dict(batch_size=0)])
def test_invalid_train_config(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- schedule

def test_warmup_is_linear():
    assert lr_schedule(0, 0, [], CFG) == 0.0
    assert lr_schedule(2000, 0, [], CFG) == pytest.approx(5e-4, abs=1e-15)
    assert lr_schedule(4000, 0, [], CFG) == pytest.approx(1e-3, abs=1e-15)
    assert lr_schedule(4001, 0, [], CFG) == pytest.approx(1e-3)


def test_plateau_halving_by_hand():
    hist = [3.0, 3.1, 3.2]
    assert lr_schedule(5000, 3, hist, CFG) == pytest.approx(1e-3)
    hist = [3.0, 3.1, 3.2, 3.3]
    assert lr_schedule(5000, 4, hist, CFG) == pytest.approx(5e-4)


def test_plateau_decays_compound_and_reset():
    hist = [3.0] + [3.5] * 6
    assert lr_schedule(5000, 7, hist, CFG) == pytest.approx(2.5e-4)
    hist = [3.0, 3.1, 3.2, 2.9, 3.0, 3.0]   # improvement at epoch 4 restarts the count
    assert lr_schedule(5000, 6, hist, CFG) == pytest.approx(1e-3)


def test_improvement_threshold():
    hist = [3.0, 3.0 - 5e-7, 3.0 - 9e-7, 3.0 - 9.9e-7]
    assert lr_schedule(5000, 4, hist, CFG) == pytest.approx(5e-4)


def test_no_decay_during_warmup():
    assert lr_schedule(100, 5, [3.0] + [4.0] * 4, CFG) == pytest.approx(1e-3 * 100 / 4000)


def test_dm_gate_suppresses_decay():
    cfg = TrainConfig(dynamic_mixing=True)
    hist = [1.0] + [2.0] * 10
    assert lr_schedule(10_000, 11, hist, cfg) == pytest.approx(1e-3)
    assert not should_stop(hist, cfg)


def test_early_stop_after_exactly_ten():
    hist = [1.0] + [1.5] * 9
    assert not should_stop(hist, CFG)
    assert should_stop(hist + [1.5], CFG)


def test_schedule_is_pure():
    hist = [3.0, 3.1, 3.2, 3.3]
    assert lr_schedule(5000, 4, hist, CFG) == lr_schedule(5000, 4, list(hist), CFG)
    assert hist == [3.0, 3.1, 3.2, 3.3]


# ---------------------------------------------------------------- optimiser

def _leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_adamw_zero_grad_no_decay_is_identity():
    p = _leaf([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], AdamState.zeros_like([p]), 1e-3, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_decoupled_decay():
    p = _leaf([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], AdamState.zeros_like([p]), 1e-3, CFG)
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 1e-5), rtol=1e-15)


def test_adamw_hand_trace():
    # g = 1 each step: m1 = .1, v1 = .001, mhat = vhat = 1; m2 = .19, v2 = .001999, mhat = vhat = 1
    lr, wd, eps = 1e-3, 1e-2, 1e-8
    p1 = 1.0 * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
    p2 = p1 * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
    p = _leaf([1.0])
    st = AdamState.zeros_like([p])
    adamw_step([p], [np.ones(1)], st, lr, CFG)
    assert p.data[0] == pytest.approx(p1, abs=1e-10)
    adamw_step([p], [np.ones(1)], st, lr, CFG)
    assert p.data[0] == pytest.approx(p2, abs=1e-10)
    assert st.t == 2 and st.m[0][0] == pytest.approx(0.19) and st.v[0][0] == pytest.approx(0.001999)


def test_adamw_nan_aborts_without_update():
    p, q = _leaf([1.0]), _leaf([2.0])
    st = AdamState.zeros_like([p, q])
    with pytest.raises(NumericError):
        adamw_step([p, q], [np.ones(1), np.array([np.nan])], st, 1e-3, CFG)
    assert p.data[0] == 1.0 and st.t == 0


def test_clip_cases():
    g = [np.array([1.2, 1.6])]                       # norm 2
    out, n = clip_grad_norm(g, 5.0)
    assert n == pytest.approx(2.0) and np.array_equal(out[0], g[0])
    g = [np.array([6.0]), np.array([8.0])]           # norm 10
    out, n = clip_grad_norm(g, 5.0)
    assert n == pytest.approx(10.0)
    assert global_norm(out) == pytest.approx(5.0, abs=1e-6)
    np.testing.assert_allclose(out[0], [3.0]) and np.testing.assert_allclose(out[1], [4.0])
    a, b = np.concatenate(g), np.concatenate(out)
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) == pytest.approx(1.0, abs=1e-7)


def test_clip_never_increases_norm():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = [rng.standard_normal(5) * rng.uniform(0.1, 10) for _ in range(3)]
        assert global_norm(clip_grad_norm(g, 5.0)[0]) <= global_norm(g) + 1e-12


# ---------------------------------------------------------------- checkpoints

TINY = build_config("M", dim=8, blocks=1, hidden=16, heads=2, groups=2, n_srcs=2)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = init_params(TINY, seed=3)
    x = np.random.default_rng(0).standard_normal((1, 2000)).astype(np.float32)
    with no_grad():
        before = forward(x, TINY, params)[0].data
    state = state_dict(params)
    m = {k: np.full_like(v, 0.5) for k, v in state.items()}
    save_checkpoint(tmp_path / "c.tflc", Checkpoint(state, TINY.fingerprint(), TINY.to_dict(), 7, 2, [1.5, 1.25],
                                                    m, m, 7))
    ck = load_checkpoint(tmp_path / "c.tflc")
    assert (ck.step, ck.epoch, ck.val_history, ck.adam_t) == (7, 2, [1.5, 1.25], 7)
    assert ck.fingerprint == TINY.fingerprint() and ck.config == TINY.to_dict()
    assert set(ck.adam_m) == set(state)
    fresh = load_state(init_params(TINY, seed=99), ck.params)
    with no_grad():
        after = forward(x, TINY, fresh)[0].data
    assert before.tobytes() == after.tobytes()


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "c.tflc", Checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, "fp"))
    raw = (tmp_path / "c.tflc").read_bytes()
    assert raw[:4] == b"TFLC" and int.from_bytes(raw[4:8], "little") == 1
    assert raw.endswith(np.arange(6, dtype="<f4").tobytes())


def test_corrupt_checkpoints(tmp_path):
    save_checkpoint(tmp_path / "c.tflc", Checkpoint({"w": np.ones(100, np.float32)}, "fp"))
    raw = (tmp_path / "c.tflc").read_bytes()
    (tmp_path / "t.tflc").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.tflc")
    (tmp_path / "m.tflc").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "m.tflc")


def _write(tmp_path, name, value, fp="fp"):
    path = tmp_path / name
    save_checkpoint(path, Checkpoint({"a": np.full(3, value, np.float32), "b": np.full((2, 2), -value)}, fp))
    return path


def test_average_mean_and_identity(tmp_path):
    paths = [_write(tmp_path, "one.tflc", 1.0), _write(tmp_path, "three.tflc", 3.0)]
    avg = average_checkpoints(paths)
    np.testing.assert_array_equal(avg["a"], 2.0)
    np.testing.assert_array_equal(avg["b"], -2.0)
    same = average_checkpoints([paths[0]] * 5)
    np.testing.assert_array_equal(same["a"], 1.0)


def test_five_checkpoint_average_is_arithmetic_mean(tmp_path):
    rng = np.random.default_rng(0)
    states = [{"w": rng.standard_normal((4, 5)).astype(np.float32)} for _ in range(5)]
    paths = []
    for i, s in enumerate(states):
        paths.append(tmp_path / f"{i}.tflc")
        save_checkpoint(paths[-1], Checkpoint(s, "fp"))
    avg = average_checkpoints(paths)
    want = np.mean([s["w"].astype(np.float64) for s in states], axis=0)
    np.testing.assert_allclose(avg["w"], want, rtol=1e-6)
    rev = average_checkpoints(paths[::-1])
    assert avg["w"].tobytes() == rev["w"].tobytes()
    shuffled = average_states([states[i] for i in (3, 1, 4, 0, 2)])
    assert shuffled["w"].tobytes() == avg["w"].tobytes()


def test_average_rejects_mixed_fingerprints(tmp_path):
    with pytest.raises(ConfigError):
        average_checkpoints([_write(tmp_path, "a.tflc", 1.0, "x"), _write(tmp_path, "b.tflc", 1.0, "y")])


# ---------------------------------------------------------------- loop

def _items(n, n_srcs=2, seed=0, snr=None):
    return [segment_normalize(synth_mixture(seed + i, n_srcs, 0.25, snr_range_db=snr), 0.25) for i in range(n)]


def _short(**kw):
    return TrainConfig(**dict(dict(warmup_steps=4, batch_size=2, segment_s=None, max_epochs=2), **kw))


def test_fit_is_deterministic():
    items = _items(4)
    runs = []
    for _ in range(2):
        p = init_params(TINY, seed=0)
        runs.append(fit(TINY, p, items, items[:2], _short()))
    assert runs[0].train_history == runs[1].train_history
    assert runs[0].val_history == runs[1].val_history


def test_fit_logs_and_writes_checkpoints(tmp_path):
    items = _items(4)
    log = io.StringIO()
    res = fit(TINY, init_params(TINY, seed=0), items, items[:2], _short(), log=log, out_dir=tmp_path)
    lines = log.getvalue().splitlines()
    steps = [ln for ln in lines if ln.startswith("step\t")]
    epochs = [ln for ln in lines if ln.startswith("epoch\t")]
    assert len(steps) == res.steps == 4 and len(epochs) == 2
    assert steps[0].split("\t")[:6] == ["step", "1", "epoch", "1", "lr", "0.00025"]
    assert {p.name for p in tmp_path.iterdir()} == {"epoch0001.tflc", "epoch0002.tflc", "last.tflc", "averaged.tflc"}
    avg = load_checkpoint(tmp_path / "averaged.tflc").params
    a, b = (load_checkpoint(tmp_path / f"epoch000{e}.tflc").params for e in (1, 2))
    name = next(iter(avg))
    np.testing.assert_allclose(avg[name], (a[name].astype(np.float64) + b[name]) / 2, rtol=1e-6)


def test_fit_keeps_only_top_k(tmp_path):
    items = _items(2)
    res = fit(TINY, init_params(TINY, seed=0), items, items, _short(max_epochs=4, keep_best=2, batch_size=2),
              out_dir=tmp_path)
    kept = sorted(p.name for p in tmp_path.glob("epoch*.tflc"))
    assert len(kept) == 2 and len(res.best) == 2
    assert sorted(f"epoch{e:04d}.tflc" for _, e in res.best) == kept


def test_one_epoch_over_one_batch_reduces_loss():
    items = _items(2)
    p = init_params(TINY, seed=0)
    with no_grad():
        before = batch_loss(TINY, p, items, "separation").item()
    fit(TINY, p, items, [], _short(max_epochs=1, warmup_steps=1, peak_lr=1e-3, batch_size=2))
    with no_grad():
        after = batch_loss(TINY, p, items, "separation").item()
    assert after < before


def test_enhancement_task_runs():
    cfg1 = build_config("M", dim=8, blocks=1, hidden=16, heads=2, groups=2, n_srcs=1)
    items = _items(2, n_srcs=1, snr=(0, 5))
    res = fit(cfg1, init_params(cfg1), items, [], _short(task="enhancement", max_epochs=1))
    assert res.steps == 1 and np.isfinite(res.step_losses[0])


def test_early_stop_on_flat_loss(monkeypatch):
    import tflocoformer.training as tr
    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: Tensor(np.float32(1.0)))
    monkeypatch.setattr(tr, "gradients", lambda loss, ts: [np.zeros_like(t.data) for t in ts])
    items = _items(1)
    res = fit(TINY, init_params(TINY), items, items, _short(max_epochs=50, batch_size=1))
    assert res.stopped == "early_stop" and len(res.val_history) == 11


def test_nan_loss_reports_step_and_batch(monkeypatch):
    import tflocoformer.training as tr
    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: Tensor(np.float32(np.nan)))
    items = _items(2)
    with pytest.raises(NumericError, match=r"step 1.*synth-"):
        fit(TINY, init_params(TINY), items, [], _short())


def test_callback_can_stop():
    items = _items(4)
    res = fit(TINY, init_params(TINY), items, [], _short(max_epochs=5), callback=lambda info: info.step == 3)
    assert res.stopped == "callback" and res.steps == 3
