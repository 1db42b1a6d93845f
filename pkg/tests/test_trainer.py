"""Optimizer arithmetic, plateau schedule, epoch loop, and the fit recipe."""

import json

import numpy as np
import pytest

from sdanet.datapipe import PairDataset, WindowPair, Window, pairs_to_batch
from sdanet.errors import TrainingAbort
from sdanet.model import ParamStore, SdanetConfig, init_params, load_model_checkpoint
from sdanet.rng import RngState
from sdanet.trainer import (
    PlateauScheduler,
    TrainConfig,
    adam_from_entries,
    adam_step,
    adam_to_entries,
    epoch_batches,
    fit,
    init_adam,
    plateau_lr,
    train_epoch,
    validate,
)

TINY = SdanetConfig(feature_channels=4, eeg_channels=8, window_samples=64, dropout_rate=0.0)


def scalar_store(value=1.0, name="x.w"):
    return ParamStore({name: np.array([value])}, {})


class TestAdamStep:
    def test_first_step_closed_form(self):
        store = scalar_store(0.0)
        state = init_adam(store)
        adam_step(store, {"x.w": np.array([1.0])}, state, lr=3e-4, weight_decay=0.0)
        # mhat = vhat = 1 at t=1, so the update is -lr/(1+eps)
        expected = -3e-4 / (1.0 + state.eps)
        assert abs(float(store.params["x.w"][0]) - expected) < 1e-18
        assert state.t == 1

    def test_zero_gradients_leave_params(self):
        store = scalar_store(2.5)
        state = init_adam(store)
        for _ in range(5):
            adam_step(store, {"x.w": np.zeros(1)}, state, lr=3e-4, weight_decay=0.0)
        assert float(store.params["x.w"][0]) == 2.5
        assert state.t == 5

    def test_decoupled_decay_exact_scale(self):
        store = scalar_store(2.0)
        state = init_adam(store)
        adam_step(store, {"x.w": np.zeros(1)}, state, lr=3e-4, weight_decay=1e-4)
        assert float(store.params["x.w"][0]) == 2.0 * (1.0 - 3e-4 * 1e-4)

    def test_decay_exempts_biases_and_bn(self):
        store = ParamStore({"a.w": np.array([1.0]), "a.b": np.array([1.0]),
                            "bn.gamma": np.array([1.0]), "bn.beta": np.array([1.0])}, {})
        state = init_adam(store)
        grads = {k: np.zeros(1) for k in store.params}
        adam_step(store, grads, state, lr=1e-2, weight_decay=0.1)
        assert float(store.params["a.w"][0]) < 1.0
        for name in ("a.b", "bn.gamma", "bn.beta"):
            assert float(store.params[name][0]) == 1.0

    def test_second_moment_nonnegative_and_t_monotone(self):
        rng = RngState(0)
        store = scalar_store(0.0)
        state = init_adam(store)
        for i in range(20):
            adam_step(store, {"x.w": rng.normal(0, 1, 1)}, state, 3e-4, 1e-4)
            assert state.t == i + 1
            assert np.all(state.v["x.w"] >= 0.0)

    def test_nan_gradient_aborts_with_name(self):
        store = ParamStore({"good.w": np.ones(1), "bad.w": np.ones(1)}, {})
        state = init_adam(store)
        grads = {"good.w": np.zeros(1), "bad.w": np.array([np.nan])}
        before = store.params["good.w"].copy()
        with pytest.raises(TrainingAbort, match="bad.w"):
            adam_step(store, grads, state, 3e-4, 0.0)
        np.testing.assert_array_equal(store.params["good.w"], before)  # no partial update
        assert state.t == 0

    def test_entries_round_trip(self):
        store = scalar_store(1.0)
        state = init_adam(store)
        adam_step(store, {"x.w": np.ones(1)}, state, 3e-4, 0.0)
        back = adam_from_entries(adam_to_entries(state))
        assert back.t == state.t
        np.testing.assert_array_equal(back.m["x.w"], state.m["x.w"])
        np.testing.assert_array_equal(back.v["x.w"], state.v["x.w"])
        assert adam_from_entries({}) is None


class TestPlateau:
    def test_improving_losses_keep_lr(self):
        sched = PlateauScheduler(3e-4, patience=5)
        for loss in np.linspace(1.0, 0.1, 30):
            assert sched.step(loss) == 3e-4

    def test_flat_losses_trace(self):
        lr0 = 3e-4
        sched = PlateauScheduler(lr0, patience=5, factor=3.0)
        lrs = []
        for _ in range(11):
            lrs.append(sched.lr)  # lr in effect for this epoch
            sched.step(0.7)
        assert lrs[:5] == [lr0] * 5
        assert lrs[5] == pytest.approx(1e-4, rel=1e-12)
        assert lrs[10] == pytest.approx(lr0 / 9.0, rel=1e-12)
        assert lrs[10] == pytest.approx(3.33e-5, rel=1e-2)

    def test_min_lr_clamp(self):
        sched = PlateauScheduler(1e-5, patience=1, factor=3.0, min_lr=1e-6)
        for _ in range(50):
            sched.step(1.0)
        assert sched.lr == 1e-6

    def test_functional_replay(self):
        assert plateau_lr([], 3e-4, 5) == 3e-4
        flat = [0.7] * 6
        assert plateau_lr(flat, 3e-4, 5) == pytest.approx(1e-4, rel=1e-12)
        assert plateau_lr([0.7] * 11, 3e-4, 5) == pytest.approx(3e-4 / 9, rel=1e-12)

    def test_tiny_improvements_do_not_reset(self):
        sched = PlateauScheduler(3e-4, patience=2, threshold=1e-6)
        sched.step(0.5)
        sched.step(0.5 - 1e-9)  # below threshold: counts as no improvement
        assert sched.step(0.5 - 2e-9) == pytest.approx(1e-4, rel=1e-12)


def synthetic_pairs(n, subject="S00", seed=0, window=64, eeg_ch=8):
    rng = RngState(seed)
    out = []
    for i in range(n):
        out.append(WindowPair(
            eeg_window=rng.normal(0, 1, (window, eeg_ch)),
            match_env=rng.normal(0, 1, (window, 1)),
            mismatch_env=rng.normal(0, 1, (window, 1)),
            match_window=Window(0, window),
            mismatch_window=Window(window * 2, window),
            subject_id=subject,
            label=int(rng.integers(0, 2)),
        ))
    return out


def tiny_dataset(pairs_per_subject=10, n_subjects=8, seed=0):
    train = {f"S{s:02d}": synthetic_pairs(pairs_per_subject, f"S{s:02d}", seed + s)
             for s in range(n_subjects)}
    val = synthetic_pairs(12, "S00", seed + 100)
    test = synthetic_pairs(12, "S01", seed + 200)
    return PairDataset(train=train, val=val, test=test)


def tiny_train_cfg(**kw):
    base = dict(lr0=1e-3, weight_decay=1e-4, dropout=0.0, epochs=2, batch_size=16,
                subjects_per_batch=8, average_last_k=2, seed=0, steps_per_epoch=2)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainEpoch:
    def run_epoch(self, lr, wd=0.0, seed=0):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(weight_decay=wd)  # lr passed straight to train_epoch
        store = init_params(TINY, RngState(1))
        adam = init_adam(store)
        rng = RngState(seed)
        batches = list(epoch_batches(ds.train, cfg, None, rng.split("batches"), steps=2))
        loss, first_hash = train_epoch(store, adam, batches, TINY, cfg, lr, rng.split("drop"))
        return store, loss, first_hash

    def test_zero_lr_is_fixed_point(self):
        ref = init_params(TINY, RngState(1))
        store, loss, _ = self.run_epoch(lr=0.0, wd=0.0)
        for name in ref.params:
            np.testing.assert_array_equal(store.params[name], ref.params[name])
        assert np.isfinite(loss)

    def test_same_seed_identical_trajectory(self):
        s1, l1, h1 = self.run_epoch(lr=1e-3, seed=4)
        s2, l2, h2 = self.run_epoch(lr=1e-3, seed=4)
        assert l1 == l2 and h1 == h2
        assert s1 == s2

    def test_nonzero_lr_moves_params(self):
        ref = init_params(TINY, RngState(1))
        store, _, _ = self.run_epoch(lr=1e-3)
        assert any(not np.array_equal(store.params[n], ref.params[n]) for n in ref.params)


class TestValidate:
    def test_zero_head_gives_ln2_and_label0_accuracy(self):
        pairs = synthetic_pairs(40, seed=3)
        store = init_params(TINY, RngState(0))
        store.params["head.w"][:] = 0.0
        store.params["head.b"][:] = 0.0
        batch = pairs_to_batch(pairs[:8])
        from sdanet.model import forward
        forward(store, batch.eeg, batch.stim_a, batch.stim_b, TINY, mode="train")
        loss, acc = validate(store, pairs, TINY)
        assert abs(loss - np.log(2.0)) < 1e-12
        labels = np.array([p.label for p in pairs])
        assert acc == (labels == 0).mean()

    def test_side_effect_free(self):
        pairs = synthetic_pairs(10, seed=5)
        store = init_params(TINY, RngState(0))
        batch = pairs_to_batch(pairs[:4])
        from sdanet.model import forward
        forward(store, batch.eeg, batch.stim_a, batch.stim_b, TINY, mode="train")
        snapshot = store.copy()
        validate(store, pairs, TINY)
        assert store == snapshot

    def test_empty_set_rejected(self):
        store = init_params(TINY, RngState(0))
        with pytest.raises(ValueError, match="empty"):
            validate(store, [], TINY)


class TestFit:
    def test_artifacts_and_records(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(epochs=3, average_last_k=2)
        result = fit(ds, TINY, cfg, tmp_path)
        assert len(result.records) == 3
        for i, rec in enumerate(result.records, start=1):
            assert rec.epoch == i
            assert (tmp_path / rec.checkpoint).exists()
        assert (tmp_path / "final_averaged.sdck").exists()
        lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 3
        parsed = [json.loads(line) for line in lines]
        assert [p["epoch"] for p in parsed] == [1, 2, 3]
        lrs = [p["lr"] for p in parsed]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_single_epoch_average_equals_checkpoint(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(epochs=1, average_last_k=1)
        result = fit(ds, TINY, cfg, tmp_path)
        snap, _, _, _ = load_model_checkpoint(tmp_path / result.records[0].checkpoint)
        assert result.store == snap

    def test_checkpoint_write_failure_names_last_good(self, tmp_path, monkeypatch):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(epochs=3)
        import sdanet.trainer as trainer_mod

        real = trainer_mod.save_model_checkpoint
        calls = {"n": 0}

        def flaky(path, *a, **kw):
            calls["n"] += 1
            if calls["n"] == 2:
                raise OSError("disk full")
            return real(path, *a, **kw)

        monkeypatch.setattr(trainer_mod, "save_model_checkpoint", flaky)
        with pytest.raises(TrainingAbort, match="epoch_0001"):
            fit(ds, TINY, cfg, tmp_path)

    def test_byte_identical_reruns(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(epochs=2)
        out1 = tmp_path / "run1"
        out2 = tmp_path / "run2"
        fit(ds, TINY, cfg, out1)
        fit(ds, TINY, cfg, out2)
        assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()
        for rel in ("checkpoints/epoch_0001.sdck", "checkpoints/epoch_0002.sdck",
                    "final_averaged.sdck"):
            assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()

    def test_dropout_comes_from_train_config(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(epochs=1, average_last_k=1, dropout=0.3)
        result = fit(ds, TINY, cfg, tmp_path)
        assert result.model_config.dropout_rate == 0.3

    def test_empty_split_rejected(self, tmp_path):
        ds = tiny_dataset()
        with pytest.raises(ValueError, match="validation"):
            fit(PairDataset(train=ds.train, val=[], test=ds.test), TINY, tiny_train_cfg(),
                tmp_path)


class TestTrainConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_factor=1.0)
        with pytest.raises(ValueError):
            TrainConfig(average_last_k=200, epochs=100)
        with pytest.raises(ValueError):
            TrainConfig(dropout=1.0)
