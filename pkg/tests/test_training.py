"""Tests for the loss, optimizer, schedules, training loop, and strategies."""

import numpy as np
import pytest
from conftest import make_linear_scans

from physio_recon import autodiff as ad
from physio_recon.autodiff import Tape, Tensor, backward, grad_check
from physio_recon.errors import DataError, NumericError
from physio_recon.models import AttentionConfig, Model, Seq2OneConfig, Seq2SeqConfig
from physio_recon.training import (
    Checkpoint,
    EarlyStopState,
    OptimizerState,
    PlateauState,
    StrategySpec,
    TrainConfig,
    adam_step,
    early_stop_update,
    pearson_loss,
    plateau_step,
    run_strategy,
    train_model,
    write_epoch_log,
)

TINY_CFG = Seq2OneConfig(n_roi=8, window=8, attention=AttentionConfig(2, 6, 12, dropout=0.1))
TINY_S2S = Seq2SeqConfig(n_roi=8, feature_dim=12, attention=AttentionConfig(2, 6, 12, dropout=0.1))
FAST_TRAIN = TrainConfig(task="RV", batch_size=4, lr_init=3e-3, max_epochs=25, seed=3, dtype="float64")


class TestPearsonLoss:
    def test_perfect_correlation(self):
        t = np.array([0.3, -1.0, 2.0, 0.5])
        loss = pearson_loss(Tensor(t.copy()), t)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_anticorrelation(self):
        t = np.array([0.3, -1.0, 2.0, 0.5])
        loss = pearson_loss(Tensor(-t), t)
        assert float(loss.data) == pytest.approx(2.0, abs=1e-12)

    def test_hand_derived_half(self):
        # cov([1,2,3],[1,3,2]) formula gives r = 0.5 exactly
        loss = pearson_loss(Tensor(np.array([1.0, 2.0, 3.0])), np.array([1.0, 3.0, 2.0]))
        assert float(loss.data) == pytest.approx(0.5, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=50)
        x = Tensor(rng.normal(size=50), requires_grad=True)
        assert grad_check(lambda p: pearson_loss(p, target), x) < 1e-5

    def test_target_affine_invariance(self):
        rng = np.random.default_rng(1)
        pred = Tensor(rng.normal(size=40))
        target = rng.normal(size=40)
        a = float(pearson_loss(pred, target).data)
        b = float(pearson_loss(pred, 2.5 * target + 7.0).data)
        assert abs(a - b) < 1e-10

    def test_degenerate_prediction_saturates_with_zero_grad(self):
        target = np.array([1.0, 2.0, 3.0, 4.0])
        x = Tensor(np.full(4, 0.7), requires_grad=True)
        with pytest.warns(UserWarning, match="degenerate"):
            with Tape():
                loss = pearson_loss(x, target)
                backward(loss)
        assert float(loss.data) == 1.0
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_degenerate_target_rejected(self):
        with pytest.raises(DataError, match="target"):
            pearson_loss(Tensor(np.array([1.0, 2.0, 3.0])), np.full(3, 2.0))

    def test_too_short_rejected(self):
        with pytest.raises(DataError, match="at least 3"):
            pearson_loss(Tensor(np.array([1.0, 2.0])), np.array([1.0, 2.0]))


class TestAdam:
    def test_hand_worked_first_step(self):
        theta = {"w": Tensor(np.zeros(1), requires_grad=True)}
        state = OptimizerState.for_params(theta)
        adam_step(theta, {"w": np.ones(1)}, state, lr=1e-3)
        # m=0.1, v=0.001, mhat=1, vhat=1 -> theta = -1e-3 / (1 + 1e-8)
        expected = -1e-3 / (1.0 + 1e-8)
        assert state.t == 1
        assert theta["w"].data[0] == pytest.approx(expected, rel=1e-12)

    def test_zero_gradient_keeps_params(self):
        theta = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        before = theta["w"].data.copy()
        state = OptimizerState.for_params(theta)
        adam_step(theta, {"w": np.zeros(2)}, state, lr=1e-3)
        np.testing.assert_array_equal(theta["w"].data, before)
        assert state.t == 1

    def test_lr_zero_is_bitwise_noop(self):
        rng = np.random.default_rng(2)
        theta = {"w": Tensor(rng.normal(size=5), requires_grad=True)}
        before = theta["w"].data.copy()
        state = OptimizerState.for_params(theta)
        adam_step(theta, {"w": rng.normal(size=5)}, state, lr=0.0)
        np.testing.assert_array_equal(theta["w"].data, before)

    def test_nonfinite_gradient_names_param(self):
        theta = {"bad.W": Tensor(np.zeros(2), requires_grad=True)}
        state = OptimizerState.for_params(theta)
        with pytest.raises(NumericError, match="bad.W"):
            adam_step(theta, {"bad.W": np.array([1.0, np.nan])}, state, lr=1e-3)

    def test_deterministic_sequence(self):
        def run():
            rng = np.random.default_rng(5)
            theta = {"w": Tensor(np.ones(4), requires_grad=True)}
            state = OptimizerState.for_params(theta)
            for _ in range(10):
                adam_step(theta, {"w": rng.normal(size=4)}, state, lr=1e-2)
            return theta["w"].data

        np.testing.assert_array_equal(run(), run())


class TestPlateau:
    def test_monotone_improvement_keeps_lr(self):
        st = PlateauState(lr=1e-4)
        for v in (1.0, 0.9, 0.8):
            st = plateau_step(st, v)
        assert st.lr == 1e-4

    def test_decay_fires_after_patience_exhausted(self):
        st = PlateauState(lr=1e-4, patience=2)
        lrs = []
        for v in (1.0, 1.0, 1.0, 1.0):
            st = plateau_step(st, v)
            lrs.append(st.lr)
        assert lrs == [1e-4, 1e-4, 1e-4, 5e-5]

    def test_improvement_resets_counter(self):
        st = PlateauState(lr=1e-4, patience=2)
        for v in (1.0, 1.0, 1.0, 0.5, 0.5, 0.5):  # improvement at the 4th epoch
            st = plateau_step(st, v)
        assert st.lr == 1e-4  # only two bad epochs since the reset
        st = plateau_step(st, 0.5)
        assert st.lr == 5e-5


class TestEarlyStop:
    def test_strictly_decreasing_never_stops(self):
        st = EarlyStopState(patience=5)
        for v in np.linspace(1.0, 0.1, 10):
            st = early_stop_update(st, float(v))
            assert not st.stop

    def test_stop_after_five_returns_best_epoch(self):
        st = EarlyStopState(patience=5)
        stops = []
        for v in (1.0, 0.9, 0.95, 0.91, 0.9, 0.93, 0.9):
            st = early_stop_update(st, v)
            stops.append(st.stop)
        assert stops == [False, False, False, False, False, False, True]
        assert st.best_epoch == 2

    def test_single_epoch_continues(self):
        st = early_stop_update(EarlyStopState(patience=5), 1.0)
        assert not st.stop


class TestTrainModel:
    def test_validation_loss_improves_on_learnable_data(self, tmp_path):
        scans = make_linear_scans(n_subjects=10, seed=21, noise=0.05)
        model = Model.init(TINY_CFG, seed=1, dtype=np.float64)
        ckpt, history = train_model(model, scans[:8], scans[8:], FAST_TRAIN)
        assert history[0]["val_loss"] - min(h["val_loss"] for h in history) >= 0.2
        assert ckpt.provenance["best_epoch"] >= 1
        write_epoch_log(tmp_path / "log.csv", history)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert len(lines) == len(history) + 1

    def test_zero_epochs_returns_initial_model(self, linear_scans):
        model = Model.init(TINY_CFG, seed=2, dtype=np.float64)
        init = model.clone_params()
        cfg = TrainConfig(task="RV", max_epochs=0, dtype="float64")
        ckpt, history = train_model(model, linear_scans[:6], linear_scans[6:], cfg)
        assert history == []
        assert ckpt.provenance["epochs_run"] == 0
        for k, arr in init.items():
            np.testing.assert_allclose(ckpt.params[k], arr.astype(np.float32), rtol=0, atol=0)

    def test_deterministic_checkpoint_hash(self, linear_scans):
        def run():
            model = Model.init(TINY_CFG, seed=4, dtype=np.float64)
            cfg = TrainConfig(task="HR", batch_size=4, max_epochs=4, seed=9, dtype="float64")
            ckpt, _ = train_model(model, linear_scans[:6], linear_scans[6:], cfg)
            return ckpt.params_hash()

        assert run() == run()

    def test_lr_sequence_non_increasing(self, linear_scans):
        model = Model.init(TINY_CFG, seed=5, dtype=np.float64)
        cfg = TrainConfig(task="RV", batch_size=4, max_epochs=12, seed=1, dtype="float64")
        _, history = train_model(model, linear_scans[:6], linear_scans[6:], cfg)
        lrs = [h["lr"] for h in history]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_mixed_prep_hashes_rejected(self, linear_scans):
        odd = make_linear_scans(n_subjects=2, seed=0, prep_hash="other")
        model = Model.init(TINY_CFG, seed=0, dtype=np.float64)
        with pytest.raises(DataError, match="mixed preprocessing"):
            train_model(model, linear_scans[:4] + odd, linear_scans[4:], FAST_TRAIN)


class TestCheckpoint:
    def test_save_load_bitwise_roundtrip(self, tmp_path, linear_scans):
        model = Model.init(TINY_CFG, seed=7, dtype=np.float64)
        cfg = TrainConfig(task="RV", batch_size=4, max_epochs=2, dtype="float64")
        ckpt, _ = train_model(model, linear_scans[:6], linear_scans[6:], cfg)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ckpt.save(p1)
        loaded = Checkpoint.load(p1)
        loaded.save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.params_hash() == ckpt.params_hash()
        for k in ckpt.params:
            np.testing.assert_array_equal(loaded.params[k], ckpt.params[k])

    def test_rejects_non_checkpoint_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(DataError, match="not a checkpoint"):
            Checkpoint.load(path)

    def test_build_model_restores_forward(self, tmp_path, linear_scans):
        model = Model.init(TINY_CFG, seed=8, dtype=np.float64)
        cfg = TrainConfig(task="RV", batch_size=4, max_epochs=2, dtype="float64")
        ckpt, _ = train_model(model, linear_scans[:6], linear_scans[6:], cfg)
        ckpt.save(tmp_path / "m.ckpt")
        restored = Checkpoint.load(tmp_path / "m.ckpt").build_model(np.float64)
        roi = linear_scans[0].roi
        a = model.forward(roi).data
        b = restored.forward(roi).data
        np.testing.assert_allclose(a, b, atol=1e-6)  # float32 storage rounding


class CountingScan:
    """Duck-typed Scan that counts ROI accesses (for zero-shot verification)."""

    def __init__(self, scan):
        self._scan = scan
        self.roi_reads = 0

    @property
    def roi(self):
        self.roi_reads += 1
        return self._scan.roi

    def __getattr__(self, name):
        return getattr(self._scan, name)


STRAT_TRAIN = TrainConfig(task="RV", batch_size=4, lr_init=3e-3, max_epochs=3, seed=5, dtype="float64")


class TestStrategies:
    def make_datasets(self):
        return {
            "young": make_linear_scans(n_subjects=6, seed=31, noise=0.05),
            "aging": make_linear_scans(n_subjects=6, seed=32, noise=0.05),
        }

    def test_spec_validation(self):
        with pytest.raises(DataError, match="requires a source"):
            StrategySpec(kind="finetune", target_dataset="aging")
        with pytest.raises(DataError, match="kind"):
            StrategySpec(kind="nonsense", target_dataset="aging")

    def test_finetune_starts_from_pretrain_weights_at_finetune_lr(self):
        datasets = self.make_datasets()
        spec = StrategySpec(kind="finetune", target_dataset="aging", source_dataset="young")
        res = run_strategy(spec, datasets, TINY_CFG, STRAT_TRAIN, k=2, dtype=np.float64)
        assert res.pretrain_checkpoint is not None
        pre_hash = res.pretrain_checkpoint.params_hash()
        for ckpt in res.checkpoints:
            assert ckpt.provenance["init_params_hash"] == pre_hash
            assert ckpt.provenance["initial_lr"] == STRAT_TRAIN.lr_finetune
        assert len(res.checkpoints) == 2

    def test_pretrain_only_never_reads_target_scans_in_training(self):
        datasets = self.make_datasets()
        counted = [CountingScan(s) for s in datasets["aging"]]
        datasets["aging"] = counted
        spec = StrategySpec(kind="pretrain_only", target_dataset="aging", source_dataset="young")
        res = run_strategy(spec, datasets, TINY_CFG, STRAT_TRAIN, k=2, dtype=np.float64)
        # each target scan is forwarded exactly once: as a test scan of its own fold
        assert all(c.roi_reads == 1 for c in counted)
        assert res.checkpoints == []
        assert len(res.report.results) == len(counted)

    def test_scratch_and_joint_share_folds_and_differ_by_source(self):
        datasets = self.make_datasets()
        scratch = run_strategy(
            StrategySpec(kind="scratch", target_dataset="aging"),
            datasets, TINY_CFG, STRAT_TRAIN, k=2, dtype=np.float64,
        )
        joint = run_strategy(
            StrategySpec(kind="joint_scratch", target_dataset="aging", source_dataset="young"),
            datasets, TINY_CFG, STRAT_TRAIN, k=2, dtype=np.float64,
        )
        # identical fold membership on the target side
        s_ids = [sorted(r.scan_id for r in scratch.report.results if r.fold == f) for f in range(2)]
        j_ids = [sorted(r.scan_id for r in joint.report.results if r.fold == f) for f in range(2)]
        assert s_ids == j_ids
        # the source scans change what is learned
        assert scratch.checkpoints[0].params_hash() != joint.checkpoints[0].params_hash()

    def test_seq2seq_strategy_runs(self):
        datasets = self.make_datasets()
        res = run_strategy(
            StrategySpec(kind="scratch", target_dataset="aging"),
            datasets, TINY_S2S, STRAT_TRAIN, k=2, dtype=np.float64,
        )
        assert len(res.report.results) == len(datasets["aging"])
