"""Losses, the cooperative update rule, conflict telemetry, and the loop."""

import csv

import numpy as np
import pytest

from srquant import ops
from srquant.autodiff import Parameter, Tape, Tensor, backward
from srquant.data import SyntheticPatches
from srquant.errors import ConfigError, UsageError
from srquant.mismatch import collect_mismatch, select_offset_layers
from srquant.model import SRModelConfig, build_model, pretrain_teacher
from srquant.training import (
    ConflictStats,
    LossConfig,
    TrainSchedule,
    conflict_ratio_series,
    cooperative_step,
    l1_loss,
    reconstruction_loss,
    train,
    variance_loss,
    write_telemetry_csv,
)


def make_param(gr, gv, value=0.0):
    p = Parameter(np.full(np.shape(gr) or (1,), value, dtype=np.float32), name="p")
    p.grad_r[...] = np.asarray(gr, dtype=np.float32)
    p.grad_v[...] = np.asarray(gv, dtype=np.float32)
    p._populated = True
    return p


class TestVarianceLoss:
    def test_constant_taps(self):
        taps = [Tensor(np.full((1, 1, 2, 2), c, dtype=np.float32)) for c in (1.0, 2.0)]
        assert variance_loss(taps, 1.0).item() == 0.0

    def test_hand_computed_value(self):
        tap = Tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 1, 1, 4))
        assert variance_loss([tap], 2.0).item() == pytest.approx(2 * np.sqrt(1.25), abs=1e-6)

    def test_zero_weight_disables(self):
        tap = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)).astype(np.float32))
        assert variance_loss([tap], 0.0).item() == 0.0

    def test_empty_taps_warn(self):
        with pytest.warns(UserWarning):
            assert variance_loss([], 1.0).item() == 0.0

    def test_sums_over_layers(self):
        rng = np.random.default_rng(1)
        taps = [Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32)) for _ in range(3)]
        total = variance_loss(taps, 0.5).item()
        expect = 0.5 * sum(float(t.data.std()) for t in taps)
        assert total == pytest.approx(expect, abs=1e-6)


class TestReconstructionLoss:
    def test_perfect_reconstruction(self):
        x = Tensor(np.random.default_rng(2).standard_normal((1, 3, 4, 4)).astype(np.float32))
        s = Tensor(np.random.default_rng(3).standard_normal((1, 2, 2, 2)).astype(np.float32))
        assert reconstruction_loss(x, Tensor(x.data.copy()), s, Tensor(s.data.copy()), 1000.0).item() == 0.0

    def test_constant_offset_without_structure_term(self):
        rng = np.random.default_rng(4)
        hr = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
        sr = Tensor(hr.data + 0.5)
        s = Tensor(rng.standard_normal((1, 2, 2, 2)).astype(np.float32))
        assert reconstruction_loss(sr, hr, s, s, 0.0).item() == pytest.approx(0.5, abs=1e-6)

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(5)
        sr = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        hr = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        ss = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
        ts = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
        got = reconstruction_loss(Tensor(sr), Tensor(hr), Tensor(ss), Tensor(ts), 1000.0).item()

        def normalized(a):
            flat = a.reshape(a.shape[0], -1).astype(np.float64)
            return a / np.sqrt((flat**2).sum(axis=1)).reshape(-1, 1, 1, 1)

        expect = float(np.abs(sr.astype(np.float64) - hr).mean())
        expect += 1000.0 * float(((normalized(ss) - normalized(ts)) ** 2).mean())
        assert got == pytest.approx(expect, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        b = Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32))
        s = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(ConfigError):
            reconstruction_loss(a, b, s, s, 1.0)


class TestCooperativeStep:
    def test_aligned_gradients_sum(self):
        p = make_param([2.0], [1.0], value=0.0)
        cooperative_step(p, lr=0.1)
        assert p.data[0] == pytest.approx(-0.3, abs=1e-7)

    def test_conflict_drops_variance_gradient(self):
        p = make_param([2.0], [-1.0], value=0.0)
        cooperative_step(p, lr=0.1)
        assert p.data[0] == pytest.approx(-0.2, abs=1e-7)

    def test_zero_product_applies_both(self):
        p = make_param([0.0], [-1.0], value=0.0)
        cooperative_step(p, lr=0.1)
        assert p.data[0] == pytest.approx(0.1, abs=1e-7)

    @pytest.mark.parametrize(
        "gr,gv,expect_step,expect_conflict",
        [
            (-1.0, -2.0, -3.0, 0),  # same sign: sum
            (-1.0, 0.0, -1.0, 0),  # product zero: sum
            (-1.0, 2.0, -1.0, 1),  # conflict: reconstruction only
            (0.0, -2.0, -2.0, 0),
            (0.0, 0.0, 0.0, 0),
            (0.0, 2.0, 2.0, 0),
            (1.0, -2.0, 1.0, 1),
            (1.0, 0.0, 1.0, 0),
            (1.0, 2.0, 3.0, 0),
        ],
    )
    def test_nine_sign_cases(self, gr, gv, expect_step, expect_conflict):
        p = make_param([gr], [gv], value=0.0)
        n_conflict, _ = cooperative_step(p, lr=1.0)
        assert p.data[0] == pytest.approx(-expect_step, abs=1e-6)
        assert n_conflict == expect_conflict

    def test_joint_mode_always_sums(self):
        p = make_param([2.0], [-1.0], value=0.0)
        n_conflict, n_both = cooperative_step(p, lr=0.1, cooperative=False)
        assert p.data[0] == pytest.approx(-0.1, abs=1e-7)
        assert n_conflict == 1 and n_both == 1  # conflicts are counted either way

    def test_unpopulated_buffers_rejected(self):
        p = Parameter(np.zeros(3, dtype=np.float32), name="p")
        with pytest.raises(UsageError):
            cooperative_step(p, lr=0.1)

    def test_sign_alignment_and_magnitude_fuzz(self):
        """The applied step never opposes the reconstruction direction, and
        it is at least as large whenever the gradients agree."""
        rng = np.random.default_rng(6)
        n = 100_000
        gr = np.where(rng.random(n) < 0.15, 0.0, rng.standard_normal(n))
        gv = np.where(rng.random(n) < 0.15, 0.0, rng.standard_normal(n))
        p = make_param(gr, gv)
        lr = 0.01
        cooperative_step(p, lr=lr)
        applied = p.data.astype(np.float64)  # started from zero: step = data
        nonzero = gr != 0.0
        assert np.all(np.sign(applied[nonzero]) == np.sign(-gr[nonzero]))
        agree = (gr * gv > 0.0)
        assert np.all(np.abs(applied[agree]) >= lr * np.abs(gr[agree]))
        conflict = (gr * gv < 0.0)
        np.testing.assert_allclose(applied[conflict], (-lr * gr)[conflict], atol=1e-6)

    def test_conflict_counts(self):
        gr = np.array([1.0, -1.0, 0.0, 2.0], dtype=np.float32)
        gv = np.array([-1.0, -1.0, 5.0, 1.0], dtype=np.float32)
        p = make_param(gr, gv)
        n_conflict, n_both = cooperative_step(p, lr=0.1)
        assert n_conflict == 1
        assert n_both == 3


def quick_setup(seed=30, n=16, steps=60):
    config = SRModelConfig(num_blocks=1, channels=4, scale=2)
    data = SyntheticPatches(n=n, scale=2, patch_size=16, seed=seed)
    teacher, _ = pretrain_teacher(config, data, steps=steps, lr=1e-3, seed=seed)
    return config, data, teacher


class TestTrainLoop:
    def test_deterministic_telemetry(self):
        _, data, teacher = quick_setup()
        sched = TrainSchedule(epochs=2, lr0=1e-3, halve_every=1, batch_size=8)
        r1 = train(teacher, data, sched, LossConfig(), seed=1, bits=2)
        r2 = train(teacher, data, sched, LossConfig(), seed=1, bits=2)
        assert [(t.loss_r, t.loss_v, t.conflict_ratio) for t in r1.telemetry] == [
            (t.loss_r, t.loss_v, t.conflict_ratio) for t in r2.telemetry
        ]

    def test_cooperative_with_zero_variance_equals_joint_without(self):
        _, data, teacher = quick_setup(seed=31)
        sched = TrainSchedule(epochs=2, lr0=1e-3, halve_every=1, batch_size=8)
        coop = train(teacher, data, sched, LossConfig(lambda_v=0.0, cooperative=True), seed=2, bits=2)
        joint = train(teacher, data, sched,
                      LossConfig(lambda_v=0.0, cooperative=False, variance_reg=False), seed=2, bits=2)
        got = [(t.loss_r, t.conflict_ratio) for t in coop.telemetry]
        want = [(t.loss_r, t.conflict_ratio) for t in joint.telemetry]
        assert got == want
        for a, b in zip(coop.model.parameters(), joint.model.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_pams_style_baseline_runs(self):
        """Joint update, no variance term, no offsets: plain learned-range QAT."""
        _, data, teacher = quick_setup(seed=32)
        sched = TrainSchedule(epochs=1, lr0=1e-3, halve_every=1, batch_size=8)
        result = train(teacher, data, sched,
                       LossConfig(cooperative=False, variance_reg=False), plan=None, seed=3, bits=2)
        assert all(t.loss_v == 0.0 for t in result.telemetry)
        assert all(t.conflict_ratio == 0.0 for t in result.telemetry)
        assert not result.model.plan.shift_layers

    def test_offsets_follow_plan(self):
        _, data, teacher = quick_setup(seed=33)
        batch = next(data.batches(0, 8))
        plan = select_offset_layers(collect_mismatch(teacher, batch.lr), 0.4)
        sched = TrainSchedule(epochs=1, lr0=1e-3, halve_every=1, batch_size=8)
        result = train(teacher, data, sched, LossConfig(), plan=plan, seed=4, bits=2)
        for slot in result.model.slots:
            assert (slot.shift is not None) == plan.wants_shift(slot.layer_id)
            assert (slot.scale is not None) == plan.wants_scale(slot.layer_id)

    def test_first_order_descent_at_tiny_lr(self):
        _, data, teacher = quick_setup(seed=34)
        sched = TrainSchedule(epochs=1, lr0=1e-6, halve_every=1, batch_size=8)
        # One batch, one step: loss on the same batch must not increase.
        small = SyntheticPatches(n=8, scale=2, patch_size=16, seed=34)
        result = train(teacher, small, sched, LossConfig(), seed=5, bits=2)
        first = result.telemetry[0].loss_r

        batch = next(small.batches(0, 8))
        teacher_out = teacher.forward(batch.lr)
        out = result.model.forward(batch.lr)
        after = reconstruction_loss(out.sr, batch.hr, out.structural,
                                    Tensor(teacher_out.structural.data), 1000.0).item()
        assert after <= first + 1e-7

    def test_lr_schedule_halves(self):
        sched = TrainSchedule(epochs=6, lr0=1e-4, halve_every=2, batch_size=8)
        assert sched.lr_at(0) == 1e-4
        assert sched.lr_at(1) == 1e-4
        assert sched.lr_at(2) == 5e-5
        assert sched.lr_at(5) == 2.5e-5

    def test_empty_dataset_rejected(self):
        _, data, teacher = quick_setup(seed=35)

        class Empty:
            n = 0

        with pytest.raises(ConfigError):
            train(teacher, Empty(), TrainSchedule(), LossConfig(), seed=0)


class TestConflictTelemetry:
    def test_zero_variance_weight_gives_zero_ratio(self):
        _, data, teacher = quick_setup(seed=36)
        sched = TrainSchedule(epochs=1, lr0=1e-3, halve_every=1, batch_size=8)
        result = train(teacher, data, sched, LossConfig(lambda_v=0.0), seed=6, bits=2)
        assert all(t.conflict_ratio == 0.0 for t in result.telemetry)

    def test_exact_opposition_gives_ratio_one(self):
        rng = np.random.default_rng(7)
        gr = rng.standard_normal(64).astype(np.float32)
        p = make_param(gr, -gr)
        n_conflict, n_both = cooperative_step(p, lr=0.1)
        assert n_conflict == n_both == 64

    def test_series_is_step_ordered_and_exports(self, tmp_path):
        _, data, teacher = quick_setup(seed=37)
        sched = TrainSchedule(epochs=2, lr0=1e-3, halve_every=1, batch_size=8)
        result = train(teacher, data, sched, LossConfig(), seed=7, bits=2)
        series = conflict_ratio_series(result.telemetry, result.conflicts)
        assert [s.step for s in series] == list(range(len(series)))
        assert all(isinstance(s, ConflictStats) for s in series)

        path = tmp_path / "telemetry.csv"
        write_telemetry_csv(path, result.telemetry)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "loss_r", "loss_v", "conflict_ratio", "lr"]
        assert len(rows) - 1 == len(result.telemetry)
        assert [int(r[0]) for r in rows[1:]] == list(range(len(result.telemetry)))


class TestVarianceEffect:
    def test_variance_regularization_lowers_feature_spread(self):
        """Same seed, several hundred steps: the mean per-layer feature std
        ends strictly lower with the variance term than without."""
        config = SRModelConfig(num_blocks=2, channels=8, scale=4)
        data = SyntheticPatches(n=32, scale=4, patch_size=32, seed=38)
        teacher, _ = pretrain_teacher(config, data, steps=400, lr=1e-3, seed=38)
        sched = TrainSchedule(epochs=60, lr0=1e-4, halve_every=20, batch_size=8)

        def final_sigma(loss_config):
            result = train(teacher, data, sched, loss_config, seed=8, bits=2)
            batch = next(data.batches(0, 8))
            out = result.model.forward(batch.lr)
            return float(np.mean([t.data.std() for t in out.taps]))

        with_reg = final_sigma(LossConfig(lambda_v=0.1))
        without = final_sigma(LossConfig(variance_reg=False))
        assert with_reg < without
