import csv
import dataclasses
import math

import numpy as np
import pytest

from mlae import experts as ex
from mlae import numerics as nx
from mlae import trainer as tr
from mlae.backbone import BackboneConfig, build_backbone, merge_model
from mlae.errors import FormatError, ParameterError
from mlae.experts import TrainFlags
from mlae.masking import MaskSchedule, sample_mask
from mlae.numerics import Parameter
from mlae.trainer import (AdamW, Seeds, TrainConfig, TrainingDiverged, build_model, cosine_lr, evaluate,
                          make_synthetic_task, read_dataset_csv, sweep, train, write_dataset_csv,
                          write_metrics_csv, write_sweep_csv)

from conftest import TINY

FAST = TrainConfig(epochs=2, batch_size=8, lr=3e-3, r=4)


class TestSyntheticTask:
    def test_same_seed(self):
        a, b = make_synthetic_task(seed=4), make_synthetic_task(seed=4)
        for name in ("train", "val", "test"):
            assert np.array_equal(a.split(name)[0], b.split(name)[0])
            assert np.array_equal(a.split(name)[1], b.split(name)[1])

    def test_balanced_labels(self):
        task = make_synthetic_task(n_classes=10, n_train=256)
        counts = np.bincount(task.split("train")[1], minlength=10)
        assert counts.max() - counts.min() <= 1 and abs(counts - 25.6).max() <= 1

    def test_splits_disjoint(self):
        task = make_synthetic_task(n_train=64, n_val=32, n_test=32)
        rows = {s: {x.tobytes() for x in task.split(s)[0]} for s in ("train", "val", "test")}
        assert not rows["train"] & rows["val"] and not rows["train"] & rows["test"] and not rows["val"] & rows["test"]

    @pytest.mark.parametrize("kw", [{"n_train": 5}, {"n_classes": 1}, {"difficulty": -1.0}, {"n_test": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            make_synthetic_task(**kw)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_noiseless_task_is_linearly_separable(self, seed):
        task = make_synthetic_task(difficulty=0.0, seed=seed, n_train=128, n_val=0, n_test=0)
        model = build_backbone(BackboneConfig(L=2))
        train(model, task, TrainConfig(epochs=100, lr=5e-2, weight_decay=0.0))
        assert evaluate(model, *task.split("train")) == 1.0

    def test_csv_round_trip(self, tmp_path, tiny_task):
        x, y = tiny_task.split("test")
        write_dataset_csv(tmp_path / "d.csv", x, y)
        x2, y2 = read_dataset_csv(tmp_path / "d.csv", TINY.patch_tokens, TINY.token_dim)
        assert np.array_equal(x, x2) and np.array_equal(y, y2)
        with open(tmp_path / "d.csv") as fh:
            assert fh.readline().startswith("label,t0_0,t0_1,")

    def test_csv_errors(self, tmp_path):
        with pytest.raises(FormatError):
            read_dataset_csv(tmp_path / "missing.csv", 4, 8)
        (tmp_path / "bad.csv").write_text("y,t0_0\n1,2\n")
        with pytest.raises(FormatError):
            read_dataset_csv(tmp_path / "bad.csv", 1, 1)
        (tmp_path / "bad2.csv").write_text("label,t0_0\n1,abc\n")
        with pytest.raises(FormatError):
            read_dataset_csv(tmp_path / "bad2.csv", 1, 1)


class TestOptimiser:
    def test_cosine_midpoint(self):
        assert cosine_lr(50, 100, 5e-4) == pytest.approx(5e-4 * (1 + math.cos(math.pi / 2)) / 2, abs=1e-18)
        assert cosine_lr(0, 100, 5e-4) == 5e-4
        assert cosine_lr(100, 100, 5e-4) == 0.0

    def test_adamw_against_hand_recurrence(self):
        # f(w) = (w - 3)^2, gradient 2 (w - 3)
        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        w = Parameter(np.array([[1.0]]))
        opt = AdamW(b1, b2, eps, wd)
        ref, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            g = 2 * (ref - 3)
            opt.step([(w, np.array([[2 * (w.item() - 3)]]))], lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert abs(w.item() - ref) < 1e-12

    def test_first_step_hand_value(self):
        w = Parameter(np.array([[1.0]]))
        AdamW(weight_decay=0.0).step([(w, np.array([[-4.0]]))], 0.1)
        # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        assert abs(w.item() - (1.0 + 0.1 * 4.0 / (4.0 + 1e-8))) < 1e-12

    def test_pure_decay_step(self):
        value = np.array([[0.3, -1.7], [2.5, 4.0]])
        w = Parameter(value)
        AdamW(weight_decay=1e-4).step([(w, np.zeros((2, 2)))], 5e-4)
        assert np.array_equal(w.data, value * (1 - 5e-4 * 1e-4))

    def test_no_decay_set(self):
        w = Parameter(np.ones((1, 2)))
        AdamW(weight_decay=0.5, no_decay=[w]).step([(w, np.zeros((1, 2)))], 0.1)
        assert np.array_equal(w.data, np.ones((1, 2)))


class TestTrain:
    def test_zero_epochs(self, tiny_task):
        cfg = dataclasses.replace(FAST, epochs=0)
        model, sched = build_model(TINY, cfg)
        before = model.state()
        result = train(model, tiny_task, cfg, sched)
        assert result.history == []
        after = model.state()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_reproducible(self, tiny_task, tmp_path):
        runs = []
        for i in range(2):
            model, sched = build_model(TINY, FAST)
            result = train(model, tiny_task, FAST, sched)
            write_metrics_csv(tmp_path / f"m{i}.csv", result.history)
            runs.append(model.state())
        assert (tmp_path / "m0.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])

    def test_seeds_matter(self, tiny_task):
        states = []
        for s in (0, 1):
            cfg = dataclasses.replace(FAST, seeds=Seeds(0, 0, s))
            model, sched = build_model(TINY, cfg)
            train(model, tiny_task, cfg, sched)
            states.append(model.head_w.data)
        assert not np.array_equal(*states)

    def test_metrics_columns(self, trained_tiny, tmp_path):
        write_metrics_csv(tmp_path / "m.csv", trained_tiny.history)
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["epoch", "step", "train_loss", "val_acc", "lr"]
        assert len(rows) == 1 + 4

    def test_frozen_weights_untouched(self, tiny_task):
        model, sched = build_model(TINY, FAST)
        digest = model.frozen_digest()
        train(model, tiny_task, FAST, sched)
        assert model.frozen_digest() == digest
        assert any(e.b.data.any() for bank in model.banks() for e in bank.experts)

    def test_loss_decreases(self, trained_tiny):
        losses = [h["train_loss"] for h in trained_tiny.history]
        assert losses[-1] < losses[0]

    def test_fixed_strategy_never_touches_dead_slots(self, tiny_task):
        sched = MaskSchedule("mixed", "uniform", (2, 3), (0.5, 0.5), slots=4)
        cfg = dataclasses.replace(FAST, schedule=sched)
        model, sched = build_model(TINY, cfg)
        before = [[e.a.data for e in bank.experts] for bank in model.banks()]
        train(model, tiny_task, cfg, sched)
        for l, bank in enumerate(model.banks()):
            for i, e in enumerate(bank.experts):
                if i >= sched.counts[l]:
                    assert not e.b.data.any() and np.array_equal(e.a.data, before[l][i])

    def test_divergence_restores_last_good_state(self, tiny_task):
        cfg = dataclasses.replace(FAST, lr=1e250, epochs=3)
        model, sched = build_model(TINY, cfg)
        with pytest.raises(TrainingDiverged) as info:
            with np.errstate(all="ignore"):
                train(model, tiny_task, cfg, sched)
        assert info.value.step >= 0
        assert all(np.isfinite(p.data).all() for p in model.trainable_parameters())
        assert isinstance(info.value.history, list)

    def test_every_expert_active_within_100_steps(self):
        sched = MaskSchedule.stochastic("uniform", L=2, r=8, p=0.9)
        for start in (0, 100, 200):
            seen = np.zeros(8, dtype=bool)
            for step in range(start, start + 100):
                seen |= np.array(sample_mask(sched, 0, nx.stream(0, "mask", step)).bits, dtype=bool)
            assert seen.all()

    def test_sparse_and_dense_updates_agree_without_masking(self, tiny_task):
        states = []
        for sparse in (True, False):
            cfg = dataclasses.replace(FAST, p=0.0, sparse_updates=sparse)
            model, sched = build_model(TINY, cfg)
            train(model, tiny_task, cfg, sched)
            states.append(model.state())
        assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])

    def test_degenerate_mode_matches_plain_lora(self, tiny_task, monkeypatch):
        """All switches off reproduces a hand-written x W0 + (x B) A adapter step for step."""
        cfg = dataclasses.replace(FAST, flags=TrainFlags(False, False, False), epochs=3)
        model, sched = build_model(TINY, cfg)
        assert all(len(b) == 1 and not isinstance(b.experts[0].lam, Parameter) for b in model.banks())
        train(model, tiny_task, cfg, sched)
        mlae_state = model.state()

        def plain_lora(x, w0, bank, mask):
            e = bank.experts[0]
            return nx.add(nx.matmul(x, w0), nx.matmul(nx.matmul(x, e.b), e.a))

        monkeypatch.setattr(ex, "forward", plain_lora)
        ref, sched = build_model(TINY, cfg)
        train(ref, tiny_task, cfg, sched)
        ref_state = ref.state()
        for k in mlae_state:
            np.testing.assert_allclose(mlae_state[k], ref_state[k], rtol=0, atol=1e-10)


class TestEvaluate:
    def test_constant_prediction(self):
        task = make_synthetic_task(n_classes=10, n_train=10, n_test=100)
        model = build_backbone(BackboneConfig(L=2))
        bias = np.zeros((1, 10))
        bias[0, 3] = 5.0
        model.head_b.assign(bias)
        assert evaluate(model, *task.split("test")) == pytest.approx(0.1)

    def test_ties_go_to_lowest_index(self):
        task = make_synthetic_task(n_classes=10, n_train=10, n_test=100)
        model = build_backbone(BackboneConfig(L=2))
        x, y = task.split("test")
        assert evaluate(model, x, y) == float(np.mean(y == 0))

    def test_deterministic_and_merge_invariant(self, trained_tiny, tiny_task):
        x, y = tiny_task.split("test")
        acc = evaluate(trained_tiny.model, x, y, trained_tiny.schedule)
        assert acc == evaluate(trained_tiny.model, x, y, trained_tiny.schedule)
        assert acc == evaluate(merge_model(trained_tiny.model, trained_tiny.schedule), x, y)

    def test_empty_split(self, trained_tiny):
        with pytest.raises(ParameterError):
            evaluate(trained_tiny.model, np.zeros((0, 4, 8)), np.zeros(0, dtype=int))


class TestConfig:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.weight_decay) == (64, 5e-4, 1e-4)
        assert (cfg.r, cfg.coeff_init, cfg.p) == (8, 1.0, 0.5)
        assert tr.P_GRID == (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
        assert tr.COEFF_GRID == (0.125, 0.25, 0.5, 1.0, 2.0, 4.0)

    @pytest.mark.parametrize("kw", [{"p": 1.0}, {"lr": -1.0}, {"batch_size": 0}, {"coeff_init": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            TrainConfig(**kw)

    def test_rank_not_divisible(self):
        with pytest.raises(ParameterError):
            TrainConfig(r=8, sub_rank=3).resolve_schedule(2)

    def test_masking_off_means_p_zero(self):
        sched = TrainConfig(flags=TrainFlags(masking=False)).resolve_schedule(12)
        assert set(sched.probs) == {0.0} and sched.budget == 96


class TestSweep:
    @pytest.mark.parametrize("axis,values", [("p", list(tr.P_GRID)), ("coeff_init", list(tr.COEFF_GRID)),
                                             ("budget", [2, 4, 8])])
    def test_table_shape(self, axis, values, tiny_task, monkeypatch, tmp_path):
        seen = []

        def fake_run(backbone, task, config):
            seen.append(config)
            return None, 0.5
        monkeypatch.setattr(tr, "run_experiment", fake_run)
        table = sweep(TINY, tiny_task, FAST, axis, values, seeds=(0, 1))
        assert [row[axis] for row in table] == values and len(seen) == 2 * len(values)
        write_sweep_csv(tmp_path / "t.csv", axis, table)
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == [axis, "mean_acc", "n_seeds"] and len(rows) == len(values) + 1

    def test_axis_values_reach_config(self):
        assert tr.sweep_config(FAST, "p", 0.3, 2).p == 0.3
        assert tr.sweep_config(FAST, "coeff_init", 4, 2).coeff_init == 4.0
        assert tr.sweep_config(FAST, "budget", 2, 2).r == 2
        assert tr.sweep_config(FAST, "sub_rank", 2, 2).sub_rank == 2
        sched = tr.sweep_config(TrainConfig(), "strategy", "mixed:hourglass", 12).schedule
        assert sched.strategy == "mixed" and sched.budget == 96
        assert tr.sweep_config(TrainConfig(), "strategy", "fixed:random", 12).schedule.budget == 96

    def test_invalid_axis(self, tiny_task):
        with pytest.raises(ParameterError):
            sweep(TINY, tiny_task, FAST, "momentum", [0.9])
        with pytest.raises(ParameterError):
            tr.sweep_config(FAST, "strategy", "greedy:uniform", 2)

    def test_real_runs_and_resume(self, tiny_task, tmp_path, monkeypatch):
        cfg = dataclasses.replace(FAST, epochs=1)
        runs = tmp_path / "runs.csv"
        first = sweep(TINY, tiny_task, cfg, "p", [0.0, 0.5], seeds=(0,), runs_csv=runs)
        rows = list(csv.DictReader(open(runs)))
        assert [r["seed"] for r in rows] == ["0", "0"]

        calls = []
        real = tr.run_experiment
        monkeypatch.setattr(tr, "run_experiment", lambda *a: calls.append(a) or real(*a))
        again = sweep(TINY, tiny_task, cfg, "p", [0.0, 0.5, 0.3], seeds=(0,), runs_csv=runs)
        assert len(calls) == 1
        assert again[:2] == first
