import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlae import numerics as nx
from mlae.errors import ParameterError
from mlae.masking import (FIXED_PRESETS, STOCHASTIC_PRESETS, MaskSchedule, fixed_pattern, sample_mask,
                          stochastic_schedule)

PATTERNS = ["incremental", "decremental", "hourglass", "protruding", "random", "uniform"]


class TestFixedPattern:
    def test_incremental(self):
        assert fixed_pattern("incremental") == [2, 2, 2, 6, 6, 6, 10, 10, 10, 14, 14, 14]

    def test_decremental(self):
        assert fixed_pattern("decremental") == [14, 14, 14, 10, 10, 10, 6, 6, 6, 2, 2, 2]

    def test_hourglass(self):
        assert fixed_pattern("hourglass") == [14, 14, 14, 2, 2, 2, 2, 2, 2, 14, 14, 14]

    @pytest.mark.parametrize("name", PATTERNS)
    def test_budget_96(self, name):
        counts = fixed_pattern(name, seed=5)
        assert len(counts) == 12 and sum(counts) == 96

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**40))
    def test_random_pattern(self, seed):
        counts = fixed_pattern("random", seed=seed)
        assert all(1 <= c <= 14 for c in counts)
        assert np.mean(counts) == 8
        assert counts == fixed_pattern("random", seed=seed)

    def test_random_differs_across_seeds(self):
        assert fixed_pattern("random", seed=0) != fixed_pattern("random", seed=1)

    def test_uniform_general(self):
        assert fixed_pattern("uniform", L=2, budget=16) == [8, 8]

    def test_unknown(self):
        with pytest.raises(ParameterError):
            fixed_pattern("sawtooth")

    def test_preset_needs_twelve_layers(self):
        with pytest.raises(ParameterError):
            fixed_pattern("incremental", L=6, budget=48)

    def test_random_infeasible(self):
        with pytest.raises(ParameterError):
            fixed_pattern("random", L=12, budget=200)


class TestStochasticSchedule:
    def test_incremental(self):
        assert stochastic_schedule("incremental") == [0.8, 0.8, 0.7, 0.7, 0.6, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0]

    def test_hourglass(self):
        assert stochastic_schedule("hourglass") == [0.0, 0.1, 0.3, 0.5, 0.6, 0.8, 0.8, 0.6, 0.5, 0.3, 0.1, 0.0]

    def test_uniform(self):
        assert stochastic_schedule("uniform", p=0.5) == [0.5] * 12

    def test_unknown(self):
        with pytest.raises(ParameterError):
            stochastic_schedule("wavy")

    @pytest.mark.parametrize("name", sorted(STOCHASTIC_PRESETS))
    def test_presets_in_range(self, name):
        assert all(0.0 <= p < 1.0 for p in stochastic_schedule(name))

    def test_expected_survivors(self):
        sched = MaskSchedule.stochastic("incremental", r=8)
        assert sched.expected_active(0) == pytest.approx(1.6)
        assert sched.expected_active(11) == 8.0


class TestSchedule:
    @pytest.mark.parametrize("strategy", ["fixed", "stochastic", "mixed"])
    @pytest.mark.parametrize("pattern", ["incremental", "decremental", "hourglass", "protruding"])
    def test_budget_parity(self, strategy, pattern):
        if strategy == "fixed":
            sched = MaskSchedule.fixed(pattern)
        elif strategy == "mixed":
            sched = MaskSchedule.mixed(pattern, p=0.5)
        else:
            sched = MaskSchedule.stochastic(pattern, r=8)
        assert sched.budget == 96

    def test_mixed_probabilities_uniform(self):
        assert set(MaskSchedule.mixed("hourglass", p=0.3).probs) == {0.3}
        with pytest.raises(ParameterError):
            MaskSchedule("mixed", "uniform", (8, 8), (0.1, 0.2))

    def test_stochastic_counts_constant(self):
        with pytest.raises(ParameterError):
            MaskSchedule("stochastic", "uniform", (8, 4), (0.5, 0.5))

    def test_dict_round_trip(self):
        for sched in (MaskSchedule.fixed("random", seed=3), MaskSchedule.mixed("protruding", p=0.7),
                      MaskSchedule.stochastic("decremental")):
            again = MaskSchedule.from_dict(sched.to_dict(), 12, 8, 0.5)
            assert again == sched

    def test_from_dict_defaults(self):
        sched = MaskSchedule.from_dict({"strategy": "mixed", "pattern": "incremental"}, 12, 8, 0.3)
        assert sched.counts == tuple(FIXED_PRESETS["incremental"]) and set(sched.probs) == {0.3}


class TestSampleMask:
    def test_p_zero(self):
        sched = MaskSchedule.stochastic("uniform", L=2, r=8, p=0.0)
        m = sample_mask(sched, 0, nx.stream(0, "m"))
        assert m.bits == (1,) * 8 and m.scale == 1.0

    def test_keep_frequency(self):
        sched = MaskSchedule.stochastic("uniform", L=1, r=8, p=0.5)
        rng = nx.stream(0, "freq")
        bits = np.array([sample_mask(sched, 0, rng).bits for _ in range(20000)])
        freq = bits.mean(axis=0)
        assert np.all((freq >= 0.49) & (freq <= 0.51))
        assert sample_mask(sched, 0, rng).scale == 2.0

    def test_fixed_incremental_layer0(self):
        sched = MaskSchedule.fixed("incremental")
        assert sched.slots == 14
        rng = nx.stream(0, "fixed")
        for _ in range(20):
            m = sample_mask(sched, 0, rng)
            assert m.bits == (1, 1) + (0,) * 12 and m.scale == 1.0

    def test_fixed_permanence(self):
        sched = MaskSchedule.mixed("hourglass", p=0.5)
        rng = nx.stream(1, "perm")
        for layer in range(12):
            dead = range(sched.counts[layer], sched.slots)
            for _ in range(30):
                bits = sample_mask(sched, layer, rng).bits
                assert all(bits[i] == 0 for i in dead)
            inf = sample_mask(sched, layer, mode="inference").bits
            assert all(inf[i] == 0 for i in dead)

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_inference_completeness(self, p):
        sched = MaskSchedule.stochastic("uniform", L=3, r=8, p=p)
        m = sample_mask(sched, 2, mode="inference")
        assert m.bits == (1,) * 8 and m.scale == 1.0

    def test_same_seed_same_sequence(self):
        sched = MaskSchedule.stochastic("hourglass")

        def draw(seed):
            rng = nx.stream(seed, "seq")
            return [sample_mask(sched, l, rng).bits for _ in range(10) for l in range(12)]
        assert draw(4) == draw(4)
        assert draw(4) != draw(5)

    def test_p_one_rejected(self):
        with pytest.raises(ParameterError):
            MaskSchedule.stochastic("uniform", L=1, r=4, p=1.0)
        with pytest.raises(ParameterError):
            MaskSchedule("mixed", "uniform", (4,), (1.0,))

    def test_layer_out_of_range(self):
        with pytest.raises(ParameterError):
            sample_mask(MaskSchedule.stochastic("uniform", L=1, r=4), 3, nx.stream(0))

    def test_needs_rng(self):
        with pytest.raises(ParameterError):
            sample_mask(MaskSchedule.stochastic("uniform", L=1), 0)
