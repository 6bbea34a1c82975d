import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mlae import checkpoint as ckpt
from mlae.config import DEFAULTS, RunConfig
from mlae.errors import CorruptCheckpointError, FormatError

finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


class TestCheckpoint:
    @settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.lists(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite32),
                    min_size=1, max_size=5))
    def test_round_trip_bit_exact(self, tmp_path, arrs):
        tensors = {f"t{i}": a for i, a in enumerate(arrs)}
        tensors["labels"] = np.arange(7, dtype=np.int64)
        ckpt.save(tmp_path / "c", tensors, {"note": "x"})
        loaded, manifest = ckpt.load(tmp_path / "c")
        for name, arr in tensors.items():
            assert loaded[name].tobytes() == np.asarray(arr, dtype=loaded[name].dtype).tobytes()
        assert all(e["offset"] % 64 == 0 for e in manifest["tensors"])
        assert manifest["meta"] == {"note": "x"}

    def test_float64_is_stored_as_float32(self, tmp_path):
        value = np.array([[1 / 3, 2.0]])
        ckpt.save(tmp_path, {"w": value})
        loaded, _ = ckpt.load(tmp_path)
        assert loaded["w"].dtype == np.dtype("<f4")
        assert np.array_equal(loaded["w"], value.astype(np.float32))

    @settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(0, 10**9), st.integers(0, 7))
    def test_single_bit_corruption(self, tmp_path, where, bit):
        ckpt.save(tmp_path, {"w": np.arange(40, dtype=np.float32).reshape(5, 8), "v": np.ones((3, 3))})
        blob = bytearray((tmp_path / ckpt.BLOB).read_bytes())
        blob[where % len(blob)] ^= 1 << bit
        (tmp_path / ckpt.BLOB).write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError):
            ckpt.load(tmp_path)

    def test_format_errors(self, tmp_path):
        with pytest.raises(FormatError):
            ckpt.load(tmp_path / "nothing")
        ckpt.save(tmp_path, {"w": np.ones((2, 2))})
        manifest = json.loads((tmp_path / ckpt.MANIFEST).read_text())
        manifest["format_version"] = 99
        (tmp_path / ckpt.MANIFEST).write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            ckpt.load(tmp_path)
        (tmp_path / ckpt.MANIFEST).write_text("{not json")
        with pytest.raises(FormatError):
            ckpt.load(tmp_path)

    def test_tensor_bytes(self, tmp_path):
        m = ckpt.save(tmp_path, {"a": np.ones((3, 3)), "b": np.ones((1, 20))})
        assert ckpt.tensor_bytes(m, ["a"], padded=False) == 36
        assert ckpt.tensor_bytes(m, ["a"]) == 64
        assert ckpt.tensor_bytes(m) == m["blob_bytes"] == 64 + 128


valid_overrides = st.fixed_dictionaries({}, optional={
    "backbone": st.fixed_dictionaries({}, optional={"L": st.integers(1, 12), "seed": st.integers(0, 99)}),
    "adapter": st.fixed_dictionaries({}, optional={
        "r": st.sampled_from([2, 4, 8]), "coeff_init": st.sampled_from([0.125, 0.25, 0.5, 1.0, 2.0, 4.0]),
        "flags": st.fixed_dictionaries({}, optional={"masking": st.booleans(), "adaptive": st.booleans()})}),
    "train": st.fixed_dictionaries({}, optional={
        "p": st.sampled_from([0.0, 0.1, 0.3, 0.5, 0.7, 0.9]), "epochs": st.integers(0, 500),
        "lr": st.floats(1e-6, 1e-1), "seeds": st.fixed_dictionaries({"init": st.integers(0, 9)})}),
    "output_dir": st.text("abcxyz/_-", min_size=1, max_size=12),
})


class TestRunConfig:
    @settings(max_examples=60, deadline=None)
    @given(valid_overrides)
    def test_round_trip(self, over):
        cfg = RunConfig.from_dict(over)
        assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg

    def test_defaults_are_headline_recipe(self):
        cfg = RunConfig()
        assert cfg.data == DEFAULTS
        t = cfg.train
        assert (t.batch_size, t.lr, t.weight_decay, t.r, t.coeff_init) == (64, 5e-4, 1e-4, 8, 1.0)
        assert cfg.schedule.strategy == "stochastic" and cfg.schedule.pattern == "uniform"
        assert cfg.schedule.budget == 96

    def test_unknown_key(self):
        with pytest.raises(FormatError, match="train.momentum"):
            RunConfig.from_dict({"train": {"momentum": 0.9}})
        with pytest.raises(FormatError):
            RunConfig.from_dict({"extra": 1})

    def test_field_level_message(self):
        with pytest.raises(FormatError, match="train"):
            RunConfig.from_dict({"train": {"p": 1.5}})
        with pytest.raises(FormatError, match="backbone"):
            RunConfig.from_dict({"backbone": {"d": 10, "heads": 4}})

    def test_dotted_set(self):
        cfg = RunConfig()
        cfg.set("train.lr", 0.01)
        cfg.set("masking.counts", [8] * 12)
        assert cfg.train.lr == 0.01
        with pytest.raises(FormatError):
            cfg.set("train.nope", 1)

    def test_masking_section(self):
        cfg = RunConfig.from_dict({"masking": {"strategy": "fixed", "pattern": "hourglass"}})
        assert cfg.schedule.counts == (14, 14, 14, 2, 2, 2, 2, 2, 2, 14, 14, 14)

    def test_load_errors(self, tmp_path):
        with pytest.raises(FormatError):
            RunConfig.load(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(FormatError):
            RunConfig.load(tmp_path / "bad.json")
