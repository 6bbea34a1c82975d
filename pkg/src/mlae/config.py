"""Run configuration: one JSON document, strict keys, dotted-path overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .errors import FormatError, MLAEError
from .experts import TrainFlags
from .masking import MaskSchedule
from .trainer import Seeds, TrainConfig

DEFAULTS: dict = {
    "backbone": {"L": 12, "d": 64, "heads": 4, "patch_tokens": 16, "token_dim": 16, "n_classes": 10,
                 "mlp_ratio": 4, "seed": 0},
    "adapter": {"r": 8, "sub_rank": 1, "coeff_init": 1.0, "init_std": 0.02,
                "flags": {"decomposition": True, "masking": True, "adaptive": True, "freeze_lambda": False}},
    "masking": {"strategy": "stochastic", "pattern": "uniform", "probs": None, "counts": None, "seed": 0},
    "train": {"batch_size": 64, "lr": 5e-4, "weight_decay": 1e-4, "epochs": 100, "p": 0.5,
              "seeds": {"init": 0, "data": 0, "dropout": 0}, "head_weight_decay": True,
              "delta_dropout": 0.0, "sparse_updates": True},
    "task": {"n_train": 256, "n_val": 128, "n_test": 256, "difficulty": 1.0, "seed": 0, "template_rank": 2,
             "train_csv": None, "val_csv": None, "test_csv": None},
    "output_dir": "runs/default",
}

# keys whose value is a free-form list or null rather than a nested section
_LEAVES = {("masking", "probs"), ("masking", "counts")}


def _check_keys(data, ref, path=()):
    if not isinstance(data, dict):
        raise FormatError(f"{'.'.join(path) or 'config'}: expected an object")
    for key, value in data.items():
        where = path + (key,)
        if key not in ref:
            raise FormatError(f"{'.'.join(where)}: unknown key")
        if isinstance(ref[key], dict) and where not in _LEAVES:
            _check_keys(value, ref[key], where)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, DEFAULTS)
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise FormatError(f"config file not found: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as err:
            raise FormatError(f"{p}: invalid JSON: {err}") from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dumps(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.data == other.data

    def set(self, dotted: str, value) -> None:
        """Override one field by dotted path, e.g. ``train.lr``."""
        parts = dotted.split(".")
        ref, node = DEFAULTS, self.data
        for i, key in enumerate(parts):
            if not isinstance(ref, dict) or key not in ref:
                raise FormatError(f"{dotted}: unknown key")
            if i == len(parts) - 1:
                node[key] = value
            else:
                ref, node = ref[key], node[key]
        self.validate()

    def validate(self) -> None:
        """Build every typed view once so bad values fail with a field-level message."""
        for name, build in (("backbone", lambda: self.backbone), ("train", lambda: self.train),
                            ("masking", lambda: self.schedule)):
            try:
                build()
            except (TypeError, ValueError, MLAEError) as err:
                raise FormatError(f"{name}: {err}") from None

    # -- typed views -------------------------------------------------------

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(**self.data["backbone"])

    @property
    def flags(self) -> TrainFlags:
        return TrainFlags(**self.data["adapter"]["flags"])

    @property
    def schedule(self) -> MaskSchedule:
        a, t = self.data["adapter"], self.data["train"]
        n = a["r"] // a["sub_rank"] if self.flags.decomposition else 1
        return MaskSchedule.from_dict(self.data["masking"], self.data["backbone"]["L"], n, t["p"])

    @property
    def train(self) -> TrainConfig:
        a, t = self.data["adapter"], self.data["train"]
        return TrainConfig(batch_size=t["batch_size"], lr=t["lr"], weight_decay=t["weight_decay"],
                           epochs=t["epochs"], p=t["p"], coeff_init=a["coeff_init"], r=a["r"],
                           sub_rank=a["sub_rank"], init_std=a["init_std"], schedule=self.schedule,
                           seeds=Seeds(**t["seeds"]), flags=self.flags,
                           head_weight_decay=t["head_weight_decay"], delta_dropout=t["delta_dropout"],
                           sparse_updates=t["sparse_updates"])

    @property
    def task(self) -> dict:
        return dict(self.data["task"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])
