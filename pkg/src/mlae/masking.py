"""Fixed, stochastic and mixed expert-masking schedules and the per-step sampler."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ParameterError
from .experts import MaskSample

STRATEGIES = ("fixed", "stochastic", "mixed")
PATTERNS = ("incremental", "decremental", "hourglass", "protruding", "random", "uniform")

# Experts per block, first block first; each sums to 96 over 12 blocks.
FIXED_PRESETS = {
    "incremental": (2, 2, 2, 6, 6, 6, 10, 10, 10, 14, 14, 14),
    "decremental": (14, 14, 14, 10, 10, 10, 6, 6, 6, 2, 2, 2),
    "hourglass": (14, 14, 14, 2, 2, 2, 2, 2, 2, 14, 14, 14),
    "protruding": (2, 2, 2, 14, 14, 14, 14, 14, 14, 2, 2, 2),
}

# Per-block dropout probability; names follow the expected number of survivors.
STOCHASTIC_PRESETS = {
    "incremental": (0.8, 0.8, 0.7, 0.7, 0.6, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0),
    "decremental": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.6, 0.7, 0.7, 0.8, 0.8),
    "hourglass": (0.0, 0.1, 0.3, 0.5, 0.6, 0.8, 0.8, 0.6, 0.5, 0.3, 0.1, 0.0),
    "protruding": (0.8, 0.6, 0.5, 0.3, 0.1, 0.0, 0.0, 0.1, 0.3, 0.5, 0.6, 0.8),
}

PRESET_LAYERS = 12
PRESET_BUDGET = 96
RANDOM_MIN, RANDOM_MAX = 1, 14


def fixed_pattern(name: str, L: int = PRESET_LAYERS, budget: int = PRESET_BUDGET, seed: int = 0) -> list[int]:
    """Experts per layer for a fixed (permanent) masking pattern.

    ``random`` rejection-samples integers in [1, 14] until they sum to
    ``budget``; ``uniform`` spreads the budget evenly and works for any L.
    """
    if name in FIXED_PRESETS:
        if L != PRESET_LAYERS or budget != PRESET_BUDGET:
            raise ParameterError(f"preset {name!r} is defined for L={PRESET_LAYERS}, budget={PRESET_BUDGET}")
        return list(FIXED_PRESETS[name])
    if name == "uniform":
        if L < 1 or budget % L:
            raise ParameterError(f"budget {budget} does not divide evenly over {L} layers")
        return [budget // L] * L
    if name == "random":
        if L < 1 or not RANDOM_MIN * L <= budget <= RANDOM_MAX * L:
            raise ParameterError(f"no allocation in [{RANDOM_MIN}, {RANDOM_MAX}]^{L} sums to {budget}")
        rng = nx.stream(seed, "fixed-random-pattern")
        while True:
            counts = rng.integers(RANDOM_MIN, RANDOM_MAX + 1, size=L)
            if counts.sum() == budget:
                return counts.tolist()
    raise ParameterError(f"unknown fixed pattern {name!r}")


def stochastic_schedule(name: str, L: int = PRESET_LAYERS, p: float = 0.5) -> list[float]:
    """Per-layer dropout probabilities; ``uniform`` repeats ``p``."""
    if name in STOCHASTIC_PRESETS:
        if L != PRESET_LAYERS:
            raise ParameterError(f"preset {name!r} is defined for L={PRESET_LAYERS}")
        return list(STOCHASTIC_PRESETS[name])
    if name == "uniform":
        _check_p(p)
        return [float(p)] * L
    raise ParameterError(f"unknown stochastic pattern {name!r}")


def _check_p(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")


@dataclass(frozen=True)
class MaskSchedule:
    strategy: str
    pattern: str
    counts: tuple[int, ...]
    probs: tuple[float, ...]
    seed: int = 0
    slots: int = field(default=0)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}")
        if self.pattern not in PATTERNS:
            raise ParameterError(f"unknown pattern {self.pattern!r}")
        if len(self.counts) != len(self.probs) or not self.counts:
            raise ParameterError("counts and probs must be non-empty and the same length")
        if min(self.counts) < 1:
            raise ParameterError("every layer needs at least one expert")
        for p in self.probs:
            _check_p(p)
        if self.strategy == "fixed" and any(self.probs):
            raise ParameterError("fixed masking has no dropout")
        if self.strategy == "mixed" and len(set(self.probs)) != 1:
            raise ParameterError("mixed masking uses one probability for all layers")
        if self.strategy == "stochastic" and len(set(self.counts)) != 1:
            raise ParameterError("stochastic masking keeps the same expert count in every layer")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if not self.slots:
            object.__setattr__(self, "slots", max(self.counts))
        if self.slots < max(self.counts):
            raise ParameterError("slots must cover the largest layer count")

    # -- constructors ------------------------------------------------------

    @classmethod
    def fixed(cls, pattern: str, L: int = PRESET_LAYERS, budget: int = PRESET_BUDGET, seed: int = 0):
        counts = fixed_pattern(pattern, L, budget, seed)
        return cls("fixed", pattern, tuple(counts), (0.0,) * L, seed)

    @classmethod
    def stochastic(cls, pattern: str = "uniform", L: int = PRESET_LAYERS, r: int = 8, p: float = 0.5,
                   seed: int = 0):
        probs = stochastic_schedule(pattern, L, p)
        return cls("stochastic", pattern, (r,) * L, tuple(probs), seed)

    @classmethod
    def mixed(cls, pattern: str, L: int = PRESET_LAYERS, budget: int = PRESET_BUDGET, p: float = 0.5,
              seed: int = 0):
        _check_p(p)
        counts = fixed_pattern(pattern, L, budget, seed)
        return cls("mixed", pattern, tuple(counts), (float(p),) * L, seed)

    @classmethod
    def from_dict(cls, d: dict, L: int, r: int, p: float) -> "MaskSchedule":
        """Build from a config section; missing counts/probs are derived from (L, r, p)."""
        strategy = d.get("strategy", "stochastic")
        pattern = d.get("pattern", "uniform")
        seed = int(d.get("seed", 0))
        counts, probs = d.get("counts"), d.get("probs")
        if counts is None:
            if strategy == "stochastic":
                counts = [r] * L
            else:
                counts = fixed_pattern(pattern, L, r * L, seed)
        if probs is None:
            if strategy == "fixed":
                probs = [0.0] * L
            elif strategy == "mixed":
                probs = [p] * L
            else:
                probs = stochastic_schedule(pattern, L, p)
        if len(counts) != L:
            raise ParameterError(f"masking.counts has {len(counts)} entries for {L} layers")
        return cls(strategy, pattern, tuple(counts), tuple(probs), seed)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "pattern": self.pattern, "probs": list(self.probs),
                "counts": list(self.counts), "seed": self.seed}

    # -- queries -----------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.counts)

    @property
    def budget(self) -> int:
        """Expert slots that can ever be active, summed over layers."""
        return sum(self.counts)

    def expected_active(self, layer: int) -> float:
        return self.counts[layer] * (1.0 - self.probs[layer])

    def inference_mask(self, layer: int) -> MaskSample:
        c = self.counts[layer]
        return MaskSample(layer, (1,) * c + (0,) * (self.slots - c), 1.0)


def sample_mask(schedule: MaskSchedule, layer: int, rng: np.random.Generator | None = None,
                mode: str = "train") -> MaskSample:
    """Draw the mask for ``layer`` at one training step.

    Permanently discarded experts are the trailing ``slots - counts[layer]``
    positions. Surviving stochastic experts are scaled by 1/(1-p) during
    training; inference activates every non-discarded expert unscaled.
    """
    if not 0 <= layer < schedule.n_layers:
        raise ParameterError(f"layer {layer} out of range for {schedule.n_layers} layers")
    if mode == "inference":
        return schedule.inference_mask(layer)
    if mode != "train":
        raise ParameterError(f"mode must be 'train' or 'inference', got {mode!r}")
    p = schedule.probs[layer]
    _check_p(p)
    c = schedule.counts[layer]
    tail = (0,) * (schedule.slots - c)
    if schedule.strategy == "fixed" or p == 0.0:
        return MaskSample(layer, (1,) * c + tail, 1.0)
    if rng is None:
        raise ParameterError("stochastic masks need an rng stream")
    keep = rng.random(c) < 1.0 - p
    return MaskSample(layer, tuple(int(k) for k in keep) + tail, 1.0 / (1.0 - p))
