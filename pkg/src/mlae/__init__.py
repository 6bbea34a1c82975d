"""Masked rank-1 LoRA experts on a desk-scale transformer."""
from .errors import (ContractError, CorruptCheckpointError, FormatError, MLAEError, NumericError,
                     ParameterError, ShapeError, StateError)
from .experts import (Expert, ExpertBank, MaskSample, TrainFlags, assemble_delta, decompose,
                      delta_rank_bound, forward, merge, submatrix_variant)
from .masking import MaskSchedule, fixed_pattern, sample_mask, stochastic_schedule

__version__ = "0.1.0"
