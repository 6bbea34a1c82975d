"""Rank-1 LoRA experts: decomposition, masked delta assembly, forward and merge.

A LoRA update ``B @ A`` (``B`` is d_in x r, ``A`` is r x d_out) is split into
r experts, expert i owning column i of ``B`` and row i of ``A``. Each expert
also carries an adaptive coefficient, so that

    delta = sum_i bits[i] * scale * lambda_i * (b_i a_i^T)

and ``h = x @ W0 + x @ delta`` for row-major activations ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, ParameterError, ShapeError
from .numerics import Matrix, Parameter


@dataclass(frozen=True)
class TrainFlags:
    """Component switches: cellular decomposition, expert masking, adaptive coefficients.

    ``freeze_lambda`` keeps coefficients at their initial value even when
    ``adaptive`` is on.
    """

    decomposition: bool = True
    masking: bool = True
    adaptive: bool = True
    freeze_lambda: bool = False

    @property
    def lambda_trainable(self) -> bool:
        return self.adaptive and not self.freeze_lambda


class Expert:
    """One cell of the update: ``b`` is d_in x k, ``a`` is k x d_out, ``lam`` is 1 x k.

    k is 1 for the standard rank-1 expert.
    """

    __slots__ = ("b", "a", "lam")

    def __init__(self, b: Matrix, a: Matrix, lam: Matrix):
        if b.cols != a.rows or lam.shape != (1, b.cols):
            raise ShapeError(f"expert blocks disagree: b {b.shape}, a {a.shape}, lambda {lam.shape}")
        self.b, self.a, self.lam = b, a, lam

    @property
    def rank(self) -> int:
        return self.b.cols

    def parameters(self) -> list[Parameter]:
        return [m for m in (self.b, self.a, self.lam) if isinstance(m, Parameter)]

    def product(self) -> np.ndarray:
        """The coefficient-free matrix ``b @ a`` (d_in x d_out)."""
        return self.b.data @ self.a.data


@dataclass(frozen=True)
class MaskSample:
    """Per-layer expert mask for one step.

    ``delta_keep`` is only used by the element-wise ΔW dropout baseline; it
    already includes its own 1/(1-p) rescaling.
    """

    layer_id: int
    bits: tuple[int, ...]
    scale: float = 1.0
    delta_keep: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ParameterError("mask bits must be 0 or 1")
        if self.scale < 1.0:
            raise ParameterError(f"mask scale must be >= 1, got {self.scale}")

    @classmethod
    def full(cls, layer_id: int, n: int) -> "MaskSample":
        return cls(layer_id, (1,) * n, 1.0)

    @property
    def popcount(self) -> int:
        return sum(self.bits)


class ExpertBank:
    """All experts attached to one adapted projection."""

    def __init__(self, layer_id: int, experts: list[Expert], d_in: int, d_out: int,
                 flags: TrainFlags = TrainFlags()):
        if not experts:
            raise ParameterError("a bank needs at least one expert")
        for e in experts:
            if e.b.rows != d_in or e.a.cols != d_out:
                raise ShapeError("all experts in a bank must share (d_in, d_out)")
        self.layer_id = layer_id
        self.experts = experts
        self.d_in = d_in
        self.d_out = d_out
        self.flags = flags

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def sub_rank(self) -> int:
        return self.experts[0].rank

    @property
    def total_rank(self) -> int:
        return sum(e.rank for e in self.experts)

    def parameters(self) -> list[Parameter]:
        return [p for e in self.experts for p in e.parameters()]

    def parameter_count(self, active: int | None = None) -> int:
        """Trainable scalars, counting only the first ``active`` experts if given."""
        experts = self.experts if active is None else self.experts[:active]
        return sum(p.data.size for e in experts for p in e.parameters())

    def full_mask(self) -> MaskSample:
        return MaskSample.full(self.layer_id, len(self.experts))

    def lora_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack experts into the equivalent (B, A) pair, ignoring coefficients."""
        B = np.concatenate([e.b.data for e in self.experts], axis=1)
        A = np.concatenate([e.a.data for e in self.experts], axis=0)
        return B, A


def _validate_dims(d_in: int, d_out: int, r: int) -> None:
    if r < 1:
        raise ParameterError(f"rank must be >= 1, got {r}")
    if d_in < 1 or d_out < 1:
        raise ParameterError(f"dimensions must be positive, got {d_in}x{d_out}")


def _build(d_in, d_out, sub_rank, n_experts, coeff_init, init_std, seed, layer_id, flags, tag):
    if coeff_init <= 0:
        raise ParameterError(f"coeff_init must be positive, got {coeff_init}")
    experts = []
    for i in range(n_experts):
        a_seed = nx.derive_seed(seed, tag, layer_id, i)
        a = Parameter(nx.gaussian_init(sub_rank, d_out, init_std, a_seed).data,
                      name=f"layer{layer_id}.expert{i}.a")
        b = Parameter(np.zeros((d_in, sub_rank)), name=f"layer{layer_id}.expert{i}.b")
        if flags.adaptive:
            lam_value = np.full((1, sub_rank), float(coeff_init))
        else:
            lam_value = np.ones((1, sub_rank))
        lam_cls = Parameter if flags.lambda_trainable else Matrix
        lam = lam_cls(lam_value, name=f"layer{layer_id}.expert{i}.lambda")
        experts.append(Expert(b, a, lam))
    return ExpertBank(layer_id, experts, d_in, d_out, flags)


def decompose(d_in: int, d_out: int, r: int, coeff_init: float = 1.0, init_std: float = 0.02,
              seed: int = 0, *, layer_id: int = 0, flags: TrainFlags = TrainFlags()) -> ExpertBank:
    """Split a rank-``r`` update into ``r`` zero-initialised rank-1 experts.

    Each expert's ``a`` comes from its own Philox substream
    ``(seed, "expert-init", layer_id, i)`` so experts start from distinct
    states; every ``b`` is zero, making the initial delta exactly zero.
    With ``flags.decomposition`` off the bank holds a single rank-``r`` pair
    (the vanilla LoRA layout).
    """
    _validate_dims(d_in, d_out, r)
    if flags.decomposition:
        return _build(d_in, d_out, 1, r, coeff_init, init_std, seed, layer_id, flags, "expert-init")
    return _build(d_in, d_out, r, 1, coeff_init, init_std, seed, layer_id, flags, "lora-init")


def submatrix_variant(d_in: int, d_out: int, sub_rank: int, n_experts: int, budget: int = 8,
                      coeff_init: float = 1.0, init_std: float = 0.02, seed: int = 0, *,
                      layer_id: int = 0, flags: TrainFlags = TrainFlags()) -> ExpertBank:
    """Bank of ``n_experts`` rank-``sub_rank`` experts spending ``budget`` total rank."""
    _validate_dims(d_in, d_out, sub_rank)
    if n_experts < 1 or sub_rank * n_experts != budget:
        raise ParameterError(f"{n_experts} experts x rank {sub_rank} != budget {budget}")
    return _build(d_in, d_out, sub_rank, n_experts, coeff_init, init_std, seed, layer_id, flags,
                  "expert-init" if sub_rank == 1 else f"submatrix-init-{sub_rank}")


def _check_mask(bank: ExpertBank, mask: MaskSample) -> None:
    if mask.layer_id != bank.layer_id:
        raise ShapeError(f"mask for layer {mask.layer_id} applied to bank {bank.layer_id}")
    if len(mask.bits) != len(bank.experts):
        raise ShapeError(f"mask has {len(mask.bits)} bits for {len(bank.experts)} experts")


def assemble_delta(bank: ExpertBank, mask: MaskSample) -> Matrix:
    """Masked, coefficient-weighted sum of expert products (d_in x d_out).

    Masked experts are left out of the computation entirely, so they add
    exactly zero and never reach the gradient tape.
    """
    _check_mask(bank, mask)
    terms = [nx.matmul(nx.scale_cols(e.b, e.lam, mask.scale), e.a)
             for bit, e in zip(mask.bits, bank.experts) if bit]
    if not terms:
        return Matrix(np.zeros((bank.d_in, bank.d_out)))
    delta = terms[0] if len(terms) == 1 else nx.add_n(terms)
    if mask.delta_keep is not None:
        delta = nx.mul_const(delta, mask.delta_keep)
    return delta


def forward(x: Matrix, w0: Matrix, bank: ExpertBank, mask: MaskSample) -> Matrix:
    """``x @ W0 + x @ delta``; differentiable in the expert parameters only."""
    if isinstance(w0, Parameter):
        raise ContractError("base weight must be frozen, got a Parameter")
    if w0.shape != (bank.d_in, bank.d_out):
        raise ShapeError(f"base weight {w0.shape} does not match bank {(bank.d_in, bank.d_out)}")
    if x.cols != w0.rows:
        raise ShapeError(f"input {x.shape} does not conform to weight {w0.shape}")
    return nx.add(nx.matmul(x, w0), nx.matmul(x, assemble_delta(bank, mask)))


def merge(w0: Matrix, bank: ExpertBank, mask: MaskSample | None = None) -> Matrix:
    """Fold the inference-mode delta into the base weight.

    ``mask`` defaults to all experts active; fixed-mask banks pass their
    inference mask so permanently discarded slots stay out.
    """
    if w0.shape != (bank.d_in, bank.d_out):
        raise ShapeError(f"base weight {w0.shape} does not match bank {(bank.d_in, bank.d_out)}")
    mask = bank.full_mask() if mask is None else MaskSample(mask.layer_id, mask.bits, 1.0)
    _check_mask(bank, mask)
    delta = np.zeros_like(w0.data)
    for bit, e in zip(mask.bits, bank.experts):
        if bit:
            delta += (e.b.data * e.lam.data) @ e.a.data
    return Matrix(w0.data + delta)


def delta_rank_bound(bank: ExpertBank, mask: MaskSample) -> int:
    """Upper bound on rank(assemble_delta): active experts times their rank."""
    _check_mask(bank, mask)
    return mask.popcount * bank.sub_rank
