"""A tiny frozen pre-norm transformer encoder with expert adapters on the fused QKV projection."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import experts as ex
from . import numerics as nx
from .errors import ParameterError, ShapeError, StateError
from .experts import ExpertBank, MaskSample, TrainFlags
from .masking import MaskSchedule, sample_mask
from .numerics import Matrix, Parameter


@dataclass(frozen=True)
class BackboneConfig:
    L: int = 12
    d: int = 64
    heads: int = 4
    patch_tokens: int = 16
    token_dim: int = 16
    n_classes: int = 10
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("L", "d", "heads", "patch_tokens", "token_dim", "n_classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ParameterError(f"backbone.{name} must be >= 1")
        if self.d % self.heads:
            raise ParameterError(f"d={self.d} is not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Block:
    ln1_g: Matrix
    ln1_b: Matrix
    w_qkv: Matrix
    b_qkv: Matrix
    w_o: Matrix
    b_o: Matrix
    ln2_g: Matrix
    ln2_b: Matrix
    w1: Matrix
    b1: Matrix
    w2: Matrix
    b2: Matrix
    adapter: ExpertBank | None = None

    FROZEN = ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class BackboneModel:
    config: BackboneConfig
    w_embed: Matrix
    pos: Matrix
    blocks: list[Block]
    lnf_g: Matrix
    lnf_b: Matrix
    head_w: Parameter
    head_b: Parameter
    adapter_meta: dict = field(default_factory=dict)

    @property
    def has_adapters(self) -> bool:
        return any(b.adapter is not None for b in self.blocks)

    def banks(self) -> list[ExpertBank]:
        return [b.adapter for b in self.blocks if b.adapter is not None]

    def head_parameters(self) -> list[Parameter]:
        return [self.head_w, self.head_b]

    def trainable_parameters(self) -> list[Parameter]:
        params = [p for bank in self.banks() for p in bank.parameters()]
        return params + self.head_parameters()

    def trainable_parameter_count(self, schedule: MaskSchedule | None = None) -> int:
        """Trainable scalars; with a schedule, permanently masked slots are excluded."""
        n = sum(p.data.size for p in self.head_parameters())
        for l, bank in enumerate(self.banks()):
            n += bank.parameter_count(None if schedule is None else schedule.counts[l])
        return n

    def frozen_tensors(self) -> dict[str, np.ndarray]:
        out = {"embed.weight": self.w_embed.data, "embed.pos": self.pos.data}
        for l, blk in enumerate(self.blocks):
            for name in Block.FROZEN:
                out[f"blocks.{l}.{name}"] = getattr(blk, name).data
        out["lnf_g"] = self.lnf_g.data
        out["lnf_b"] = self.lnf_b.data
        return out

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.frozen_tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def adapter_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for l, blk in enumerate(self.blocks):
            if blk.adapter is None:
                continue
            for i, e in enumerate(blk.adapter.experts):
                out[f"blocks.{l}.adapter.{i}.b"] = e.b.data
                out[f"blocks.{l}.adapter.{i}.a"] = e.a.data
                out[f"blocks.{l}.adapter.{i}.lambda"] = e.lam.data
        return out

    def state(self) -> dict[str, np.ndarray]:
        """All tensors by name: frozen weights, adapters, then the head."""
        out = self.frozen_tensors()
        out.update(self.adapter_tensors())
        out["head.weight"] = self.head_w.data
        out["head.bias"] = self.head_b.data
        return out


def build_backbone(config: BackboneConfig) -> BackboneModel:
    """Gaussian-initialised frozen encoder; only the zero-initialised head is trainable."""
    d, m = config.d, config.d * config.mlp_ratio

    def w(rows, cols, *path, std=None):
        std = std if std is not None else 1.0 / np.sqrt(rows)
        return nx.gaussian_init(rows, cols, std, nx.derive_seed(config.seed, "backbone", *path))

    def const(cols, value):
        return Matrix(np.full((1, cols), value))

    blocks = []
    for l in range(config.L):
        blocks.append(Block(
            ln1_g=const(d, 1.0), ln1_b=const(d, 0.0),
            w_qkv=w(d, 3 * d, l, "qkv"), b_qkv=w(1, 3 * d, l, "qkv-bias", std=0.02),
            w_o=w(d, d, l, "o"), b_o=const(d, 0.0),
            ln2_g=const(d, 1.0), ln2_b=const(d, 0.0),
            w1=w(d, m, l, "fc1"), b1=const(m, 0.0),
            w2=w(m, d, l, "fc2"), b2=const(d, 0.0),
        ))
    return BackboneModel(
        config=config,
        w_embed=w(config.token_dim, d, "embed"),
        pos=w(config.patch_tokens, d, "pos", std=0.5),
        blocks=blocks,
        lnf_g=const(d, 1.0), lnf_b=const(d, 0.0),
        head_w=Parameter(np.zeros((d, config.n_classes)), name="head.weight"),
        head_b=Parameter(np.zeros((1, config.n_classes)), name="head.bias"),
    )


def inject_adapters(model: BackboneModel, r: int, coeff_init: float = 1.0, init_std: float = 0.02,
                    flags: TrainFlags = TrainFlags(), seed: int = 0, sub_rank: int = 1) -> BackboneModel:
    """Attach one expert bank to every block's fused QKV projection (in place)."""
    if model.has_adapters:
        raise StateError("adapters already injected")
    d = model.config.d
    for l, blk in enumerate(model.blocks):
        if sub_rank == 1 or not flags.decomposition:
            blk.adapter = ex.decompose(d, 3 * d, r, coeff_init, init_std, seed, layer_id=l, flags=flags)
        else:
            if r % sub_rank:
                raise ParameterError(f"rank budget {r} is not a multiple of sub_rank {sub_rank}")
            blk.adapter = ex.submatrix_variant(d, 3 * d, sub_rank, r // sub_rank, r, coeff_init, init_std,
                                               seed, layer_id=l, flags=flags)
    model.adapter_meta = {"r": r, "sub_rank": sub_rank, "coeff_init": coeff_init, "init_std": init_std,
                          "flags": asdict(flags), "seed": seed}
    return model


def sample_masks(model: BackboneModel, schedule: MaskSchedule | None, mode: str = "train",
                 rng: np.random.Generator | None = None, delta_dropout: float = 0.0) -> list[MaskSample | None]:
    """One mask per block; ``None`` for blocks without adapters.

    ``delta_dropout`` > 0 adds element-wise dropout on each block's delta
    (the LoRA+Dropout baseline) in train mode.
    """
    masks: list[MaskSample | None] = []
    for l, blk in enumerate(model.blocks):
        bank = blk.adapter
        if bank is None:
            masks.append(None)
            continue
        if schedule is None:
            mask = bank.full_mask()
        else:
            if schedule.n_layers != len(model.blocks) or schedule.slots != len(bank):
                raise ShapeError(f"schedule ({schedule.n_layers} layers x {schedule.slots} slots) "
                                 f"does not match the model ({len(model.blocks)} x {len(bank)})")
            mask = sample_mask(schedule, l, rng, mode)
        if mode == "train" and delta_dropout > 0.0:
            if not delta_dropout < 1.0:
                raise ParameterError(f"delta dropout must lie in [0, 1), got {delta_dropout}")
            keep = (rng.random((bank.d_in, bank.d_out)) < 1.0 - delta_dropout) / (1.0 - delta_dropout)
            mask = MaskSample(mask.layer_id, mask.bits, mask.scale, keep)
        masks.append(mask)
    return masks


def _as_tokens(model: BackboneModel, batch) -> tuple[Matrix, int]:
    cfg = model.config
    arr = batch.data if isinstance(batch, Matrix) else np.asarray(batch, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[1:] != (cfg.patch_tokens, cfg.token_dim):
            raise ShapeError(f"batch shape {arr.shape[1:]} != ({cfg.patch_tokens}, {cfg.token_dim})")
        n = arr.shape[0]
        arr = arr.reshape(n * cfg.patch_tokens, cfg.token_dim)
    elif arr.ndim == 2:
        if arr.shape[1] != cfg.token_dim or arr.shape[0] % cfg.patch_tokens:
            raise ShapeError(f"token matrix {arr.shape} does not hold whole {cfg.patch_tokens}-token samples")
        n = arr.shape[0] // cfg.patch_tokens
    else:
        raise ShapeError(f"batch must be 2-D or 3-D, got {arr.ndim}-D")
    return Matrix(arr), n


def forward_logits(model: BackboneModel, batch, schedule: MaskSchedule | None = None, mode: str = "inference",
                   rng: np.random.Generator | None = None, masks: list[MaskSample | None] | None = None) -> Matrix:
    """Class logits (n x n_classes) for a batch of token grids.

    ``batch`` is an (n, patch_tokens, token_dim) array or the equivalent
    (n*patch_tokens) x token_dim matrix. Masks are drawn from ``schedule``
    unless given explicitly; inference mode uses the unscaled inference mask.
    """
    cfg = model.config
    x, n = _as_tokens(model, batch)
    if masks is None:
        masks = sample_masks(model, schedule, mode, rng)
    if len(masks) != cfg.L:
        raise ShapeError(f"{len(masks)} masks for {cfg.L} blocks")
    pos = Matrix(np.tile(model.pos.data, (n, 1)))
    h = nx.add(nx.matmul(x, model.w_embed), pos)
    for blk, mask in zip(model.blocks, masks):
        z = nx.layer_norm(h, blk.ln1_g, blk.ln1_b)
        if blk.adapter is not None:
            qkv = ex.forward(z, blk.w_qkv, blk.adapter, mask)
        else:
            qkv = nx.matmul(z, blk.w_qkv)
        att = nx.attention(nx.add_bias(qkv, blk.b_qkv), n, cfg.patch_tokens, cfg.heads)
        h = nx.add(h, nx.add_bias(nx.matmul(att, blk.w_o), blk.b_o))
        z = nx.layer_norm(h, blk.ln2_g, blk.ln2_b)
        z = nx.gelu(nx.add_bias(nx.matmul(z, blk.w1), blk.b1))
        h = nx.add(h, nx.add_bias(nx.matmul(z, blk.w2), blk.b2))
    h = nx.layer_norm(h, model.lnf_g, model.lnf_b)
    pooled = nx.mean_pool(h, n, cfg.patch_tokens)
    return nx.add_bias(nx.matmul(pooled, model.head_w), model.head_b)


def merge_model(model: BackboneModel, schedule: MaskSchedule | None = None) -> BackboneModel:
    """Copy of ``model`` with every adapter folded into its QKV weight and removed."""
    blocks = []
    for l, blk in enumerate(model.blocks):
        fields = {name: getattr(blk, name) for name in Block.FROZEN}
        if blk.adapter is not None:
            mask = schedule.inference_mask(l) if schedule is not None else None
            fields["w_qkv"] = ex.merge(blk.w_qkv, blk.adapter, mask)
        blocks.append(Block(**fields))
    return BackboneModel(
        config=model.config, w_embed=model.w_embed, pos=model.pos, blocks=blocks,
        lnf_g=model.lnf_g, lnf_b=model.lnf_b,
        head_w=Parameter(model.head_w.data, name="head.weight"),
        head_b=Parameter(model.head_b.data, name="head.bias"),
    )


def model_from_state(config: BackboneConfig, state: dict[str, np.ndarray],
                     adapter_meta: dict | None = None) -> BackboneModel:
    """Rebuild a model from named tensors (the inverse of ``BackboneModel.state``)."""
    def get(name, shape):
        if name not in state:
            raise ShapeError(f"missing tensor {name!r}")
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        return arr

    d, m = config.d, config.d * config.mlp_ratio
    shapes = {"ln1_g": (1, d), "ln1_b": (1, d), "w_qkv": (d, 3 * d), "b_qkv": (1, 3 * d),
              "w_o": (d, d), "b_o": (1, d), "ln2_g": (1, d), "ln2_b": (1, d),
              "w1": (d, m), "b1": (1, m), "w2": (m, d), "b2": (1, d)}
    flags = TrainFlags(**adapter_meta["flags"]) if adapter_meta else TrainFlags()
    blocks = []
    for l in range(config.L):
        blk = Block(**{k: Matrix(get(f"blocks.{l}.{k}", s)) for k, s in shapes.items()})
        i, experts = 0, []
        while f"blocks.{l}.adapter.{i}.b" in state:
            pre = f"blocks.{l}.adapter.{i}"
            b = np.asarray(state[f"{pre}.b"], dtype=np.float64)
            k = b.shape[1]
            lam_cls = Parameter if flags.lambda_trainable else Matrix
            experts.append(ex.Expert(Parameter(get(f"{pre}.b", (d, k)), name=f"layer{l}.expert{i}.b"),
                                     Parameter(get(f"{pre}.a", (k, 3 * d)), name=f"layer{l}.expert{i}.a"),
                                     lam_cls(get(f"{pre}.lambda", (1, k)), name=f"layer{l}.expert{i}.lambda")))
            i += 1
        if experts:
            blk.adapter = ExpertBank(l, experts, d, 3 * d, flags)
        blocks.append(blk)
    model = BackboneModel(
        config=config,
        w_embed=Matrix(get("embed.weight", (config.token_dim, d))),
        pos=Matrix(get("embed.pos", (config.patch_tokens, d))),
        blocks=blocks,
        lnf_g=Matrix(get("lnf_g", (1, d))), lnf_b=Matrix(get("lnf_b", (1, d))),
        head_w=Parameter(get("head.weight", (d, config.n_classes)), name="head.weight"),
        head_b=Parameter(get("head.bias", (1, config.n_classes)), name="head.bias"),
        adapter_meta=dict(adapter_meta or {}),
    )
    if adapter_meta and not model.has_adapters:
        model.adapter_meta = {}
    return model
