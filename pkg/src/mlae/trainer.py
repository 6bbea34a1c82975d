"""AdamW + cosine-decay training of adapters, synthetic tasks, evaluation and sweeps."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig, BackboneModel, build_backbone, forward_logits, inject_adapters, sample_masks
from .errors import FormatError, NumericError, ParameterError
from .experts import TrainFlags
from .masking import MaskSchedule
from .numerics import Parameter

log = logging.getLogger(__name__)

P_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
COEFF_GRID = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0)
SWEEP_AXES = ("p", "coeff_init", "strategy", "sub_rank", "budget")
METRIC_COLUMNS = ("epoch", "step", "train_loss", "val_acc", "lr")


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 0
    dropout: int = 0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    p: float = 0.5
    coeff_init: float = 1.0
    r: int = 8
    sub_rank: int = 1
    init_std: float = 0.02
    schedule: MaskSchedule | None = None
    seeds: Seeds = Seeds()
    flags: TrainFlags = TrainFlags()
    head_weight_decay: bool = True
    delta_dropout: float = 0.0
    sparse_updates: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.r < 1 or self.sub_rank < 1:
            raise ParameterError("batch_size, r, sub_rank must be >= 1 and epochs >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ParameterError("lr and weight_decay must be non-negative")
        if not 0.0 <= self.p < 1.0 or not 0.0 <= self.delta_dropout < 1.0:
            raise ParameterError("dropout probabilities must lie in [0, 1)")
        if self.coeff_init <= 0:
            raise ParameterError("coeff_init must be positive")

    def resolve_schedule(self, L: int) -> MaskSchedule:
        """The mask schedule actually used; masking off means every slot always on."""
        if self.r % self.sub_rank:
            raise ParameterError(f"r={self.r} is not a multiple of sub_rank={self.sub_rank}")
        n_experts = self.r // self.sub_rank if self.flags.decomposition else 1
        sched = self.schedule or MaskSchedule.stochastic("uniform", L, n_experts, self.p, self.seeds.dropout)
        if sched.n_layers != L:
            raise ParameterError(f"schedule covers {sched.n_layers} layers, model has {L}")
        if not self.flags.masking:
            sched = MaskSchedule.stochastic("uniform", L, sched.slots, 0.0, sched.seed)
        return sched


# -- synthetic data ------------------------------------------------------------

@dataclass
class SyntheticTask:
    n_classes: int
    patch_tokens: int
    token_dim: int
    seed: int
    difficulty: float
    splits: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise ParameterError(f"unknown split {name!r}")
        return self.splits[name]


def make_synthetic_task(n_classes: int = 10, n_train: int = 256, n_val: int = 128, n_test: int = 256,
                        difficulty: float = 1.0, seed: int = 0, patch_tokens: int = 16, token_dim: int = 16,
                        template_rank: int = 2) -> SyntheticTask:
    """Class-conditional token grids.

    Class c owns ``template_rank`` rank-1 templates ``u_j v_j^T`` (tokens x
    features). A sample mixes its class's templates with per-sample
    coefficients ``1 + 0.5 z`` and adds ``difficulty``-scaled Gaussian noise.
    Labels are balanced (``index % n_classes``) and shuffled.
    """
    if n_classes < 2 or n_train < n_classes or n_val < 0 or n_test < 0 or difficulty < 0:
        raise ParameterError("need n_classes >= 2, n_train >= n_classes, non-negative sizes and difficulty")
    rng = nx.stream(seed, "task-templates")
    U = rng.normal(size=(n_classes, template_rank, patch_tokens))
    V = rng.normal(size=(n_classes, template_rank, token_dim)) / math.sqrt(template_rank)

    def draw(n, name):
        g = nx.stream(seed, "task-split", name)
        y = np.arange(n) % n_classes
        g.shuffle(y)
        coef = 1.0 + 0.5 * g.normal(size=(n, template_rank))
        x = np.einsum("nj,njt,njf->ntf", coef, U[y], V[y])
        x += difficulty * g.normal(size=x.shape)
        return x, y

    splits = {name: draw(n, name) for name, n in (("train", n_train), ("val", n_val), ("test", n_test))}
    return SyntheticTask(n_classes, patch_tokens, token_dim, seed, difficulty, splits)


def write_dataset_csv(path, x: np.ndarray, y: np.ndarray) -> None:
    """``label,t0_0,...`` with one row per sample; token-major feature columns."""
    n, T, D = x.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"t{t}_{f}" for t in range(T) for f in range(D)])
        for xi, yi in zip(x, y):
            w.writerow([int(yi)] + [repr(float(v)) for v in xi.ravel()])


def read_dataset_csv(path, patch_tokens: int, token_dim: int) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"dataset not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise FormatError(f"{path}: first column must be 'label'")
    expected = ["label"] + [f"t{t}_{f}" for t in range(patch_tokens) for f in range(token_dim)]
    if rows[0] != expected:
        raise FormatError(f"{path}: header does not match {patch_tokens} tokens x {token_dim} features")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None
    if data.size == 0:
        return np.zeros((0, patch_tokens, token_dim)), np.zeros(0, dtype=np.int64)
    y = data[:, 0].astype(np.int64)
    return data[:, 1:].reshape(-1, patch_tokens, token_dim), y


# -- optimisation ----------------------------------------------------------------

def cosine_lr(step: int, total: int, base: float) -> float:
    """Cosine decay from ``base`` at step 0 towards 0 at ``total``."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


class AdamW:
    """Decoupled weight decay Adam. Parameters without a gradient this step are skipped
    entirely (moments, step count and decay all untouched)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4, no_decay: Sequence[Parameter] = ()):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self._no_decay = {id(p) for p in no_decay}
        self.state: dict[int, list] = {}

    def step(self, updates: Sequence[tuple[Parameter, np.ndarray]], lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for p, g in updates:
            st = self.state.setdefault(id(p), [0, np.zeros(p.shape), np.zeros(p.shape)])
            st[0] += 1
            t, m, v = st
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            st[1], st[2] = m, v
            wd = 0.0 if id(p) in self._no_decay else self.weight_decay
            w = p.data * (1.0 - lr * wd)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.assign(w - lr * m_hat / (np.sqrt(v_hat) + self.eps))


class TrainingDiverged(NumericError):
    def __init__(self, message, step, history):
        super().__init__(message)
        self.step = step
        self.history = history


@dataclass
class TrainResult:
    model: BackboneModel
    schedule: MaskSchedule
    history: list[dict]
    final_loss: float = float("nan")


def build_model(backbone: BackboneConfig, config: TrainConfig) -> tuple[BackboneModel, MaskSchedule]:
    """Frozen backbone plus adapters sized for the configured schedule."""
    model = build_backbone(backbone)
    schedule = config.resolve_schedule(backbone.L)
    rank = schedule.slots * config.sub_rank if config.flags.decomposition else config.r
    inject_adapters(model, rank, config.coeff_init, config.init_std, config.flags, config.seeds.init,
                    config.sub_rank)
    return model, schedule


def _live_parameters(model: BackboneModel, schedule: MaskSchedule) -> list[Parameter]:
    """Trainable parameters outside permanently discarded expert slots."""
    params = []
    for l, bank in enumerate(model.banks()):
        for e in bank.experts[:schedule.counts[l]]:
            params.extend(e.parameters())
    return params + model.head_parameters()


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.arange(n)
    nx.stream(seed, "shuffle", epoch).shuffle(order)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(model: BackboneModel, task: SyntheticTask, config: TrainConfig,
          schedule: MaskSchedule | None = None) -> TrainResult:
    """Train adapters and head; frozen weights are never touched.

    Each step draws one mask per block from the dropout stream
    ``(seeds.dropout, "mask", step)``, runs forward/backward on the batch and
    applies AdamW to the parameters that took part in the step.
    On a non-finite loss the model is restored to the last good step and
    TrainingDiverged is raised.
    """
    schedule = schedule or config.resolve_schedule(model.config.L)
    x_tr, y_tr = task.split("train")
    x_val, y_val = task.split("val")
    steps_per_epoch = math.ceil(len(y_tr) / config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = AdamW(config.beta1, config.beta2, config.eps, config.weight_decay,
                no_decay=() if config.head_weight_decay else model.head_parameters())
    trainable = _live_parameters(model, schedule)
    history: list[dict] = []
    step = 0
    loss_value = float("nan")
    for epoch in range(config.epochs):
        losses = []
        lr = config.lr
        for idx in _batches(len(y_tr), config.batch_size, config.seeds.data, epoch):
            lr = cosine_lr(step, total, config.lr)
            masks = sample_masks(model, schedule, "train", nx.stream(config.seeds.dropout, "mask", step),
                                 config.delta_dropout)
            snapshot = [(p, p.data) for p in model.trainable_parameters()]
            try:
                with nx.GradientTape() as tape:
                    tape.watch(*trainable)
                    logits = forward_logits(model, x_tr[idx], masks=masks)
                    loss = nx.cross_entropy(logits, y_tr[idx])
                grads = nx.backward(loss, tape)
                stepped = tape.reached if config.sparse_updates else trainable
                opt.step([(p, grads[p].data) for p in stepped], lr)
            except NumericError as err:
                for p, value in snapshot:
                    p.assign(value)
                raise TrainingDiverged(f"training diverged at step {step}: {err}", step, history) from err
            loss_value = loss.item()
            losses.append(loss_value)
            step += 1
        val_acc = evaluate(model, x_val, y_val, schedule) if len(y_val) else float("nan")
        history.append({"epoch": epoch + 1, "step": step, "train_loss": float(np.mean(losses)),
                        "val_acc": val_acc, "lr": lr})
        log.debug("epoch %d loss %.4f val %.4f", epoch + 1, history[-1]["train_loss"], val_acc)
    return TrainResult(model, schedule, history, loss_value)


def predict_logits(model: BackboneModel, x: np.ndarray, schedule: MaskSchedule | None = None,
                   batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits: every non-discarded expert on, no scaling."""
    outs = [forward_logits(model, x[i:i + batch_size], schedule, "inference").data
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model: BackboneModel, x: np.ndarray, y: np.ndarray, schedule: MaskSchedule | None = None) -> float:
    """Top-1 accuracy in [0, 1]; argmax ties go to the lowest class index."""
    if len(y) == 0:
        raise ParameterError("cannot evaluate on an empty split")
    pred = np.argmax(predict_logits(model, x, schedule), axis=1)
    return float(np.mean(pred == np.asarray(y)))


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"], row["step"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[2:]])


# -- sweeps ------------------------------------------------------------------------

def sweep_config(base: TrainConfig, axis: str, value, L: int) -> TrainConfig:
    """``base`` with one ablation axis set to ``value``.

    strategy values are ``"<strategy>:<pattern>"`` strings, e.g. ``"mixed:hourglass"``;
    budget values are rank-1 expert counts per layer.
    """
    if axis == "p":
        return dataclasses.replace(base, p=float(value), schedule=None)
    if axis == "coeff_init":
        return dataclasses.replace(base, coeff_init=float(value))
    if axis == "sub_rank":
        return dataclasses.replace(base, sub_rank=int(value), schedule=None)
    if axis == "budget":
        return dataclasses.replace(base, r=int(value), schedule=None)
    if axis == "strategy":
        strategy, _, pattern = str(value).partition(":")
        pattern = pattern or "uniform"
        budget = base.r * L
        seed = base.seeds.dropout
        if strategy == "fixed":
            sched = MaskSchedule.fixed(pattern, L, budget, seed)
        elif strategy == "mixed":
            sched = MaskSchedule.mixed(pattern, L, budget, base.p, seed)
        elif strategy == "stochastic":
            sched = MaskSchedule.stochastic(pattern, L, base.r, base.p, seed)
        else:
            raise ParameterError(f"unknown strategy {strategy!r}")
        return dataclasses.replace(base, schedule=sched)
    raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_experiment(backbone: BackboneConfig, task: SyntheticTask, config: TrainConfig) -> tuple[TrainResult, float]:
    model, schedule = build_model(backbone, config)
    result = train(model, task, config, schedule)
    x_te, y_te = task.split("test")
    return result, evaluate(model, x_te, y_te, schedule)


def sweep(backbone: BackboneConfig, task: SyntheticTask, base: TrainConfig, axis: str, values: Sequence,
          seeds: Sequence[int] = (0,), runs_csv=None) -> list[dict]:
    """Train and test once per (value, seed); returns one row per value with the mean accuracy.

    With ``runs_csv`` every finished run is appended immediately and runs
    already present are not repeated, so an interrupted sweep resumes.
    """
    if axis not in SWEEP_AXES:
        raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    done: dict[tuple[str, int], float] = {}
    if runs_csv is not None and Path(runs_csv).is_file():
        with open(runs_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                done[(row["value"], int(row["seed"]))] = float(row["test_acc"])
    for value in values:
        for seed in seeds:
            key = (str(value), int(seed))
            if key in done:
                continue
            cfg = sweep_config(dataclasses.replace(base, seeds=Seeds(seed, seed, seed)), axis, value, backbone.L)
            _, acc = run_experiment(backbone, task, cfg)
            done[key] = acc
            if runs_csv is not None:
                new = not Path(runs_csv).is_file()
                with open(runs_csv, "a", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    if new:
                        w.writerow(["axis", "value", "seed", "test_acc"])
                    w.writerow([axis, key[0], key[1], repr(acc)])
    table = []
    for value in values:
        accs = [done[(str(value), int(s))] for s in seeds]
        table.append({axis: value, "mean_acc": float(np.mean(accs)), "n_seeds": len(accs)})
    return table


def write_sweep_csv(path, axis: str, table: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "mean_acc", "n_seeds"])
        for row in table:
            w.writerow([row[axis], repr(row["mean_acc"]), row["n_seeds"]])
