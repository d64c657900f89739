"""Gate-focused efficient tuning on the toy transformer.

Every base tensor is frozen; LoRA adapters (zero-initialised B) are attached
to the selected projections only (``gate_proj`` by default) and trained with
Adam on a synthetic task whose label is an AND of two marker tokens, i.e. a
multiplicative interaction of the kind SwiGLU's gate expresses directly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .adapt import LORA_A_SUFFIX, LORA_B_SUFFIX, LoraPair, ModuleSelection, parse_selection
from .errors import DivergenceError, PairingError, UsageError
from .naming import ROLE_ORDER, ModuleKey, ModuleRole
from .toy import (Batch, ToyConfig, ToyModel, cross_entropy, forward, init_model, loss_and_grads,
                  weight_name)

# synthetic task vocabulary
MARKER_1, MARKER_2 = 1, 2
CLASS_A, CLASS_B = 3, 4
QUERY = 5
FIRST_FILLER = 6
MIN_VOCAB = 8

GATE_ONLY = ModuleSelection(frozenset({ModuleRole.GATE}))


@dataclass
class GetPlan:
    selection: ModuleSelection
    rank: int
    alpha: float
    adapters: list[LoraPair]
    trainable: frozenset[str]

    def adapter_names(self) -> list[str]:
        return sorted(self.trainable)


def build_get_plan(model: ToyModel, sel: ModuleSelection = GATE_ONLY, rank: int = 8,
                   alpha: float = 16.0, seed: int = 0) -> GetPlan:
    """Attach one adapter per selected (layer, role); only adapter tensors are trainable."""
    if rank < 1:
        raise UsageError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    adapters = []
    for layer in range(model.cfg.n_layers):
        for role in ROLE_ORDER:
            key = ModuleKey(layer, role)
            if key not in sel:
                continue
            d_out, d_in = model.cfg.role_shape(role)
            bound = 1.0 / math.sqrt(d_in)
            a = rng.uniform(-bound, bound, size=(rank, d_in))
            adapters.append(LoraPair(key, a, np.zeros((d_out, rank)), alpha, weight_name(layer, role)))
    if not adapters:
        raise PairingError(f"selection {sel.label()} matches no module of a {model.cfg.n_layers}-layer model")
    trainable = frozenset(
        name for p in adapters for name in (p.target + LORA_A_SUFFIX, p.target + LORA_B_SUFFIX)
    )
    return GetPlan(sel, rank, alpha, adapters, trainable)


def synth_task(seed: int, vocab: int, seq_len: int, n_samples: int) -> Batch:
    """AND-of-markers classification read out as the next token after a query token.

    Exactly half the samples contain both markers (target ``CLASS_A``); the
    rest contain one marker or neither (target ``CLASS_B``). Only the final
    position is scored.
    """
    if vocab < MIN_VOCAB:
        raise UsageError(f"vocab must be >= {MIN_VOCAB}")
    if seq_len < 3:
        raise UsageError("seq_len must be >= 3 (two markers plus the query)")
    rng = np.random.default_rng(seed)
    body = seq_len - 1
    tokens = rng.integers(FIRST_FILLER, vocab, size=(n_samples, seq_len))
    tokens[:, -1] = QUERY
    labels = np.arange(n_samples) % 2 == 0
    rng.shuffle(labels)
    # negatives split evenly over {marker 1 only, marker 2 only, neither}
    neg_kind = rng.integers(0, 3, size=n_samples)
    for i in range(n_samples):
        pos = rng.permutation(body)[:2]
        if labels[i]:
            tokens[i, pos[0]], tokens[i, pos[1]] = MARKER_1, MARKER_2
        elif neg_kind[i] == 0:
            tokens[i, pos[0]] = MARKER_1
        elif neg_kind[i] == 1:
            tokens[i, pos[0]] = MARKER_2
    targets = np.zeros_like(tokens)
    targets[:, -1] = np.where(labels, CLASS_A, CLASS_B)
    mask = np.zeros(tokens.shape, dtype=bool)
    mask[:, -1] = True
    return Batch(tokens, targets, mask)


def task_label(sequence) -> int:
    seq = list(sequence)
    return CLASS_A if (MARKER_1 in seq and MARKER_2 in seq) else CLASS_B


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise UsageError("steps must be >= 1")
        if self.learning_rate < 0:
            raise UsageError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainTrace:
    losses: list[float]
    adapters: list[LoraPair]
    initial_loss: float
    final_loss: float
    eval_accuracy: float
    base_digest: str

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "loss"))
        for i, loss in enumerate(self.losses, 1):
            w.writerow((i, repr(loss)))
        return buf.getvalue()

    def summary(self) -> dict:
        return {"steps": len(self.losses), "initial_loss": self.initial_loss,
                "final_loss": self.final_loss, "eval_accuracy": self.eval_accuracy,
                "base_digest": self.base_digest}


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def dataset_loss(model: ToyModel, data: Batch, adapters=None, chunk: int = 512) -> float:
    total, count = 0.0, 0
    for start in range(0, len(data), chunk):
        part = data.take(slice(start, start + chunk))
        logits = forward(model, part.tokens, adapters)
        n = int(part.mask.sum())
        loss, _ = cross_entropy(logits, part.targets, part.mask)
        total += loss * n
        count += n
    return total / count


def accuracy(model: ToyModel, data: Batch, adapters=None, chunk: int = 512) -> float:
    hits = 0
    for start in range(0, len(data), chunk):
        part = data.take(slice(start, start + chunk))
        logits = forward(model, part.tokens, adapters)
        pred = logits[:, -1, :].argmax(axis=-1)
        hits += int(np.sum(pred == part.targets[:, -1]))
    return hits / len(data)


class _Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if c.optimizer == "sgd":
                p -= c.learning_rate * g
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1 ** self.t)
            vhat = v / (1 - c.beta2 ** self.t)
            p -= c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_eps)


def train(model: ToyModel, plan: GetPlan, data: Batch, cfg: TrainConfig,
          eval_data: Batch | None = None, progress=None) -> TrainTrace:
    """Train the plan's adapters; the model's own tensors are never written to."""
    digest = params_digest(model.params)
    adapters = [LoraPair(p.key, p.a.copy(), p.b.copy(), p.alpha, p.target) for p in plan.adapters]
    live = {}
    for p in adapters:
        live[p.target + LORA_A_SUFFIX] = p.a
        live[p.target + LORA_B_SUFFIX] = p.b
    opt = _Adam(cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    initial = dataset_loss(model, data, adapters)
    losses = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss, grads = loss_and_grads(model, data.take(idx), plan.trainable, adapters)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        losses.append(loss)
        opt.step(live, grads)
        for name, value in live.items():
            if not np.isfinite(value).all():
                raise DivergenceError(step, loss, f"adapter tensor {name}")
        if progress is not None and (step % 100 == 0 or step == cfg.steps):
            progress(step, loss)
    final = dataset_loss(model, data, adapters)
    if not math.isfinite(final):
        raise DivergenceError(cfg.steps, final)
    if params_digest(model.params) != digest:
        raise RuntimeError("base parameters changed during training")
    acc = accuracy(model, eval_data if eval_data is not None else data, adapters)
    return TrainTrace(losses, adapters, initial, final, acc, digest)


# --- parameter accounting ----------------------------------------------------------

QWEN25_7B_DIMS: dict[ModuleRole, tuple[int, int]] = {
    ModuleRole.Q: (3584, 3584), ModuleRole.K: (3584, 512), ModuleRole.V: (3584, 512),
    ModuleRole.O: (3584, 3584), ModuleRole.GATE: (3584, 18944), ModuleRole.UP: (3584, 18944),
    ModuleRole.DOWN: (18944, 3584),
}


def toy_dims(cfg: ToyConfig) -> dict[ModuleRole, tuple[int, int]]:
    """Per-role ``(d_in, d_out)``."""
    return {r: cfg.role_shape(r)[::-1] for r in ROLE_ORDER}


def lora_params(dims: Mapping[ModuleRole, tuple[int, int]], roles, rank: int) -> int:
    return sum(rank * (dims[r][0] + dims[r][1]) for r in roles)


def trainable_fraction_exact(dims: Mapping[ModuleRole, tuple[int, int]], sel: ModuleSelection,
                             rank: int = 8) -> Fraction:
    if rank < 1:
        raise UsageError("rank must be >= 1")
    if not sel.roles:
        raise UsageError("empty selection")
    missing = [r.value for r in ROLE_ORDER if r not in dims]
    if missing:
        raise UsageError(f"dims missing for {missing}")
    return Fraction(lora_params(dims, sel.roles, rank), lora_params(dims, ROLE_ORDER, rank))


def trainable_fraction(dims: Mapping[ModuleRole, tuple[int, int]], sel: ModuleSelection, rank: int = 8) -> float:
    """LoRA parameters on the selected roles over LoRA parameters on all seven, per layer."""
    return float(trainable_fraction_exact(dims, sel, rank))


# --- selection comparison -----------------------------------------------------------

CONTROL = None  # marker for the lr=0 control row in compare_selections


@dataclass
class ComparisonRow:
    selection: str
    final_loss: float
    eval_accuracy: float
    trainable_fraction: float
    initial_loss: float
    adapters: int = field(default=0)


def compare_selections(model: ToyModel, selections: Sequence[ModuleSelection | None], data: Batch,
                       cfg: TrainConfig, eval_data: Batch | None = None, rank: int = 8,
                       alpha: float = 16.0, threads: int = 1) -> list[ComparisonRow]:
    """One independent run per selection from the same model and seeds.

    ``None`` is an lr=0 control (gate adapters attached but never moved).
    """
    if not selections:
        raise UsageError("need at least one selection")
    dims = toy_dims(model.cfg)

    def run(sel):
        if sel is CONTROL:
            plan = build_get_plan(model, GATE_ONLY, rank, alpha, seed=cfg.seed)
            trace = train(model, plan, data, TrainConfig(**{**asdict(cfg), "learning_rate": 0.0}), eval_data)
            return ComparisonRow("control(lr=0)", trace.final_loss, trace.eval_accuracy, 0.0,
                                 trace.initial_loss, len(plan.adapters))
        plan = build_get_plan(model, sel, rank, alpha, seed=cfg.seed)
        trace = train(model, plan, data, cfg, eval_data)
        return ComparisonRow(sel.label(), trace.final_loss, trace.eval_accuracy,
                             trainable_fraction(dims, sel, rank), trace.initial_loss, len(plan.adapters))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(run, selections))


def comparison_csv(rows: list[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("selection", "final_loss", "eval_accuracy", "trainable_fraction", "initial_loss", "adapters"))
    for r in rows:
        w.writerow((r.selection, repr(r.final_loss), repr(r.eval_accuracy), repr(r.trainable_fraction),
                    repr(r.initial_loss), r.adapters))
    return buf.getvalue()


def comparison_json(rows: list[ComparisonRow]) -> str:
    return json.dumps({"schema": "gatescope.compare/1", "rows": [asdict(r) for r in rows]},
                      indent=2, sort_keys=True) + "\n"


# --- desk-scale experiment ------------------------------------------------------------

@dataclass(frozen=True)
class GetExperiment:
    """Everything that determines one GET run."""

    model: ToyConfig = field(default_factory=ToyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    modules: str = "gate"
    layers: str | None = None
    rank: int = 8
    alpha: float = 16.0
    seq_len: int = 6
    n_train: int = 8192
    n_eval: int = 1024
    data_seed: int = 1
    eval_seed: int = 2

    def selection(self) -> ModuleSelection:
        return parse_selection(self.modules, self.layers)

    def datasets(self) -> tuple[Batch, Batch]:
        return (synth_task(self.data_seed, self.model.vocab, self.seq_len, self.n_train),
                synth_task(self.eval_seed, self.model.vocab, self.seq_len, self.n_eval))


def run_experiment(exp: GetExperiment, progress=None):
    model = init_model(exp.model)
    plan = build_get_plan(model, exp.selection(), exp.rank, exp.alpha, seed=exp.train.seed)
    data, held_out = exp.datasets()
    trace = train(model, plan, data, exp.train, held_out, progress)
    return model, plan, trace
