"""Reference strategies the engine is compared against.

``finetune`` is the lower bound (sequential cross-entropy, nothing else),
``multitask`` the upper bound (each stage retrains on the union of all
seen tasks), ``ewc`` penalises movement of parameters that mattered for
the previous task, and ``agem`` projects gradients that conflict with a
replay reference gradient. The replay-plus-consolidation engine and its
ablations are exposed through the same registry.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .continual import (
    E2mcConfig,
    EpisodicMemory,
    TrainStreams,
    apply_grad_step,
    stage_config,
    train_task,
)
from .errors import ConfigError, DivergenceError
from .model import DualEncoderModel, ModelConfig, pack_notes
from .numeric import RngStream
from .stream import TaskStream

STRATEGY_NAMES = (
    "finetune",
    "multitask",
    "ewc",
    "agem",
    "e2mc",
    "e2mc-no-entity",
    "e2mc-no-attention",
    "e2mc-no-align",
)

# recognised names whose methods are intentionally not implemented here
RESERVED_NAMES = {
    "gem": "per-task gradient constraints",
    "mbpa++": "episodic retrieval with local adaptation",
}


def check_strategy_name(name: str) -> None:
    if name in STRATEGY_NAMES:
        return
    if name in RESERVED_NAMES:
        raise ConfigError(
            f"strategy {name!r} ({RESERVED_NAMES[name]}) is recognised but not "
            f"implemented; available strategies: {', '.join(STRATEGY_NAMES)}"
        )
    raise ConfigError(
        f"unknown strategy {name!r}; available strategies: {', '.join(STRATEGY_NAMES)}"
    )


# ---------------------------------------------------------------------------
# shared step helpers


def _compute_grads(model: DualEncoderModel, notes) -> float:
    packed = pack_notes(notes)
    model.zero_grads()
    loss, enc, dlogits = model.loss_batch(packed)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss!r}")
    model.backward_batch(enc, dlogits)
    return loss


def _plain_step(
    model: DualEncoderModel, notes, config, preserve_rows=None, grad_hook=None
) -> float:
    """Cross-entropy SGD step; alignment layers stay at their identity init."""
    loss = _compute_grads(model, notes)
    if grad_hook is not None:
        grad_hook()
    apply_grad_step(model, config, preserve_rows)
    return loss


def flatten_grads(slots) -> np.ndarray:
    return np.concatenate([s.grad.ravel() for s in slots])


def load_grads(slots, flat: np.ndarray) -> None:
    offset = 0
    for s in slots:
        n = s.grad.size
        s.grad[...] = flat[offset : offset + n].reshape(s.grad.shape)
        offset += n


# ---------------------------------------------------------------------------
# EWC penalty and A-GEM projection


def ewc_penalty(model: DualEncoderModel, fisher: dict, anchor: dict, lam: float) -> float:
    """(lam/2) * sum_i F_i (theta_i - theta*_i)^2 over anchored parameters.

    Classifier columns added after the anchor was taken carry no penalty.
    """
    total = 0.0
    for name, f in fisher.items():
        value = model.slot(name).value
        a = anchor[name]
        if value.shape != a.shape:  # classifier has grown since the anchor
            value = value[: a.shape[0], : a.shape[1]]
        d = value - a
        total += float((f * d * d).sum())
    return 0.5 * lam * total


def ewc_penalty_grads(model: DualEncoderModel, fisher: dict, anchor: dict, lam: float) -> None:
    """Accumulate lam * F * (theta - theta*) into the anchored slots' grads."""
    for name, f in fisher.items():
        slot = model.slot(name)
        a = anchor[name]
        if slot.value.shape != a.shape:
            rows, cols = a.shape
            slot.grad[:rows, :cols] += lam * f * (slot.value[:rows, :cols] - a)
        else:
            slot.grad += lam * f * (slot.value - a)


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project g onto the half-space where it does not conflict with g_ref.

    If g . g_ref >= 0 (or g_ref is zero), g is returned unchanged;
    otherwise the conflicting component along g_ref is removed.
    """
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ConfigError(f"gradient shapes differ: {g.shape} vs {g_ref.shape}")
    denom = float(g_ref @ g_ref)
    if denom <= 0.0:
        return g
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    return g - (dot / denom) * g_ref


# ---------------------------------------------------------------------------
# strategies


class Strategy:
    """One model trained stage by stage over a task stream."""

    name = "strategy"

    def __init__(
        self,
        stream: TaskStream,
        model_config: ModelConfig,
        train_config: E2mcConfig,
        seed: int,
    ):
        self.stream = stream
        self.config = train_config
        self.seed = seed
        root = RngStream(seed)
        self.model = DualEncoderModel(
            stream.char_vocab.size, stream.lexicon.size, model_config, root.child("init")
        )
        self.streams = TrainStreams(root.child("train"))

    def train_stage(self, stage: int, observer=None, log_row=None) -> dict:
        raise NotImplementedError

    def _preserve_rows(self, stage: int) -> np.ndarray | None:
        """Entity-embedding rows already trained before this stage."""
        if (
            stage <= 1
            or self.config.lr_entity_scale == 1.0
            or not self.model.config.use_entities
        ):
            return None
        ids = sorted(
            {
                i
                for t in self.stream.tasks[: stage - 1]
                for n in t.train
                for i in n.entity_ids
            }
        )
        return np.array(ids, dtype=int) if ids else None

    def _epoch_batches(self, notes):
        """Yield (epoch, batch) with per-epoch shuffles from the shared stream."""
        n = len(notes)
        for epoch in range(self.config.epochs_per_task):
            order = self.streams.shuffle.permutation(n)
            for start in range(0, n, self.config.batch_train):
                yield epoch, [notes[i] for i in order[start : start + self.config.batch_train]]


class E2mcStrategy(Strategy):
    """Replay plus two-phase consolidation (the engine under study)."""

    name = "e2mc"

    def __init__(self, stream, model_config, train_config, seed, run_phase2=True):
        super().__init__(stream, model_config, train_config, seed)
        self.memory = EpisodicMemory(train_config.budget)
        self.snapshot = None
        self.run_phase2 = run_phase2

    def train_stage(self, stage, observer=None, log_row=None) -> dict:
        task = self.stream.tasks[stage - 1]
        self.snapshot, diag = train_task(
            self.model,
            self.memory,
            task,
            stage,
            self.config,
            self.streams,
            self.snapshot,
            observer=observer,
            log_row=log_row,
            run_phase2=self.run_phase2,
            preserve_rows=self._preserve_rows(stage),
        )
        return diag


class FinetuneStrategy(E2mcStrategy):
    """Sequential cross-entropy only: no replay, no consolidation."""

    name = "finetune"

    def __init__(self, stream, model_config, train_config, seed):
        super().__init__(
            stream,
            model_config,
            replace(train_config, alpha=0.0, beta=0.0, budget=0),
            seed,
            run_phase2=False,
        )


class MultitaskStrategy(Strategy):
    """Upper bound: each stage retrains on the union of all seen train sets."""

    name = "multitask"

    def train_stage(self, stage, observer=None, log_row=None) -> dict:
        task = self.stream.tasks[stage - 1]
        self.model.expand_classifier(len(task.label_ids), self.streams.expand)
        union = [n for t in self.stream.tasks[:stage] for n in t.train]
        cfg = stage_config(self.config, stage)
        keep = self._preserve_rows(stage)
        for step, (epoch, batch) in enumerate(self._epoch_batches(union)):
            if observer:
                observer("pre-phase1", stage, self.model)
            loss = _plain_step(self.model, batch, cfg, keep)
            if observer:
                observer("post-phase1", stage, self.model)
            if log_row:
                log_row(stage, epoch, step, 1, loss, float("nan"), float("nan"))
        return {}


class EwcStrategy(Strategy):
    """Quadratic penalty toward the previous task's parameters, weighted by
    a diagonal Fisher estimate."""

    name = "ewc"

    def __init__(self, stream, model_config, train_config, seed,
                 lam: float = 100.0, sample_size: int = 1024):
        super().__init__(stream, model_config, train_config, seed)
        if lam < 0:
            raise ConfigError(f"ewc lambda must be >= 0, got {lam}")
        if sample_size < 1:
            raise ConfigError(f"ewc sample size must be >= 1, got {sample_size}")
        self.lam = lam
        self.sample_size = sample_size
        self.fisher: dict | None = None
        self.anchor: dict | None = None

    def _hook(self):
        ewc_penalty_grads(self.model, self.fisher, self.anchor, self.lam)

    def train_stage(self, stage, observer=None, log_row=None) -> dict:
        task = self.stream.tasks[stage - 1]
        self.model.expand_classifier(len(task.label_ids), self.streams.expand)
        train = list(task.train)
        hook = self._hook if self.fisher is not None else None
        cfg = stage_config(self.config, stage)
        keep = self._preserve_rows(stage)
        for step, (epoch, batch) in enumerate(self._epoch_batches(train)):
            if observer:
                observer("pre-phase1", stage, self.model)
            loss = _plain_step(self.model, batch, cfg, keep, grad_hook=hook)
            if observer:
                observer("post-phase1", stage, self.model)
            if log_row:
                log_row(stage, epoch, step, 1, loss, float("nan"), float("nan"))
        self._capture(train)
        return {}

    def _capture(self, train) -> None:
        """Estimate the Fisher diagonal as the mean squared log-likelihood
        gradient over a sample of the finished task, and anchor there."""
        slots = self.model.non_alignment_slots()
        k = min(self.sample_size, len(train))
        idx = self.streams.fisher.choice(len(train), k, replace=False)
        fisher = {s.name: np.zeros_like(s.value) for s in slots}
        for i in idx:
            _compute_grads(self.model, [train[i]])
            for s in slots:
                fisher[s.name] += s.grad**2
        self.model.zero_grads()
        for name in fisher:
            fisher[name] /= k
        self.fisher = fisher
        self.anchor = {s.name: s.value.copy() for s in slots}


class AgemStrategy(Strategy):
    """Gradient projection against a replayed reference batch."""

    name = "agem"

    def __init__(self, stream, model_config, train_config, seed):
        super().__init__(stream, model_config, train_config, seed)
        self.memory = EpisodicMemory(train_config.budget)

    def train_stage(self, stage, observer=None, log_row=None) -> dict:
        task = self.stream.tasks[stage - 1]
        self.model.expand_classifier(len(task.label_ids), self.streams.expand)
        train = list(task.train)
        slots = self.model.non_alignment_slots()
        cfg = stage_config(self.config, stage)
        keep = self._preserve_rows(stage)
        for step, (epoch, batch) in enumerate(self._epoch_batches(train)):
            if observer:
                observer("pre-phase1", stage, self.model)
            loss = _compute_grads(self.model, batch)
            if self.memory.size > 0:
                g = flatten_grads(slots)
                ref = self.memory.sample(
                    min(self.config.batch_train, self.memory.size), self.streams.ref
                )
                _compute_grads(self.model, ref)
                g_ref = flatten_grads(slots)
                load_grads(slots, agem_project(g, g_ref))
            apply_grad_step(self.model, cfg, keep)
            if observer:
                observer("post-phase1", stage, self.model)
            if log_row:
                log_row(stage, epoch, step, 1, loss, float("nan"), float("nan"))
        self.memory.write(stage, task.train, self.streams.memory)
        return {}


def build_strategy(
    name: str,
    stream: TaskStream,
    model_config: ModelConfig,
    train_config: E2mcConfig,
    seed: int,
    ewc_lambda: float = 100.0,
    ewc_sample: int = 1024,
) -> Strategy:
    """Construct a strategy by its registry name."""
    check_strategy_name(name)
    if name == "finetune":
        s = FinetuneStrategy(stream, model_config, train_config, seed)
    elif name == "multitask":
        s = MultitaskStrategy(stream, model_config, train_config, seed)
    elif name == "ewc":
        s = EwcStrategy(stream, model_config, train_config, seed,
                        lam=ewc_lambda, sample_size=ewc_sample)
    elif name == "agem":
        s = AgemStrategy(stream, model_config, train_config, seed)
    elif name == "e2mc":
        s = E2mcStrategy(stream, model_config, train_config, seed)
    elif name == "e2mc-no-entity":
        s = E2mcStrategy(
            stream, replace(model_config, use_entities=False), train_config, seed
        )
    elif name == "e2mc-no-attention":
        s = E2mcStrategy(
            stream, replace(model_config, use_attention=False), train_config, seed
        )
    else:  # e2mc-no-align: alignment stays identity, no consolidation phase
        s = E2mcStrategy(stream, model_config, train_config, seed, run_phase2=False)
    s.name = name
    return s
