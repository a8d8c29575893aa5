"""Episodic replay memory and the two-phase consolidation trainer.

Each stage trains the current task with replayed notes mixed into every
batch (phase 1: cross-entropy on everything except the alignment layers),
and from stage 2 pulls the aligned embeddings of replayed notes back
toward where the previous-stage encoder put them (phase 2: consolidation
on the alignment layers only, against a frozen snapshot). By default one
phase-2 step follows every phase-1 step; a task-end schedule is available
as a config switch.
"""

from __future__ import annotations

import math

import numpy as np
from dataclasses import dataclass, replace

from .errors import ConfigError, DivergenceError, MemoryWriteError, StageError
from .model import DualEncoderModel, pack_notes
from .numeric import RngStream, frozen_slots, sgd_step, thawed_slots
from .stream import Task

NAN = float("nan")


@dataclass(frozen=True)
class E2mcConfig:
    """Training hyperparameters. Learning-rate and batch defaults follow
    the reference setting; epochs_per_task is ours."""

    alpha: float = 1.0
    beta: float = 1.0
    lr_phase1: float = 1e-3
    # entity-encoder slots step at lr_phase1 * lr_entity_scale: the entity
    # channel can stay near its consolidated geometry while the char channel
    # takes the large steps it needs
    lr_entity_scale: float = 1.0
    lr_align_context: float = 1e-4
    lr_align_entity: float = 2e-5
    batch_train: int = 50
    batch_phase2: int = 32
    replay_per_batch: int = 16
    budget: int = 128
    epochs_per_task: int = 3
    phase2_schedule: str = "interleaved"

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha/beta must be >= 0, got {self.alpha}, {self.beta}")
        for name in ("lr_phase1", "lr_align_context", "lr_align_entity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lr_entity_scale < 0:
            raise ConfigError(
                f"lr_entity_scale must be >= 0, got {self.lr_entity_scale}"
            )
        for name in ("batch_train", "batch_phase2", "epochs_per_task"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.replay_per_batch < 0 or self.budget < 0:
            raise ConfigError("replay_per_batch and budget must be >= 0")
        if self.phase2_schedule not in ("interleaved", "task-end"):
            raise ConfigError(
                f"phase2_schedule must be 'interleaved' or 'task-end', "
                f"got {self.phase2_schedule!r}"
            )


class TrainStreams:
    """Named random substreams so independent consumers stay independent."""

    def __init__(self, root: RngStream):
        self.shuffle = root.child("shuffle")
        self.replay = root.child("replay")
        self.memory = root.child("memory")
        self.phase2 = root.child("phase2")
        self.expand = root.child("expand")
        self.fisher = root.child("fisher")
        self.ref = root.child("ref")


# ---------------------------------------------------------------------------
# episodic memory


class EpisodicMemory:
    """Per-task note stores under one global budget per task."""

    def __init__(self, budget: int):
        if budget < 0:
            raise ConfigError(f"memory budget must be >= 0, got {budget}")
        self.budget = budget
        self._store: dict[int, tuple] = {}

    def write(self, stage: int, notes, rng: RngStream) -> None:
        """Keep min(budget, len(notes)) notes of a finished stage.

        Each stage may be written once; the sample is uniform without
        replacement. A zero budget or empty note list stores nothing and
        consumes no randomness.
        """
        if stage in self._store:
            raise MemoryWriteError(f"memory for stage {stage} was already written")
        notes = list(notes)
        if self.budget == 0 or not notes:
            self._store[stage] = ()
        elif len(notes) <= self.budget:
            self._store[stage] = tuple(notes)
        else:
            idx = rng.choice(len(notes), self.budget, replace=False)
            self._store[stage] = tuple(notes[i] for i in sorted(idx))

    def notes(self) -> tuple:
        return tuple(n for k in sorted(self._store) for n in self._store[k])

    @property
    def size(self) -> int:
        return sum(len(v) for v in self._store.values())

    def counts(self) -> dict[int, int]:
        return {k: len(v) for k, v in sorted(self._store.items())}

    def sample(self, k: int, rng: RngStream) -> list:
        """Uniform sample of up to k stored notes; empty pool gives []."""
        pool = self.notes()
        k = min(k, len(pool))
        if k <= 0:
            return []
        idx = rng.choice(len(pool), k, replace=False)
        return [pool[i] for i in idx]


def write_memory(memory: EpisodicMemory, stage: int, notes, rng: RngStream) -> None:
    memory.write(stage, notes, rng)


def sample_replay_batch(memory: EpisodicMemory, k: int, rng: RngStream) -> list:
    return memory.sample(k, rng)


# ---------------------------------------------------------------------------
# consolidation


def consolidation_loss(model: DualEncoderModel, snapshot: DualEncoderModel, notes):
    """Mean squared drift of aligned embeddings against the snapshot.

    Returns (omega_c, omega_s): per-channel means over the batch of
    ||z - z_snapshot||^2. A model without an entity channel reports 0
    for omega_s, as do notes without entities.
    """
    if snapshot is None:
        raise StageError("consolidation requires a snapshot of the previous stage")
    packed = pack_notes(notes)
    cur = model.encode_batch(packed, keep_ctx=False)
    prev = snapshot.encode_batch(packed, keep_ctx=False)
    dc = cur.z_c - prev.z_c
    omega_c = float((dc * dc).sum(axis=1).mean())
    if model.config.use_entities:
        ds = cur.z_s - prev.z_s
        omega_s = float((ds * ds).sum(axis=1).mean())
    else:
        omega_s = 0.0
    return omega_c, omega_s


# ---------------------------------------------------------------------------
# the two phases


def stage_config(config: E2mcConfig, stage: int) -> E2mcConfig:
    """Effective hyperparameters for a stage.

    lr_entity_scale kicks in from the second stage: during the first
    there is no prior entity knowledge to preserve, so the entity
    encoder trains at the full rate.
    """
    if stage > 1 or config.lr_entity_scale == 1.0:
        return config
    return replace(config, lr_entity_scale=1.0)


def apply_grad_step(
    model: DualEncoderModel,
    config: E2mcConfig,
    preserve_rows: np.ndarray | None = None,
) -> None:
    """Consume accumulated gradients: one SGD step on every non-alignment
    slot, with the entity encoder stepping at its scaled rate.

    preserve_rows selects which entity-embedding rows the scale applies
    to (vocabulary already trained in earlier stages); rows outside it
    step at the full rate so new vocabulary keeps full plasticity. None
    scales the whole table.
    """
    lr = config.lr_phase1
    scale = config.lr_entity_scale
    with frozen_slots(model.alignment_slots()):
        if scale == 1.0 or not model.config.use_entities:
            sgd_step(model.all_slots(), lr)
            return
        ent = model.entity_encoder_slots()
        skip = {s.name for s in ent}
        rest = [s for s in model.all_slots() if s.name not in skip]
        sgd_step(rest, lr)
        emb = model.slot("ent_emb")
        lstm = [s for s in ent if s.name != "ent_emb"]
        sgd_step(lstm, lr * scale)
        if emb.frozen:
            return
        if not np.all(np.isfinite(emb.grad)):
            raise DivergenceError(f"non-finite gradient in slot {emb.name!r}")
        if preserve_rows is None:
            emb.value -= (lr * scale) * emb.grad
        else:
            row_lr = np.full((emb.value.shape[0], 1), lr)
            row_lr[preserve_rows] = lr * scale
            emb.value -= row_lr * emb.grad
        emb.zero_grad()


def phase1_step(
    model: DualEncoderModel,
    notes,
    config: E2mcConfig,
    preserve_rows: np.ndarray | None = None,
) -> float:
    """One SGD step on mean cross-entropy; alignment layers do not move."""
    packed = pack_notes(notes)
    model.zero_grads()
    loss, enc, dlogits = model.loss_batch(packed)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss!r}")
    model.backward_batch(enc, dlogits)
    apply_grad_step(model, config, preserve_rows)
    return loss


def phase2_step(model, snapshot, notes, config: E2mcConfig):
    """One consolidation step on the alignment layers only.

    Returns the pre-step (omega_c, omega_s) means over the batch.
    """
    if snapshot is None:
        raise StageError("phase 2 requires a snapshot of the previous stage")
    packed = pack_notes(notes)
    cur = model.encode_batch(packed, keep_ctx=False)
    prev = snapshot.encode_batch(packed, keep_ctx=False)
    batch = packed.size

    align_c = model.slot("align_c")
    align_c.zero_grad()  # discard any phase-1 leftovers
    dc = cur.z_c - prev.z_c
    omega_c = float((dc * dc).sum(axis=1).mean())
    align_c.grad += cur.h_c.T @ ((2.0 * config.alpha / batch) * dc)
    with thawed_slots([align_c]):
        sgd_step([align_c], config.lr_align_context)

    omega_s = 0.0
    if model.config.use_entities:
        align_s = model.slot("align_s")
        align_s.zero_grad()
        ds = cur.z_s - prev.z_s
        omega_s = float((ds * ds).sum(axis=1).mean())
        align_s.grad += cur.fused.T @ ((2.0 * config.beta / batch) * ds)
        with thawed_slots([align_s]):
            sgd_step([align_s], config.lr_align_entity)
    return omega_c, omega_s


# ---------------------------------------------------------------------------
# stage trainer


def train_task(
    model: DualEncoderModel,
    memory: EpisodicMemory,
    task: Task,
    stage: int,
    config: E2mcConfig,
    streams: TrainStreams,
    snapshot: DualEncoderModel | None,
    observer=None,
    log_row=None,
    run_phase2: bool = True,
    preserve_rows: np.ndarray | None = None,
):
    """Train one stage (1-based) and return (new_snapshot, diagnostics).

    diagnostics carries the mean consolidation losses and, when a probe
    batch exists, the probe's mean omega taken just before and just after
    the stage's phase-2 steps. The probe is a replay sample frozen at
    stage start and never used as a training batch, so the before/after
    pair isolates what the consolidation steps themselves do.
    """
    config.validate()
    if stage < 1:
        raise StageError(f"stage must be >= 1, got {stage}")
    config = stage_config(config, stage)
    phase2_on = (
        run_phase2
        and stage > 1
        and (config.alpha != 0.0 or config.beta != 0.0)
    )
    if phase2_on and snapshot is None:
        raise StageError(f"stage {stage} needs the previous stage's snapshot")

    model.expand_classifier(len(task.label_ids), streams.expand)
    train = list(task.train)
    n = len(train)

    probe = None
    if phase2_on and memory.size > 0:
        probe = memory.sample(config.batch_phase2, streams.phase2)

    diagnostics = {
        "omega_probe_before": NAN,
        "omega_probe_after": NAN,
        "mean_omega_c": NAN,
        "mean_omega_s": NAN,
    }
    omega_sums = [0.0, 0.0, 0]
    probe_sums = [0.0, 0.0, 0]

    def probe_omega() -> float:
        oc, os_ = consolidation_loss(model, snapshot, probe)
        return config.alpha * oc + config.beta * os_

    step_idx = 0
    for epoch in range(config.epochs_per_task):
        order = streams.shuffle.permutation(n)
        for start in range(0, n, config.batch_train):
            batch = [train[i] for i in order[start : start + config.batch_train]]
            replay = sample_replay_batch(memory, config.replay_per_batch, streams.replay)
            full = batch + replay
            if observer:
                observer("pre-phase1", stage, model)
            loss = phase1_step(model, full, config, preserve_rows)
            if observer:
                observer("post-phase1", stage, model)
            if log_row:
                log_row(stage, epoch, step_idx, 1, loss, NAN, NAN)

            if phase2_on and config.phase2_schedule == "interleaved":
                # half replayed notes (anchor the space where past
                # knowledge lives), half current-task notes (cover the
                # states that are actually moving this stage)
                p2_batch = memory.sample(config.batch_phase2 // 2, streams.phase2)
                if len(p2_batch) < config.batch_phase2:
                    fill = min(config.batch_phase2 - len(p2_batch), len(batch))
                    idx = streams.phase2.choice(len(batch), fill, replace=False)
                    p2_batch += [batch[i] for i in idx]
                if observer:
                    observer("pre-phase2", stage, model)
                if probe:
                    probe_sums[0] += probe_omega()
                oc, os_ = phase2_step(model, snapshot, p2_batch, config)
                if probe:
                    probe_sums[1] += probe_omega()
                    probe_sums[2] += 1
                if observer:
                    observer("post-phase2", stage, model)
                if log_row:
                    log_row(stage, epoch, step_idx, 2, NAN, oc, os_)
                omega_sums[0] += oc
                omega_sums[1] += os_
                omega_sums[2] += 1
            step_idx += 1

    if phase2_on and config.phase2_schedule == "task-end":
        pool = list(memory.notes()) + train
        order = streams.phase2.permutation(len(pool))
        if probe:
            probe_sums[0] += probe_omega()
        for step, start in enumerate(range(0, len(pool), config.batch_phase2)):
            p2_batch = [pool[i] for i in order[start : start + config.batch_phase2]]
            if observer:
                observer("pre-phase2", stage, model)
            oc, os_ = phase2_step(model, snapshot, p2_batch, config)
            if observer:
                observer("post-phase2", stage, model)
            if log_row:
                log_row(stage, config.epochs_per_task, step, 2, NAN, oc, os_)
            omega_sums[0] += oc
            omega_sums[1] += os_
            omega_sums[2] += 1
        if probe:
            probe_sums[1] += probe_omega()
            probe_sums[2] += 1

    if omega_sums[2]:
        diagnostics["mean_omega_c"] = omega_sums[0] / omega_sums[2]
        diagnostics["mean_omega_s"] = omega_sums[1] / omega_sums[2]
    if probe_sums[2]:
        diagnostics["omega_probe_before"] = probe_sums[0] / probe_sums[2]
        diagnostics["omega_probe_after"] = probe_sums[1] / probe_sums[2]

    write_memory(memory, stage, task.train, streams.memory)
    return model.snapshot(), diagnostics
