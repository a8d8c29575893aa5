"""Finite-difference verification of every analytic gradient.

Layer probes assemble the numeric primitives into small losses with their
own hand-written backward chains; model probes run the full dual-channel
network through its real forward/backward. Both are compared entry by
entry against central differences by ``finite_diff_check``.

Probes use tiny shapes and ragged masks (including a note with no
entities) so the padding and zero-entity paths are exercised, not just
the dense happy path.
"""

from __future__ import annotations

import numpy as np

from .model import DualEncoderModel, ModelConfig, pack_notes
from .numeric import (
    GradCheckReport,
    ParamSlot,
    RngStream,
    cosine_attention_backward,
    cosine_attention_forward,
    finite_diff_check,
    linear_backward,
    linear_forward,
    lstm_sequence_backward,
    lstm_sequence_forward,
    masked_max_pool,
    masked_max_pool_backward,
    masked_mean_pool,
    masked_mean_pool_backward,
    softmax_cross_entropy_batch,
)
from .stream import Note


def _slot(name: str, shape: tuple[int, int], rng: RngStream, scale: float = 0.5) -> ParamSlot:
    return ParamSlot(name, scale * (2.0 * rng.random(shape) - 1.0))


def _ragged_mask(batch: int, steps: int, lengths) -> np.ndarray:
    mask = np.zeros((batch, steps))
    for i, n in enumerate(lengths):
        mask[i, :n] = 1.0
    return mask


# ---------------------------------------------------------------------------
# layer probes


class LinearXentProbe:
    """x @ W + b -> mean cross-entropy."""

    name = "linear-xent"

    def __init__(self, rng: RngStream):
        self.w = _slot("w", (4, 3), rng)
        self.b = _slot("b", (1, 3), rng)
        self.x = 2.0 * rng.random((2, 4)) - 1.0
        self.labels = np.array([2, 0])

    def param_slots(self):
        return [self.w, self.b]

    def loss(self) -> float:
        logits = linear_forward(self.x, self.w, self.b)
        losses, _, _ = softmax_cross_entropy_batch(logits, self.labels)
        return float(losses.mean())

    def compute_grads(self) -> None:
        for s in self.param_slots():
            s.zero_grad()
        logits = linear_forward(self.x, self.w, self.b)
        losses, grad, _ = softmax_cross_entropy_batch(logits, self.labels)
        linear_backward(grad / len(self.labels), self.x, self.w, self.b)


class SoftmaxXentProbe:
    """Logits held directly as the parameter."""

    name = "softmax-xent"

    def __init__(self, rng: RngStream):
        self.logits = _slot("logits", (3, 5), rng, scale=2.0)
        self.labels = np.array([4, 0, 2])

    def param_slots(self):
        return [self.logits]

    def loss(self) -> float:
        losses, _, _ = softmax_cross_entropy_batch(self.logits.value, self.labels)
        return float(losses.mean())

    def compute_grads(self) -> None:
        self.logits.zero_grad()
        _, grad, _ = softmax_cross_entropy_batch(self.logits.value, self.labels)
        self.logits.grad += grad / len(self.labels)


class LstmPoolXentProbe:
    """One LSTM direction, mean or max pool over masked states, linear, CE."""

    def __init__(self, rng: RngStream, reverse: bool, pool: str):
        self.name = f"lstm-{'bwd' if reverse else 'fwd'}-{pool}-xent"
        self.reverse = reverse
        self.pool = pool
        hid, dim, batch, steps = 3, 2, 3, 5
        self.w = _slot("w", (dim, 4 * hid), rng)
        self.u = _slot("u", (hid, 4 * hid), rng)
        self.b = _slot("b", (1, 4 * hid), rng, scale=0.2)
        self.out = _slot("out", (hid, 4), rng)
        self.x = 2.0 * rng.random((batch, steps, dim)) - 1.0
        self.mask = _ragged_mask(batch, steps, (5, 3, 1))
        self.labels = np.array([1, 3, 0])

    def param_slots(self):
        return [self.w, self.u, self.b, self.out]

    def _forward(self):
        states, _, cache = lstm_sequence_forward(
            self.x, self.mask, self.w, self.u, self.b, reverse=self.reverse
        )
        if self.pool == "max":
            pooled, idx = masked_max_pool(states, self.mask)
        else:
            pooled, idx = masked_mean_pool(states, self.mask), None
        logits = linear_forward(pooled, self.out)
        losses, grad, _ = softmax_cross_entropy_batch(logits, self.labels)
        return states, cache, pooled, idx, float(losses.mean()), grad / len(self.labels)

    def loss(self) -> float:
        return self._forward()[4]

    def compute_grads(self) -> None:
        for s in self.param_slots():
            s.zero_grad()
        states, cache, pooled, idx, _, dlogits = self._forward()
        dpooled = linear_backward(dlogits, pooled, self.out)
        if self.pool == "max":
            dstates = masked_max_pool_backward(dpooled, idx, states.shape[1])
        else:
            dstates = masked_mean_pool_backward(dpooled, self.mask)
        lstm_sequence_backward(dstates, None, self.x, self.w, self.u, self.b, cache)


class AttentionXentProbe:
    """LSTM states fused by cosine attention against a learned query."""

    name = "attention-xent"

    def __init__(self, rng: RngStream):
        hid, dim, batch, steps = 3, 2, 3, 4
        self.w = _slot("w", (dim, 4 * hid), rng)
        self.u = _slot("u", (hid, 4 * hid), rng)
        self.b = _slot("b", (1, 4 * hid), rng, scale=0.2)
        self.query = _slot("query", (batch, hid), rng)
        self.out = _slot("out", (hid, 3), rng)
        self.x = 2.0 * rng.random((batch, steps, dim)) - 1.0
        self.mask = _ragged_mask(batch, steps, (4, 2, 1))
        self.labels = np.array([0, 2, 1])

    def param_slots(self):
        return [self.w, self.u, self.b, self.query, self.out]

    def _forward(self):
        states, _, cache = lstm_sequence_forward(self.x, self.mask, self.w, self.u, self.b)
        fused, _, attn_cache = cosine_attention_forward(states, self.mask, self.query.value)
        logits = linear_forward(fused, self.out)
        losses, grad, _ = softmax_cross_entropy_batch(logits, self.labels)
        return cache, fused, attn_cache, float(losses.mean()), grad / len(self.labels)

    def loss(self) -> float:
        return self._forward()[3]

    def compute_grads(self) -> None:
        for s in self.param_slots():
            s.zero_grad()
        cache, fused, attn_cache, _, dlogits = self._forward()
        dfused = linear_backward(dlogits, fused, self.out)
        dstates, dquery = cosine_attention_backward(dfused, None, attn_cache)
        self.query.grad += dquery
        lstm_sequence_backward(dstates, None, self.x, self.w, self.u, self.b, cache)


class EmbeddingPoolXentProbe:
    """Gathered embedding rows, mean pool, linear, CE (checks grad scatter)."""

    name = "embedding-xent"

    def __init__(self, rng: RngStream):
        vocab, dim, batch, steps = 6, 3, 3, 4
        self.emb = _slot("emb", (vocab, dim), rng)
        self.out = _slot("out", (dim, 3), rng)
        # repeated ids inside and across rows make the scatter accumulate
        self.ids = np.array([[1, 2, 1, 0], [3, 3, 0, 0], [5, 0, 0, 0]])
        self.mask = _ragged_mask(batch, steps, (4, 2, 1))
        self.labels = np.array([2, 0, 1])

    def param_slots(self):
        return [self.emb, self.out]

    def _forward(self):
        x = self.emb.value[self.ids]
        pooled = masked_mean_pool(x, self.mask)
        logits = linear_forward(pooled, self.out)
        losses, grad, _ = softmax_cross_entropy_batch(logits, self.labels)
        return pooled, float(losses.mean()), grad / len(self.labels)

    def loss(self) -> float:
        return self._forward()[1]

    def compute_grads(self) -> None:
        for s in self.param_slots():
            s.zero_grad()
        pooled, _, dlogits = self._forward()
        dpooled = linear_backward(dlogits, pooled, self.out)
        dx = masked_mean_pool_backward(dpooled, self.mask)
        np.add.at(self.emb.grad, self.ids, dx)


class ConsolidationProbe:
    """Mean squared drift of x @ W from a fixed target, the phase-2 loss."""

    name = "consolidation-align"

    def __init__(self, rng: RngStream):
        dim, batch = 4, 3
        self.w = _slot("w", (dim, dim), rng)
        self.x = 2.0 * rng.random((batch, dim)) - 1.0
        self.target = 2.0 * rng.random((batch, dim)) - 1.0
        self.weight = 0.7

    def param_slots(self):
        return [self.w]

    def loss(self) -> float:
        d = self.x @ self.w.value - self.target
        return self.weight * float((d * d).sum(axis=1).mean())

    def compute_grads(self) -> None:
        self.w.zero_grad()
        d = self.x @ self.w.value - self.target
        self.w.grad += self.x.T @ ((2.0 * self.weight / self.x.shape[0]) * d)


# ---------------------------------------------------------------------------
# full-model probes


def _tiny_notes(rng: RngStream, char_vocab: int, ent_vocab: int, n_classes: int):
    """Three fabricated notes: ragged char lengths, one with no entities."""
    specs = [(7, 3), (4, 2), (5, 0)]
    notes = []
    for i, (n_chars, n_ents) in enumerate(specs):
        char_ids = tuple(int(c) for c in rng.integers(2, char_vocab, size=n_chars))
        ent_ids = tuple(int(e) for e in rng.integers(0, ent_vocab, size=n_ents))
        notes.append(
            Note(
                text="x" * n_chars,
                entities=tuple("e" for _ in ent_ids),
                label=int(rng.integers(0, n_classes)),
                task=1,
                char_ids=char_ids,
                entity_ids=ent_ids,
                source_id=f"probe-{i}",
            )
        )
    return notes


class ModelProbe:
    """The full network: loss_batch forward, backward_batch gradients."""

    def __init__(self, rng: RngStream, config: ModelConfig, label: str):
        self.name = f"model-{label}"
        char_vocab, ent_vocab, n_classes = 9, 5, 3
        self.model = DualEncoderModel(char_vocab, ent_vocab, config, rng.child("init"))
        self.model.expand_classifier(n_classes, rng.child("clf"))
        self.packed = pack_notes(_tiny_notes(rng.child("notes"), char_vocab, ent_vocab, n_classes))

    def param_slots(self):
        return self.model.all_slots()

    def loss(self) -> float:
        loss, _, _ = self.model.loss_batch(self.packed)
        return loss

    def compute_grads(self) -> None:
        self.model.zero_grads()
        loss, enc, dlogits = self.model.loss_batch(self.packed)
        self.model.backward_batch(enc, dlogits)


class FaultyProbe:
    """Wraps a probe and corrupts one analytic gradient entry.

    Exists so the checker's failure path can be demonstrated on demand:
    a run with an injected fault must report FAIL.
    """

    def __init__(self, inner):
        self.inner = inner
        self.name = f"{inner.name}+fault"

    def param_slots(self):
        return self.inner.param_slots()

    def loss(self) -> float:
        return self.inner.loss()

    def compute_grads(self) -> None:
        self.inner.compute_grads()
        self.inner.param_slots()[0].grad[0, 0] += 0.5


# ---------------------------------------------------------------------------
# suites


def layer_probes(rng: RngStream):
    return [
        LinearXentProbe(rng.child("linear")),
        SoftmaxXentProbe(rng.child("softmax")),
        LstmPoolXentProbe(rng.child("lstm-fwd"), reverse=False, pool="mean"),
        LstmPoolXentProbe(rng.child("lstm-bwd"), reverse=True, pool="mean"),
        LstmPoolXentProbe(rng.child("lstm-max"), reverse=False, pool="max"),
        AttentionXentProbe(rng.child("attention")),
        EmbeddingPoolXentProbe(rng.child("embedding")),
        ConsolidationProbe(rng.child("consolidation")),
    ]


def model_probes(rng: RngStream):
    tiny = dict(embed_dim=3, hidden=3)
    variants = [
        ("mean-pool", ModelConfig(agg_mode="mean-pool", **tiny)),
        ("max-pool", ModelConfig(agg_mode="max-pool", **tiny)),
        ("concat-ends", ModelConfig(agg_mode="concat-ends", **tiny)),
        ("no-entity", ModelConfig(use_entities=False, **tiny)),
        ("no-attention", ModelConfig(use_attention=False, **tiny)),
    ]
    return [ModelProbe(rng.child(label), config, label) for label, config in variants]


def run_suite(probes, epsilon: float = 1e-5, tolerance: float = 1e-4):
    """[(probe name, report)] for each probe."""
    return [(p.name, finite_diff_check(p, epsilon=epsilon, tolerance=tolerance)) for p in probes]


def run_layer_checks(seed: int, inject_fault: bool = False):
    probes = layer_probes(RngStream(seed).child("layers"))
    if inject_fault:
        probes[0] = FaultyProbe(probes[0])
    return run_suite(probes)


def run_model_checks(seed: int, inject_fault: bool = False):
    probes = model_probes(RngStream(seed).child("models"))
    if inject_fault:
        probes[0] = FaultyProbe(probes[0])
    return run_suite(probes)


def all_passed(results: list[tuple[str, GradCheckReport]]) -> bool:
    return all(report.passed for _, report in results)
