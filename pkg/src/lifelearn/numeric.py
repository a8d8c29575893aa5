"""Tensor primitives, parameter slots, and gradient machinery.

Everything is built on 2-D row-major float64 numpy arrays. Vectors travel
as rows, so a linear map computes ``y = x @ W`` with ``W`` shaped
``[fan_in, fan_out]``. Each layer ships a forward function that returns a
cache and a backward function that accumulates into parameter gradients;
analytic gradients are validated against central finite differences by
``finite_diff_check``.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError

# ---------------------------------------------------------------------------
# parameter slots and RNG


@dataclass
class ParamSlot:
    """A named parameter tensor with its gradient buffer and freeze flag."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    frozen: bool = False

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeError(
                f"slot {self.name!r}: expected a 2-D tensor, got shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(
                f"slot {self.name!r}: grad shape {self.grad.shape} "
                f"!= value shape {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class RngStream:
    """Seeded, splittable random stream (PCG64 under numpy SeedSequence).

    Child streams are derived from a text label, so independent consumers
    (init, shuffling, replay sampling, ...) never perturb each other's
    sequences. Identical seed and label always reproduce the same stream,
    independent of platform.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=_key))
        )

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, self._key + (zlib.crc32(label.encode("utf-8")),))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def random(self, size=None):
        return self._gen.random(size)


def init_uniform(shape: tuple[int, int], fan_in: int, rng: RngStream) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialisation."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, shape)


# ---------------------------------------------------------------------------
# elementwise helpers


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear layer


def linear_forward(x: np.ndarray, w: ParamSlot, b: ParamSlot | None = None) -> np.ndarray:
    """``y = x @ W (+ b)``. Accepts a single row vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != w.value.shape[0]:
        raise ShapeError(
            f"linear: input shape {x.shape} incompatible with weight shape {w.value.shape}"
        )
    y = x @ w.value
    if b is not None:
        y = y + b.value
    return y[0] if single else y


def linear_backward(
    dy: np.ndarray, x: np.ndarray, w: ParamSlot, b: ParamSlot | None = None
) -> np.ndarray:
    """Accumulate parameter grads for ``y = x @ W (+ b)`` and return dx."""
    w.grad += x.T @ dy
    if b is not None:
        b.grad += dy.sum(axis=0, keepdims=True)
    return dy @ w.value.T


# ---------------------------------------------------------------------------
# LSTM cell and masked sequence scan

GATES = 4  # input, forget, candidate, output


def lstm_cell_forward(
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
    w: ParamSlot,
    u: ParamSlot,
    b: ParamSlot,
) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step: gate order (i, f, g, o), tanh candidate, no peepholes.

    Shapes: x [B,d], h_prev/c_prev [B,H], w [d,4H], u [H,4H], b [1,4H].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h_prev = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
    c_prev = np.atleast_2d(np.asarray(c_prev, dtype=np.float64))
    hid = u.value.shape[0]
    if w.value.shape[1] != GATES * hid or x.shape[1] != w.value.shape[0]:
        raise ShapeError(
            f"lstm cell: x {x.shape}, w {w.value.shape}, u {u.value.shape} do not line up"
        )
    gates = x @ w.value + h_prev @ u.value + b.value
    i = sigmoid(gates[:, :hid])
    f = sigmoid(gates[:, hid : 2 * hid])
    g = np.tanh(gates[:, 2 * hid : 3 * hid])
    o = sigmoid(gates[:, 3 * hid :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_sequence_forward(
    x: np.ndarray,
    mask: np.ndarray,
    w: ParamSlot,
    u: ParamSlot,
    b: ParamSlot,
    reverse: bool = False,
):
    """Masked scan of an LSTM over ``x`` [B,T,d] with ``mask`` [B,T].

    Sequences are left-aligned; masked positions pass state through
    unchanged, so the final state always equals the state at each row's
    last valid step (or zeros for an all-masked row). Returns per-step
    hidden states [B,T,H], the final (h, c), and a cache for backward.
    """
    batch, steps, _ = x.shape
    hid = u.value.shape[0]
    h = np.zeros((batch, hid))
    c = np.zeros((batch, hid))
    states = np.zeros((batch, steps, hid))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    cache = []
    for t in order:
        m = mask[:, t : t + 1]
        gates = x[:, t] @ w.value + h @ u.value + b.value
        i = sigmoid(gates[:, :hid])
        f = sigmoid(gates[:, hid : 2 * hid])
        g = np.tanh(gates[:, 2 * hid : 3 * hid])
        o = sigmoid(gates[:, 3 * hid :])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        cache.append((t, i, f, g, o, c, tanh_c, h, m))
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        states[:, t] = h
    return states, (h, c), cache


def lstm_sequence_backward(
    dstates: np.ndarray,
    dh_last: np.ndarray | None,
    x: np.ndarray,
    w: ParamSlot,
    u: ParamSlot,
    b: ParamSlot,
    cache,
) -> np.ndarray:
    """Backward pass matching ``lstm_sequence_forward``; returns dx [B,T,d]."""
    batch, steps, _ = x.shape
    hid = u.value.shape[0]
    dx = np.zeros_like(x)
    dh = np.zeros((batch, hid)) if dh_last is None else dh_last.copy()
    dc = np.zeros((batch, hid))
    for (t, i, f, g, o, c_prev, tanh_c, h_prev, m) in reversed(cache):
        dh = dh + dstates[:, t]
        dh_new = m * dh
        dc_new = m * dc
        dc_cell = dc_new + dh_new * o * (1.0 - tanh_c**2)
        di = dc_cell * g
        df = dc_cell * c_prev
        dg = dc_cell * i
        do = dh_new * tanh_c
        dgates = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g**2), do * o * (1.0 - o)],
            axis=1,
        )
        w.grad += x[:, t].T @ dgates
        u.grad += h_prev.T @ dgates
        b.grad += dgates.sum(axis=0, keepdims=True)
        dx[:, t] = dgates @ w.value.T
        dh = dgates @ u.value.T + (1.0 - m) * dh
        dc = dc_cell * f + (1.0 - m) * dc
    return dx


# ---------------------------------------------------------------------------
# masked pooling


def masked_mean_pool(states: np.ndarray, mask: np.ndarray) -> np.ndarray:
    lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return (states * mask[:, :, None]).sum(axis=1) / lengths


def masked_mean_pool_backward(dpooled: np.ndarray, mask: np.ndarray) -> np.ndarray:
    lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return dpooled[:, None, :] * (mask / lengths)[:, :, None]


def masked_max_pool(states: np.ndarray, mask: np.ndarray):
    """Per-dimension max over valid steps. Returns (pooled, argmax cache)."""
    neg = np.where(mask[:, :, None] > 0, states, -np.inf)
    idx = neg.argmax(axis=1)  # [B,D]
    pooled = np.take_along_axis(states, idx[:, None, :], axis=1)[:, 0, :]
    return pooled, idx


def masked_max_pool_backward(dpooled: np.ndarray, idx: np.ndarray, steps: int) -> np.ndarray:
    batch, dim = dpooled.shape
    dstates = np.zeros((batch, steps, dim))
    rows = np.arange(batch)[:, None]
    cols = np.arange(dim)[None, :]
    np.add.at(dstates, (rows, idx, cols), dpooled)
    return dstates


# ---------------------------------------------------------------------------
# cosine attention

NORM_FLOOR = 1e-12


def cosine_attention_forward(ent_states: np.ndarray, ent_mask: np.ndarray, query: np.ndarray):
    """Fuse entity states [B,M,D] into one vector per row, weighted by the
    softmax of their cosine similarity to ``query`` [B,D].

    Zero-norm operands score 0 by convention. Rows with no valid entities
    fuse to the zero vector with an all-zero weight row.
    """
    ns = np.linalg.norm(ent_states, axis=2)  # [B,M]
    nq = np.linalg.norm(query, axis=1)  # [B]
    dots = np.einsum("bmd,bd->bm", ent_states, query)
    denom = ns * nq[:, None]
    live = denom > NORM_FLOOR
    u = np.where(live, dots / np.where(live, denom, 1.0), 0.0)
    valid = ent_mask > 0
    shifted = np.where(valid, u, -np.inf)
    row_has = valid.any(axis=1)
    mx = np.where(row_has, shifted.max(axis=1, initial=-np.inf), 0.0)
    e = np.where(valid, np.exp(u - mx[:, None]), 0.0)
    z = e.sum(axis=1, keepdims=True)
    a = np.where(z > 0, e / np.where(z > 0, z, 1.0), 0.0)
    fused = np.einsum("bm,bmd->bd", a, ent_states)
    cache = (ent_states, ent_mask, query, ns, nq, u, a, live)
    return fused, a, cache


def cosine_attention_backward(dfused: np.ndarray, da_extra: np.ndarray | None, cache):
    """Backward for cosine attention. Returns (d_ent_states, d_query).

    ``da_extra`` lets a caller inject gradient directly into the attention
    weights (unused by the classifier path, handy for probes).
    """
    ent_states, ent_mask, query, ns, nq, u, a, live = cache
    valid = ent_mask > 0
    d_ent = a[:, :, None] * dfused[:, None, :]
    da = np.einsum("bd,bmd->bm", dfused, ent_states)
    if da_extra is not None:
        da = da + da_extra
    inner = (a * da).sum(axis=1, keepdims=True)
    du = a * (da - inner)  # softmax backward; invalid entries have a == 0
    # cosine backward, applied only where both norms are live
    coef = np.where(live & valid, du, 0.0)
    denom = np.where(live, ns * nq[:, None], 1.0)
    d_ent += coef[:, :, None] * (
        query[:, None, :] / denom[:, :, None]
        - (u / np.where(live, ns**2, 1.0))[:, :, None] * ent_states
    )
    d_query = np.einsum(
        "bm,bmd->bd", coef / denom, ent_states
    ) - ((coef * u).sum(axis=1) / np.where(nq > NORM_FLOOR, nq**2, 1.0))[:, None] * query
    return d_ent, d_query


def mean_fuse_forward(ent_states: np.ndarray, ent_mask: np.ndarray):
    """Attention-free fusion: plain mean over valid entity states."""
    fused = masked_mean_pool(ent_states, ent_mask)
    counts = ent_mask.sum(axis=1, keepdims=True)
    fused = np.where(counts > 0, fused, 0.0)
    a = np.where(counts > 0, ent_mask / np.maximum(counts, 1.0), 0.0)
    return fused, a


# ---------------------------------------------------------------------------
# softmax cross-entropy


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) for one row of logits and an integer label.

    Stabilised by max subtraction, so arbitrarily large logits stay finite.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label < logits.shape[0]:
        raise ShapeError(f"label {label} out of range for {logits.shape[0]} logits")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    p = e / e.sum()
    loss = -(shifted[label] - np.log(e.sum()))
    grad = p.copy()
    grad[label] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Row-wise losses [B] and gradient [B,L] (unscaled by batch size)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    rows = np.arange(logits.shape[0])
    losses = -(shifted[rows, labels] - np.log(z[:, 0]))
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return losses, grad, p


# ---------------------------------------------------------------------------
# optimiser


def sgd_step(slots, lr: float) -> None:
    """``value -= lr * grad`` for every non-frozen slot, zeroing applied grads.

    Frozen slots are a bit-exact no-op: neither value nor grad is touched.
    A non-finite gradient raises DivergenceError naming the slot.
    """
    for slot in slots:
        if slot.frozen:
            continue
        if not np.all(np.isfinite(slot.grad)):
            raise DivergenceError(f"non-finite gradient in slot {slot.name!r}")
        slot.value -= lr * slot.grad
        slot.zero_grad()


@contextmanager
def frozen_slots(slots):
    """Freeze slots for the duration of a block, restoring prior flags."""
    prior = [s.frozen for s in slots]
    for s in slots:
        s.frozen = True
    try:
        yield
    finally:
        for s, p in zip(slots, prior):
            s.frozen = p


@contextmanager
def thawed_slots(slots):
    """Unfreeze slots for the duration of a block, restoring prior flags."""
    prior = [s.frozen for s in slots]
    for s in slots:
        s.frozen = False
    try:
        yield
    finally:
        for s, p in zip(slots, prior):
            s.frozen = p


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckEntry:
    slot: str
    max_rel_err: float
    worst_index: tuple[int, int]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    epsilon: float
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err >= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"{'ok' if e.max_rel_err < self.tolerance else 'FAIL':4s} "
            f"{e.slot:24s} max_rel_err={e.max_rel_err:.3e}"
            for e in self.entries
        ]
        lines.append(
            f"{'PASS' if self.passed else 'FAIL'}: "
            f"{len(self.entries)} slots, max_rel_err={self.max_rel_err:.3e} "
            f"(tolerance {self.tolerance:.1e})"
        )
        return "\n".join(lines)


def finite_diff_check(probe, epsilon: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare a probe's analytic gradients against central differences.

    The probe must expose ``param_slots() -> list[ParamSlot]``,
    ``loss() -> float`` (a fresh forward pass) and ``compute_grads()``
    (zero grads, then forward + backward). Every parameter entry is
    perturbed by +/- epsilon. A probe with no parameters passes trivially.
    """
    slots = list(probe.param_slots())
    probe.compute_grads()
    analytic = {s.name: s.grad.copy() for s in slots}
    entries = []
    for slot in slots:
        a = analytic[slot.name]
        worst = (0.0, (0, 0), 0.0, 0.0)
        it = np.nditer(slot.value, flags=["multi_index"])
        while not it.finished:
            ij = it.multi_index
            orig = slot.value[ij]
            slot.value[ij] = orig + epsilon
            up = probe.loss()
            slot.value[ij] = orig - epsilon
            down = probe.loss()
            slot.value[ij] = orig
            num = (up - down) / (2.0 * epsilon)
            ana = a[ij]
            # the 1e-5 floor turns entries below the central-difference
            # noise floor (~1e-11 absolute) into an absolute check at 1e-9
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-5)
            if rel > worst[0]:
                worst = (rel, ij, ana, num)
            it.iternext()
        entries.append(GradCheckEntry(slot.name, worst[0], worst[1], worst[2], worst[3]))
    return GradCheckReport(entries, epsilon, tolerance)
