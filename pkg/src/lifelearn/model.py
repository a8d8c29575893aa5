"""Dual-channel encoder: character context, lexicon entities, one classifier.

The context channel runs a BiLSTM over character embeddings and pools the
per-step states into one vector h_c, mapped through a square alignment
layer to z_c. The entity channel runs a BiLSTM over the note's extracted
entities, fuses the per-entity states by softmax over their cosine
similarity to h_c, and maps the fused vector through its own alignment
layer to z_s. The classifier is a bias-free linear map on [z_c; z_s]
whose output width grows as tasks introduce new classes; old columns are
never rewritten.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError, StageError
from .numeric import (
    ParamSlot,
    RngStream,
    cosine_attention_backward,
    cosine_attention_forward,
    init_uniform,
    linear_backward,
    linear_forward,
    lstm_sequence_backward,
    lstm_sequence_forward,
    masked_max_pool,
    masked_max_pool_backward,
    masked_mean_pool,
    masked_mean_pool_backward,
    mean_fuse_forward,
    softmax_cross_entropy_batch,
)
from .stream import Note

AGG_MODES = ("mean-pool", "max-pool", "concat-ends")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    hidden: int = 16
    agg_mode: str = "mean-pool"
    use_entities: bool = True
    use_attention: bool = True

    def validate(self) -> None:
        if self.embed_dim < 1 or self.hidden < 1:
            raise ConfigError(
                f"embed_dim and hidden must be >= 1, got {self.embed_dim}, {self.hidden}"
            )
        if self.agg_mode not in AGG_MODES:
            raise ConfigError(
                f"agg_mode must be one of {AGG_MODES}, got {self.agg_mode!r}"
            )


@dataclass
class EncodedNote:
    """Per-note encoding surface used by tests and diagnostics."""

    h_c: np.ndarray
    z_c: np.ndarray
    h_s: np.ndarray
    z_s: np.ndarray
    attention: np.ndarray  # one weight per extracted entity; empty if none
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class Packed:
    """A batch of notes as padded id/mask arrays."""

    char_ids: np.ndarray  # [B,T] int
    char_mask: np.ndarray  # [B,T] float
    ent_ids: np.ndarray  # [B,M] int
    ent_mask: np.ndarray  # [B,M] float
    labels: np.ndarray  # [B] int

    @property
    def size(self) -> int:
        return self.char_ids.shape[0]


def pack_notes(notes) -> Packed:
    if not notes:
        raise EmptyInputError("cannot pack an empty batch")
    batch = len(notes)
    t_max = max(len(n.char_ids) for n in notes)
    if t_max == 0:
        raise EmptyInputError("every note in the batch has empty text")
    m_max = max(len(n.entity_ids) for n in notes)
    char_ids = np.zeros((batch, t_max), dtype=np.int64)
    char_mask = np.zeros((batch, t_max))
    ent_ids = np.zeros((batch, m_max), dtype=np.int64)
    ent_mask = np.zeros((batch, m_max))
    labels = np.zeros(batch, dtype=np.int64)
    for i, note in enumerate(notes):
        t = len(note.char_ids)
        char_ids[i, :t] = note.char_ids
        char_mask[i, :t] = 1.0
        m = len(note.entity_ids)
        if m:
            ent_ids[i, :m] = note.entity_ids
            ent_mask[i, :m] = 1.0
        labels[i] = note.label
    return Packed(char_ids, char_mask, ent_ids, ent_mask, labels)


@dataclass
class BatchEncoding:
    """Forward results plus everything backward needs."""

    packed: Packed
    h_c: np.ndarray  # [B,2H]
    z_c: np.ndarray  # [B,2H]
    fused: np.ndarray  # [B,2H] entity fusion (zeros when channel off/empty)
    z_s: np.ndarray  # [B,2H]
    attention: np.ndarray  # [B,M]
    z: np.ndarray  # classifier input
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    _ctx: dict = field(default_factory=dict, repr=False)


class DualEncoderModel:
    """Both channels plus the growing classifier, as named parameter slots."""

    def __init__(
        self,
        char_vocab_size: int,
        entity_vocab_size: int,
        config: ModelConfig,
        rng: RngStream,
        n_classes: int = 0,
    ):
        config.validate()
        if char_vocab_size < 2:
            raise ConfigError(f"char vocab size must be >= 2, got {char_vocab_size}")
        self.config = config
        self.char_vocab_size = char_vocab_size
        self.entity_vocab_size = entity_vocab_size
        d, h = config.embed_dim, config.hidden
        self._slots: dict[str, ParamSlot] = {}

        def make(name, shape, fan_in):
            self._slots[name] = ParamSlot(name, init_uniform(shape, fan_in, rng))

        def make_lstm(prefix):
            make(f"{prefix}_w", (d, 4 * h), d)
            make(f"{prefix}_u", (h, 4 * h), h)
            bias = np.zeros((1, 4 * h))
            bias[0, h : 2 * h] = 1.0  # forget gate starts open
            self._slots[f"{prefix}_b"] = ParamSlot(f"{prefix}_b", bias)

        make("char_emb", (char_vocab_size, d), d)
        make_lstm("ctx_fwd")
        make_lstm("ctx_bwd")
        self._slots["align_c"] = ParamSlot("align_c", np.eye(2 * h))
        if config.use_entities:
            if entity_vocab_size < 1:
                raise ConfigError(
                    f"entity vocab size must be >= 1, got {entity_vocab_size}"
                )
            make("ent_emb", (entity_vocab_size, d), d)
            make_lstm("ent_fwd")
            make_lstm("ent_bwd")
            self._slots["align_s"] = ParamSlot("align_s", np.eye(2 * h))
        self._slots["clf"] = ParamSlot("clf", np.zeros((self.z_dim, n_classes)))
        if n_classes:
            self._slots["clf"].value = init_uniform((self.z_dim, n_classes), self.z_dim, rng)

    # -- slot access --------------------------------------------------------

    @property
    def z_dim(self) -> int:
        width = 2 * self.config.hidden
        return 2 * width if self.config.use_entities else width

    @property
    def num_classes(self) -> int:
        return self._slots["clf"].value.shape[1]

    def slot(self, name: str) -> ParamSlot:
        return self._slots[name]

    def all_slots(self) -> list[ParamSlot]:
        return list(self._slots.values())

    def alignment_slots(self) -> list[ParamSlot]:
        names = ("align_c", "align_s") if self.config.use_entities else ("align_c",)
        return [self._slots[n] for n in names]

    def non_alignment_slots(self) -> list[ParamSlot]:
        skip = {"align_c", "align_s"}
        return [s for n, s in self._slots.items() if n not in skip]

    def entity_encoder_slots(self) -> list[ParamSlot]:
        """Entity embedding table and entity LSTM slots (no alignment)."""
        return [s for n, s in self._slots.items() if n.startswith("ent_")]

    def zero_grads(self) -> None:
        for slot in self._slots.values():
            slot.zero_grad()

    # -- forward / backward -------------------------------------------------

    def encode_batch(self, packed: Packed, keep_ctx: bool = True) -> BatchEncoding:
        cfg = self.config
        h = cfg.hidden
        s = self._slots
        x_c = s["char_emb"].value[packed.char_ids]
        st_f, (hf, _), cache_f = lstm_sequence_forward(
            x_c, packed.char_mask, s["ctx_fwd_w"], s["ctx_fwd_u"], s["ctx_fwd_b"]
        )
        st_b, (hb, _), cache_b = lstm_sequence_forward(
            x_c, packed.char_mask, s["ctx_bwd_w"], s["ctx_bwd_u"], s["ctx_bwd_b"],
            reverse=True,
        )
        ctx_states = np.concatenate([st_f, st_b], axis=2)  # [B,T,2H]
        ctx = {}
        if cfg.agg_mode == "mean-pool":
            h_c = masked_mean_pool(ctx_states, packed.char_mask)
        elif cfg.agg_mode == "max-pool":
            h_c, pool_idx = masked_max_pool(ctx_states, packed.char_mask)
            ctx["pool_idx"] = pool_idx
        else:  # concat-ends: final forward state with final backward state
            h_c = np.concatenate([hf, hb], axis=1)
        z_c = h_c @ s["align_c"].value

        batch = packed.size
        m_max = packed.ent_ids.shape[1]
        width = 2 * h
        if cfg.use_entities and m_max > 0:
            x_s = s["ent_emb"].value[packed.ent_ids]
            est_f, _, ecache_f = lstm_sequence_forward(
                x_s, packed.ent_mask, s["ent_fwd_w"], s["ent_fwd_u"], s["ent_fwd_b"]
            )
            est_b, _, ecache_b = lstm_sequence_forward(
                x_s, packed.ent_mask, s["ent_bwd_w"], s["ent_bwd_u"], s["ent_bwd_b"],
                reverse=True,
            )
            ent_states = np.concatenate([est_f, est_b], axis=2)  # [B,M,2H]
            if cfg.use_attention:
                fused, attn, acache = cosine_attention_forward(
                    ent_states, packed.ent_mask, h_c
                )
                ctx["acache"] = acache
            else:
                fused, attn = mean_fuse_forward(ent_states, packed.ent_mask)
            z_s = fused @ s["align_s"].value
            ctx.update(x_s=x_s, ecache_f=ecache_f, ecache_b=ecache_b,
                       ent_states=ent_states)
        else:
            fused = np.zeros((batch, width))
            z_s = np.zeros((batch, width))
            attn = np.zeros((batch, m_max))

        z = np.concatenate([z_c, z_s], axis=1) if cfg.use_entities else z_c
        ctx.update(x_c=x_c, cache_f=cache_f, cache_b=cache_b)
        return BatchEncoding(
            packed=packed, h_c=h_c, z_c=z_c, fused=fused, z_s=z_s,
            attention=attn, z=z, _ctx=ctx if keep_ctx else {},
        )

    def forward_batch(self, packed: Packed, keep_ctx: bool = True) -> BatchEncoding:
        enc = self.encode_batch(packed, keep_ctx=keep_ctx)
        enc.logits = enc.z @ self._slots["clf"].value
        return enc

    def backward_batch(self, enc: BatchEncoding, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients given d(loss)/d(logits)."""
        if not enc._ctx:
            raise StageError("encoding was built without caches; cannot backprop")
        cfg = self.config
        s = self._slots
        packed = enc.packed
        h = cfg.hidden
        width = 2 * h
        dz = linear_backward(dlogits, enc.z, s["clf"])
        if cfg.use_entities:
            dz_c, dz_s = dz[:, :width], dz[:, width:]
        else:
            dz_c, dz_s = dz, None

        s["align_c"].grad += enc.h_c.T @ dz_c
        dh_c = dz_c @ s["align_c"].value.T

        ctx = enc._ctx
        m_max = packed.ent_ids.shape[1]
        if cfg.use_entities and m_max > 0:
            s["align_s"].grad += enc.fused.T @ dz_s
            dfused = dz_s @ s["align_s"].value.T
            if cfg.use_attention:
                d_ent_states, d_query = cosine_attention_backward(
                    dfused, None, ctx["acache"]
                )
                dh_c = dh_c + d_query
            else:
                d_ent_states = masked_mean_pool_backward(dfused, packed.ent_mask)
            dx_s = lstm_sequence_backward(
                d_ent_states[:, :, :h], None, ctx["x_s"],
                s["ent_fwd_w"], s["ent_fwd_u"], s["ent_fwd_b"], ctx["ecache_f"],
            )
            dx_s += lstm_sequence_backward(
                d_ent_states[:, :, h:], None, ctx["x_s"],
                s["ent_bwd_w"], s["ent_bwd_u"], s["ent_bwd_b"], ctx["ecache_b"],
            )
            np.add.at(s["ent_emb"].grad, packed.ent_ids, dx_s)

        steps = packed.char_ids.shape[1]
        dctx_states = np.zeros((packed.size, steps, width))
        dhf_last = None
        dhb_last = None
        if cfg.agg_mode == "mean-pool":
            dctx_states = masked_mean_pool_backward(dh_c, packed.char_mask)
        elif cfg.agg_mode == "max-pool":
            dctx_states = masked_max_pool_backward(dh_c, ctx["pool_idx"], steps)
        else:
            dhf_last, dhb_last = dh_c[:, :h], dh_c[:, h:]
        dx_c = lstm_sequence_backward(
            dctx_states[:, :, :h], dhf_last, ctx["x_c"],
            s["ctx_fwd_w"], s["ctx_fwd_u"], s["ctx_fwd_b"], ctx["cache_f"],
        )
        dx_c += lstm_sequence_backward(
            dctx_states[:, :, h:], dhb_last, ctx["x_c"],
            s["ctx_bwd_w"], s["ctx_bwd_u"], s["ctx_bwd_b"], ctx["cache_b"],
        )
        np.add.at(s["char_emb"].grad, packed.char_ids, dx_c)

    def loss_batch(self, packed: Packed):
        """Mean cross-entropy over the batch. Returns (loss, encoding, dlogits)."""
        enc = self.forward_batch(packed)
        losses, grad, probs = softmax_cross_entropy_batch(enc.logits, packed.labels)
        enc.probs = probs
        return float(losses.mean()), enc, grad / packed.size

    # -- per-note operations -------------------------------------------------

    def encode_context(self, note: Note):
        """(h_c, z_c) for one note."""
        packed = pack_notes([note])
        enc = self.encode_batch(packed, keep_ctx=False)
        return enc.h_c[0], enc.z_c[0]

    def encode_entities(self, note: Note, h_c: np.ndarray):
        """(h_s, z_s, attention weights) for one note given its context vector.

        A note with no extracted entities yields zero vectors and an empty
        weight array.
        """
        if not self.config.use_entities:
            raise StageError("this model was built without an entity channel")
        width = 2 * self.config.hidden
        m = len(note.entity_ids)
        if m == 0:
            return np.zeros(width), np.zeros(width), np.zeros(0)
        s = self._slots
        ids = np.asarray(note.entity_ids, dtype=np.int64)[None, :]
        mask = np.ones((1, m))
        x_s = s["ent_emb"].value[ids]
        est_f, _, _ = lstm_sequence_forward(
            x_s, mask, s["ent_fwd_w"], s["ent_fwd_u"], s["ent_fwd_b"]
        )
        est_b, _, _ = lstm_sequence_forward(
            x_s, mask, s["ent_bwd_w"], s["ent_bwd_u"], s["ent_bwd_b"], reverse=True
        )
        ent_states = np.concatenate([est_f, est_b], axis=2)
        if self.config.use_attention:
            fused, attn, _ = cosine_attention_forward(
                ent_states, mask, np.asarray(h_c)[None, :]
            )
        else:
            fused, attn = mean_fuse_forward(ent_states, mask)
        z_s = fused @ s["align_s"].value
        return fused[0], z_s[0], attn[0]

    def entity_states(self, note: Note) -> np.ndarray:
        """Per-entity BiLSTM states h_s_m [M,2H] for one note."""
        if not self.config.use_entities:
            raise StageError("this model was built without an entity channel")
        m = len(note.entity_ids)
        if m == 0:
            return np.zeros((0, 2 * self.config.hidden))
        s = self._slots
        ids = np.asarray(note.entity_ids, dtype=np.int64)[None, :]
        mask = np.ones((1, m))
        x_s = s["ent_emb"].value[ids]
        est_f, _, _ = lstm_sequence_forward(
            x_s, mask, s["ent_fwd_w"], s["ent_fwd_u"], s["ent_fwd_b"]
        )
        est_b, _, _ = lstm_sequence_forward(
            x_s, mask, s["ent_bwd_w"], s["ent_bwd_u"], s["ent_bwd_b"], reverse=True
        )
        return np.concatenate([est_f, est_b], axis=2)[0]

    def single_entity_states(self, ent_ids) -> np.ndarray:
        """BiLSTM states [M,2H], each entity encoded as its own one-element
        sequence (no neighbours), e.g. for inspecting the embedding space."""
        if not self.config.use_entities:
            raise StageError("this model was built without an entity channel")
        ids = np.asarray(ent_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError(f"expected a flat id list, got shape {ids.shape}")
        if ids.size == 0:
            return np.zeros((0, 2 * self.config.hidden))
        s = self._slots
        x_s = s["ent_emb"].value[ids[:, None]]
        mask = np.ones((ids.size, 1))
        est_f, _, _ = lstm_sequence_forward(
            x_s, mask, s["ent_fwd_w"], s["ent_fwd_u"], s["ent_fwd_b"]
        )
        est_b, _, _ = lstm_sequence_forward(
            x_s, mask, s["ent_bwd_w"], s["ent_bwd_u"], s["ent_bwd_b"], reverse=True
        )
        return np.concatenate([est_f, est_b], axis=2)[:, 0, :]

    def classify(self, z_c: np.ndarray, z_s: np.ndarray | None = None):
        """(logits, probs) over the label space seen so far."""
        if self.num_classes == 0:
            raise StageError("classifier has no classes yet")
        if self.config.use_entities:
            if z_s is None:
                raise ShapeError("this model needs both z_c and z_s")
            z = np.concatenate([np.asarray(z_c), np.asarray(z_s)])
        else:
            z = np.asarray(z_c)
        logits = linear_forward(z, self._slots["clf"])
        shifted = logits - logits.max()
        e = np.exp(shifted)
        return logits, e / e.sum()

    def encode_note(self, note: Note) -> EncodedNote:
        h_c, z_c = self.encode_context(note)
        if self.config.use_entities:
            h_s, z_s, attn = self.encode_entities(note, h_c)
        else:
            width = 2 * self.config.hidden
            h_s = np.zeros(width)
            z_s = np.zeros(width)
            attn = np.zeros(0)
        logits, probs = self.classify(z_c, z_s if self.config.use_entities else None)
        return EncodedNote(h_c, z_c, h_s, z_s, attn, logits, probs)

    # -- classifier growth, snapshots, checkpoints ---------------------------

    def expand_classifier(self, n_new: int, rng: RngStream) -> None:
        """Append columns for ``n_new`` classes; existing columns keep their bits."""
        if n_new < 1:
            raise ConfigError(f"n_new must be >= 1, got {n_new}")
        clf = self._slots["clf"]
        new_cols = init_uniform((self.z_dim, n_new), self.z_dim, rng)
        clf.value = np.concatenate([clf.value, new_cols], axis=1)
        clf.grad = np.zeros_like(clf.value)

    def snapshot(self) -> "DualEncoderModel":
        """Frozen copy of embeddings, encoders, and alignment; no classifier."""
        clone = object.__new__(DualEncoderModel)
        clone.config = self.config
        clone.char_vocab_size = self.char_vocab_size
        clone.entity_vocab_size = self.entity_vocab_size
        clone._slots = {}
        for name, slot in self._slots.items():
            if name == "clf":
                continue
            clone._slots[name] = ParamSlot(name, slot.value.copy(), frozen=True)
        clone._slots["clf"] = ParamSlot("clf", np.zeros((self.z_dim, 0)), frozen=True)
        return clone

    def save(self, path) -> None:
        meta = {
            "kind": "lifelearn-model",
            "version": 1,
            "config": {
                "embed_dim": self.config.embed_dim,
                "hidden": self.config.hidden,
                "agg_mode": self.config.agg_mode,
                "use_entities": self.config.use_entities,
                "use_attention": self.config.use_attention,
            },
            "char_vocab_size": self.char_vocab_size,
            "entity_vocab_size": self.entity_vocab_size,
            "n_classes": self.num_classes,
            "slots": list(self._slots),
        }
        arrays = {f"slot_{name}": slot.value for name, slot in self._slots.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(
                json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
            ), **arrays)

    @classmethod
    def load(cls, path) -> "DualEncoderModel":
        with np.load(path) as data:
            if "__meta__" not in data:
                raise ShapeError(f"{path}: not a model checkpoint")
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            if meta.get("kind") != "lifelearn-model" or meta.get("version") != 1:
                raise ShapeError(f"{path}: unsupported checkpoint {meta.get('kind')!r}")
            config = ModelConfig(**meta["config"])
            model = object.__new__(cls)
            model.config = config
            model.char_vocab_size = meta["char_vocab_size"]
            model.entity_vocab_size = meta["entity_vocab_size"]
            model._slots = {}
            for name in meta["slots"]:
                model._slots[name] = ParamSlot(name, data[f"slot_{name}"].copy())
        return model
