"""Corpora, task streams, and the synthetic note generator.

A task stream is an ordered list of tasks with pairwise-disjoint label
sets over one growing label space. Notes are plain text; the engine sees
them as character ids plus the ids of lexicon entities extracted by
greedy longest match. Streams serialise to JSONL: one header object with
the vocabularies, then one record per note.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    ConfigError,
    EmptyInputError,
    StreamParseError,
    StreamValidationError,
)
from .numeric import RngStream

FORMAT_NAME = "lifelearn-stream"
FORMAT_VERSION = 1

PAD_ID = 0
UNK_ID = 1


# ---------------------------------------------------------------------------
# vocabularies


@dataclass(frozen=True)
class CharVocab:
    """Character inventory. Id 0 is padding, id 1 the unknown character."""

    chars: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "_ids", {ch: i + 2 for i, ch in enumerate(self.chars)}
        )

    @classmethod
    def from_texts(cls, texts) -> "CharVocab":
        seen: dict[str, None] = {}
        for text in texts:
            for ch in text:
                seen.setdefault(ch)
        return cls(tuple(seen))

    @property
    def size(self) -> int:
        return len(self.chars) + 2

    def encode(self, text: str) -> tuple[int, ...]:
        ids = self._ids
        return tuple(ids.get(ch, UNK_ID) for ch in text)


def tokenize_chars(text: str, vocab: CharVocab) -> tuple[int, ...]:
    """One token per code point; characters outside the vocabulary map to UNK."""
    return vocab.encode(text)


@dataclass(frozen=True)
class EntityLexicon:
    """Closed inventory of entity surfaces, each with a type tag.

    Entity ids index the embedding table directly and follow entry order.
    """

    entries: tuple[tuple[str, str], ...]  # (surface, type)

    def __post_init__(self):
        by_surface = {}
        for i, (surface, _) in enumerate(self.entries):
            if not surface:
                raise StreamValidationError("lexicon contains an empty surface")
            if surface in by_surface:
                raise StreamValidationError(f"duplicate lexicon surface {surface!r}")
            by_surface[surface] = i
        object.__setattr__(self, "_by_surface", by_surface)
        object.__setattr__(
            self, "_max_len", max((len(s) for s, _ in self.entries), default=0)
        )

    @property
    def size(self) -> int:
        return len(self.entries)

    def __contains__(self, surface: str) -> bool:
        return surface in self._by_surface

    def id_of(self, surface: str) -> int:
        return self._by_surface[surface]

    def type_of(self, surface: str) -> str:
        return self.entries[self._by_surface[surface]][1]

    def encode(self, surfaces) -> tuple[int, ...]:
        return tuple(self._by_surface[s] for s in surfaces)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for surface, etype in self.entries:
                fh.write(f"{surface}\t{etype}\n")

    @classmethod
    def load(cls, path) -> "EntityLexicon":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise StreamParseError(
                        f"expected 'surface<TAB>type', got {line!r}", line=lineno
                    )
                entries.append((parts[0], parts[1]))
        return cls(tuple(entries))


def extract_entities(text: str, lexicon: EntityLexicon) -> tuple[str, ...]:
    """Greedy left-to-right longest-match extraction, non-overlapping.

    At each position the longest matching surface wins; ties cannot occur
    left-to-right. Returns matched surfaces in text order.
    """
    found = []
    i = 0
    n = len(text)
    max_len = lexicon._max_len
    while i < n:
        match = None
        top = min(max_len, n - i)
        for length in range(top, 0, -1):
            cand = text[i : i + length]
            if cand in lexicon:
                match = cand
                break
        if match is None:
            i += 1
        else:
            found.append(match)
            i += len(match)
    return tuple(found)


# ---------------------------------------------------------------------------
# notes, tasks, streams


@dataclass(frozen=True)
class Note:
    """One labelled text with its tokenisation and extracted entities."""

    text: str
    entities: tuple[str, ...]
    label: int  # global class id
    task: int  # 0-based task index
    char_ids: tuple[int, ...]
    entity_ids: tuple[int, ...]
    source_id: str


@dataclass(frozen=True)
class Task:
    index: int
    label_ids: tuple[int, ...]
    label_names: tuple[str, ...]
    train: tuple[Note, ...]
    test: tuple[Note, ...]


@dataclass(frozen=True)
class TaskStream:
    char_vocab: CharVocab
    lexicon: EntityLexicon
    label_names: tuple[str, ...]  # position = global class id
    tasks: tuple[Task, ...]
    format_version: int = FORMAT_VERSION

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def classes_through(self, stage: int) -> int:
        """Size of the label space after `stage` tasks (1-based)."""
        return sum(len(t.label_ids) for t in self.tasks[:stage])


def _build_note(text, label_id, task_idx, split, idx, vocab, lexicon, entities=None):
    if entities is None:
        entities = extract_entities(text, lexicon)
    return Note(
        text=text,
        entities=tuple(entities),
        label=label_id,
        task=task_idx,
        char_ids=tokenize_chars(text, vocab),
        entity_ids=lexicon.encode(entities),
        source_id=f"t{task_idx}-{split}-{idx:05d}",
    )


def split_tasks(
    records,
    lexicon: EntityLexicon,
    num_tasks: int,
    rng: RngStream,
    train_fraction: float = 0.8,
) -> TaskStream:
    """Partition labelled records into a task stream.

    ``records`` is a sequence of (text, label_name). Label names are
    shuffled, then cut into ``num_tasks`` equal groups; each class is
    split into train/test by ``train_fraction``. The character vocabulary
    is built from training texts only.
    """
    records = list(records)
    if not records:
        raise EmptyInputError("cannot split an empty dataset")
    if num_tasks < 1:
        raise ConfigError(f"num_tasks must be >= 1, got {num_tasks}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")

    by_label: dict[str, list[str]] = {}
    for text, label in records:
        if not text:
            raise StreamValidationError("a record has empty text")
        by_label.setdefault(label, []).append(text)
    labels = list(by_label)
    if len(labels) % num_tasks != 0:
        raise ConfigError(
            f"{len(labels)} classes cannot be divided into {num_tasks} equal tasks"
        )
    per_task = len(labels) // num_tasks

    order = rng.child("label-order").permutation(len(labels))
    shuffled = [labels[i] for i in order]

    split_rng = rng.child("train-test")
    train_texts: dict[str, list[str]] = {}
    test_texts: dict[str, list[str]] = {}
    for label in shuffled:
        texts = by_label[label]
        if len(texts) < 2:
            raise StreamValidationError(
                f"class {label!r} has {len(texts)} note(s); need at least 2"
            )
        perm = split_rng.permutation(len(texts))
        n_train = min(max(1, int(len(texts) * train_fraction)), len(texts) - 1)
        train_texts[label] = [texts[i] for i in perm[:n_train]]
        test_texts[label] = [texts[i] for i in perm[n_train:]]

    vocab = CharVocab.from_texts(
        text for label in shuffled for text in train_texts[label]
    )

    tasks = []
    label_names_flat = tuple(shuffled)
    next_id = 0
    for k in range(num_tasks):
        group = shuffled[k * per_task : (k + 1) * per_task]
        ids = tuple(range(next_id, next_id + per_task))
        next_id += per_task
        train_notes = []
        test_notes = []
        for label_id, label in zip(ids, group):
            for text in train_texts[label]:
                train_notes.append(
                    _build_note(text, label_id, k, "train", len(train_notes), vocab, lexicon)
                )
            for text in test_texts[label]:
                test_notes.append(
                    _build_note(text, label_id, k, "test", len(test_notes), vocab, lexicon)
                )
        tasks.append(
            Task(
                index=k,
                label_ids=ids,
                label_names=tuple(group),
                train=tuple(train_notes),
                test=tuple(test_notes),
            )
        )
    return TaskStream(
        char_vocab=vocab,
        lexicon=lexicon,
        label_names=label_names_flat,
        tasks=tuple(tasks),
    )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic clinical-note stream.

    Each class owns one or more signature symptom keywords; all classes
    share a pool of common entities and a filler vocabulary, which is
    what makes naive sequential fine-tuning forget earlier tasks.
    """

    classes: int = 40
    tasks: int = 10
    notes_per_class: int = 200
    keywords_per_class: int = 1
    shared_entities: int = 40
    filler_words: int = 150
    min_words: int = 2
    max_words: int = 4
    noise_rate: float = 0.05
    train_fraction: float = 0.8

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.tasks < 1 or self.classes % self.tasks != 0:
            raise ConfigError(
                f"{self.classes} classes cannot be divided into {self.tasks} equal tasks"
            )
        if self.notes_per_class < 2:
            raise ConfigError("need at least 2 notes per class")
        if self.keywords_per_class < 1:
            raise ConfigError("each class needs at least 1 keyword")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError(
                f"bad words-per-note range [{self.min_words}, {self.max_words}]"
            )


# letter pools are disjoint between filler and entity surfaces, so no
# lexicon surface can occur inside filler text by accident
_FILLER_CONS = "bdfglmnprst"
_ENTITY_CONS = "chjkqvwxz"
_VOWELS = "aeiou"

_ENTITY_TYPES = (
    "bodypart",
    "finding",
    "negation",
    "duration",
    "severity",
    "medication",
    "procedure",
    "frequency",
)


def _make_word(rng: RngStream, consonants: str, n_syllables: int) -> str:
    out = []
    for _ in range(n_syllables):
        out.append(consonants[int(rng.integers(0, len(consonants)))])
        out.append(_VOWELS[int(rng.integers(0, len(_VOWELS)))])
    return "".join(out)


def _make_unique_words(rng, consonants, count, taken, forbid_nesting=False):
    """Draw distinct words; optionally reject substring relations with `taken`."""
    words = []
    while len(words) < count:
        word = _make_word(rng, consonants, int(rng.integers(2, 4)))
        if word in taken:
            continue
        if forbid_nesting and any(word in t or t in word for t in taken):
            continue
        taken.add(word)
        words.append(word)
    return words


def synthesize_stream(spec: SynthSpec, rng: RngStream) -> TaskStream:
    """Generate a labelled synthetic stream according to ``spec``.

    Every note embeds class-typical symptom keywords among shared
    entities and filler words. With noise_rate 0 every note carries at
    least one keyword of its class.
    """
    spec.validate()
    lex_rng = rng.child("lexicon")
    taken: set[str] = set()
    keyword_surfaces = _make_unique_words(
        lex_rng, _ENTITY_CONS, spec.classes * spec.keywords_per_class, taken, True
    )
    shared_surfaces = _make_unique_words(
        lex_rng, _ENTITY_CONS, spec.shared_entities, taken, True
    )
    filler = _make_unique_words(
        rng.child("filler"), _FILLER_CONS, spec.filler_words, set()
    )

    entries = [(s, "symptom") for s in keyword_surfaces]
    entries += [
        (s, _ENTITY_TYPES[i % len(_ENTITY_TYPES)]) for i, s in enumerate(shared_surfaces)
    ]
    lexicon = EntityLexicon(tuple(entries))

    note_rng = rng.child("notes")
    records = []
    kpc = spec.keywords_per_class
    for c in range(spec.classes):
        label = f"cond{c:02d}"
        class_keywords = keyword_surfaces[c * kpc : (c + 1) * kpc]
        for _ in range(spec.notes_per_class):
            total = int(note_rng.integers(spec.min_words, spec.max_words + 1))
            if spec.noise_rate > 0 and note_rng.random() < spec.noise_rate:
                n_kw = 0
            else:
                n_kw = int(note_rng.integers(1, min(2, kpc) + 1))
            kws = [
                class_keywords[i]
                for i in note_rng.choice(kpc, size=n_kw, replace=False)
            ] if n_kw else []
            # shared entities outnumber keywords, so uniform fusing dilutes;
            # small pools clamp the draw to what exists
            hi = min(8, len(shared_surfaces))
            n_shared = int(note_rng.integers(min(4, hi), hi + 1))
            shared = [
                shared_surfaces[i]
                for i in note_rng.choice(len(shared_surfaces), size=n_shared, replace=False)
            ] if n_shared else []
            n_fill = max(total - len(kws) - len(shared), 1)
            fills = [
                filler[int(note_rng.integers(0, len(filler)))] for _ in range(n_fill)
            ]
            words = kws + shared + fills
            order = note_rng.permutation(len(words))
            text = " ".join(words[i] for i in order)
            records.append((text, label))

    return split_tasks(
        records, lexicon, spec.tasks, rng.child("split"), spec.train_fraction
    )


# ---------------------------------------------------------------------------
# serialisation


def save_stream(stream: TaskStream, path) -> None:
    """Write a stream as JSONL: header object, then one record per note."""
    path = Path(path)
    header = {
        "format": FORMAT_NAME,
        "version": stream.format_version,
        "chars": list(stream.char_vocab.chars),
        "entities": [list(e) for e in stream.lexicon.entries],
        "labels": list(stream.label_names),
        "label_to_task": {
            name: task.index for task in stream.tasks for name in task.label_names
        },
        "num_tasks": stream.num_tasks,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for task in stream.tasks:
            for split, notes in (("train", task.train), ("test", task.test)):
                for note in notes:
                    rec = {
                        "text": note.text,
                        "entities": list(note.entities),
                        "label": stream.label_names[note.label],
                        "task": note.task,
                        "split": split,
                    }
                    fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_stream(path) -> TaskStream:
    """Parse a stream file, validating structure and label disjointness."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise StreamParseError(f"{path}: empty stream file")

    def parse(lineno: int, raw: str) -> dict:
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise StreamParseError(f"{exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise StreamParseError("expected a JSON object", line=lineno)
        return obj

    header = parse(1, lines[0])
    if header.get("format") != FORMAT_NAME:
        raise StreamParseError(
            f"not a {FORMAT_NAME} file (format={header.get('format')!r})", line=1
        )
    if header.get("version") != FORMAT_VERSION:
        raise StreamParseError(
            f"unsupported version {header.get('version')!r}", line=1
        )
    for key in ("chars", "entities", "labels", "label_to_task", "num_tasks"):
        if key not in header:
            raise StreamParseError(f"header is missing {key!r}", line=1)

    vocab = CharVocab(tuple(header["chars"]))
    lexicon = EntityLexicon(tuple((s, t) for s, t in header["entities"]))
    label_names = tuple(header["labels"])
    label_ids = {name: i for i, name in enumerate(label_names)}
    label_to_task = header["label_to_task"]
    num_tasks = header["num_tasks"]
    if not isinstance(num_tasks, int) or num_tasks < 1:
        raise StreamParseError(f"bad num_tasks {num_tasks!r}", line=1)

    task_labels: dict[int, list[str]] = {k: [] for k in range(num_tasks)}
    seen_labels: set[str] = set()
    for name in label_names:
        if name not in label_to_task:
            raise StreamParseError(f"label {name!r} missing from label_to_task", line=1)
        task = label_to_task[name]
        if not isinstance(task, int) or not 0 <= task < num_tasks:
            raise StreamParseError(f"label {name!r} maps to bad task {task!r}", line=1)
        if name in seen_labels:
            raise StreamValidationError(
                f"label {name!r} appears in more than one task; "
                "task label sets must be pairwise disjoint"
            )
        seen_labels.add(name)
        task_labels[task].append(name)

    # labels must be contiguous in task order, since classifier ids grow with the stream
    expect = [name for k in range(num_tasks) for name in task_labels[k]]
    if list(label_names) != expect:
        raise StreamValidationError(
            "header labels are not ordered by task; "
            f"got {list(label_names)[:6]}..., expected {expect[:6]}..."
        )

    buckets: dict[tuple[int, str], list[tuple[str, list[str], int]]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        rec = parse(lineno, raw)
        for key in ("text", "entities", "label", "task", "split"):
            if key not in rec:
                raise StreamParseError(f"record is missing {key!r}", line=lineno)
        if rec["label"] not in label_ids:
            raise StreamValidationError(
                f"line {lineno}: unknown label {rec['label']!r}"
            )
        if rec["task"] != label_to_task[rec["label"]]:
            raise StreamValidationError(
                f"line {lineno}: label {rec['label']!r} belongs to task "
                f"{label_to_task[rec['label']]}, record says {rec['task']}"
            )
        if rec["split"] not in ("train", "test"):
            raise StreamParseError(f"bad split {rec['split']!r}", line=lineno)
        for surface in rec["entities"]:
            if surface not in lexicon:
                raise StreamValidationError(
                    f"line {lineno}: entity {surface!r} not in lexicon"
                )
        buckets.setdefault((rec["task"], rec["split"]), []).append(
            (rec["text"], rec["entities"], label_ids[rec["label"]])
        )

    tasks = []
    for k in range(num_tasks):
        names = tuple(task_labels[k])
        ids = tuple(label_ids[n] for n in names)
        notes = {"train": [], "test": []}
        for split in ("train", "test"):
            for idx, (text, entities, label_id) in enumerate(buckets.get((k, split), [])):
                notes[split].append(
                    _build_note(text, label_id, k, split, idx, vocab, lexicon, entities)
                )
        if not notes["train"]:
            raise StreamValidationError(f"task {k} has no training notes")
        tasks.append(
            Task(
                index=k,
                label_ids=ids,
                label_names=names,
                train=tuple(notes["train"]),
                test=tuple(notes["test"]),
            )
        )
    return TaskStream(
        char_vocab=vocab,
        lexicon=lexicon,
        label_names=label_names,
        tasks=tuple(tasks),
        format_version=FORMAT_VERSION,
    )
