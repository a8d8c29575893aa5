"""Tests for vocabularies, entity extraction, task splitting, the synthetic
generator, and stream serialisation."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelearn.errors import (
    ConfigError,
    EmptyInputError,
    StreamParseError,
    StreamValidationError,
)
from lifelearn.numeric import RngStream
from lifelearn.stream import (
    PAD_ID,
    UNK_ID,
    CharVocab,
    EntityLexicon,
    SynthSpec,
    extract_entities,
    load_stream,
    save_stream,
    split_tasks,
    synthesize_stream,
    tokenize_chars,
)


# ---------------------------------------------------------------------------
# character vocabulary


def test_char_vocab_reserves_pad_and_unk():
    vocab = CharVocab.from_texts(["ab", "ba"])
    assert vocab.chars == ("a", "b")  # first-seen order
    assert vocab.size == 4
    assert PAD_ID == 0 and UNK_ID == 1
    assert tokenize_chars("abz", vocab) == (2, 3, UNK_ID)


def test_char_vocab_empty_text_encodes_empty():
    vocab = CharVocab.from_texts(["xy"])
    assert tokenize_chars("", vocab) == ()


# ---------------------------------------------------------------------------
# entity lexicon


def _lexicon(*surfaces):
    return EntityLexicon(tuple((s, "finding") for s in surfaces))


def test_lexicon_ids_follow_entry_order():
    lex = EntityLexicon((("xu", "finding"), ("veho", "medication")))
    assert lex.size == 2
    assert lex.id_of("xu") == 0 and lex.id_of("veho") == 1
    assert lex.type_of("veho") == "medication"
    assert lex.encode(("veho", "xu")) == (1, 0)
    assert "xu" in lex and "nope" not in lex


def test_lexicon_rejects_duplicates_and_empty():
    with pytest.raises(StreamValidationError):
        _lexicon("xu", "xu")
    with pytest.raises(StreamValidationError):
        _lexicon("")


def test_lexicon_tsv_roundtrip(tmp_path):
    lex = EntityLexicon((("xu", "finding"), ("veho", "medication")))
    path = tmp_path / "lex.tsv"
    lex.save(path)
    assert EntityLexicon.load(path).entries == lex.entries


def test_lexicon_load_rejects_bad_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("xu\tfinding\nno-tab-here\n", encoding="utf-8")
    with pytest.raises(StreamParseError) as exc:
        EntityLexicon.load(path)
    assert exc.value.line == 2


# ---------------------------------------------------------------------------
# greedy longest-match extraction


def test_extract_longest_match_wins():
    lex = _lexicon("ab", "abc", "cd")
    assert extract_entities("abcd", lex) == ("abc",)
    assert extract_entities("abcde", _lexicon("ab", "cde")) == ("ab", "cde")


def test_extract_non_overlapping_repeats():
    lex = _lexicon("xu")
    assert extract_entities("xu xu xu", lex) == ("xu", "xu", "xu")
    assert extract_entities("xuxu", lex) == ("xu", "xu")


def test_extract_no_match_returns_empty():
    assert extract_entities("hello", _lexicon("xu")) == ()
    assert extract_entities("hello", EntityLexicon(())) == ()


def test_extract_matches_inside_words():
    # extraction is substring-based; the generator avoids collisions by
    # construction, not the extractor
    assert extract_entities("zabz", _lexicon("ab")) == ("ab",)


_SURFACES = ("xu", "veho", "chaki", "qozi", "wexa")


@given(st.lists(st.sampled_from(_SURFACES), min_size=0, max_size=8))
@settings(deadline=None, max_examples=60)
def test_extract_recovers_space_separated_surfaces(words):
    lex = _lexicon(*_SURFACES)
    text = " ".join(words)
    assert extract_entities(text, lex) == tuple(words)


# ---------------------------------------------------------------------------
# task splitting


def _records(n_classes, per_class):
    recs = []
    for c in range(n_classes):
        for i in range(per_class):
            recs.append((f"note {i} of class {c}", f"label{c}"))
    return recs


def test_split_tasks_partitions_labels():
    stream = split_tasks(_records(4, 10), _lexicon("xu"), num_tasks=2, rng=RngStream(5))
    assert stream.num_tasks == 2
    assert stream.num_classes == 4
    assert stream.tasks[0].label_ids == (0, 1)
    assert stream.tasks[1].label_ids == (2, 3)
    assert stream.classes_through(1) == 2
    assert stream.classes_through(2) == 4
    # global ids are positions in label_names
    for task in stream.tasks:
        for lid, name in zip(task.label_ids, task.label_names):
            assert stream.label_names[lid] == name
    # all four original labels survive
    assert sorted(stream.label_names) == [f"label{c}" for c in range(4)]


def test_split_tasks_train_fraction():
    stream = split_tasks(
        _records(2, 10), _lexicon("xu"), num_tasks=1, rng=RngStream(5), train_fraction=0.8
    )
    task = stream.tasks[0]
    assert len(task.train) == 16 and len(task.test) == 4
    # every class keeps at least one test note even at extreme fractions
    stream = split_tasks(
        _records(2, 3), _lexicon("xu"), num_tasks=1, rng=RngStream(5), train_fraction=0.99
    )
    assert len(stream.tasks[0].test) == 2


def test_split_tasks_is_deterministic():
    a = split_tasks(_records(4, 6), _lexicon("xu"), 2, RngStream(9))
    b = split_tasks(_records(4, 6), _lexicon("xu"), 2, RngStream(9))
    assert a.label_names == b.label_names
    assert [n.text for t in a.tasks for n in t.train] == [
        n.text for t in b.tasks for n in t.train
    ]


def test_split_tasks_vocab_from_train_only():
    stream = split_tasks(_records(2, 10), _lexicon("xu"), 1, RngStream(5))
    train_chars = {ch for n in stream.tasks[0].train for ch in n.text}
    assert set(stream.char_vocab.chars) == train_chars
    for note in stream.tasks[0].test:
        for ch, cid in zip(note.text, note.char_ids):
            assert cid == (UNK_ID if ch not in train_chars else cid)
            assert cid != PAD_ID


def test_split_tasks_rejects_bad_input():
    with pytest.raises(EmptyInputError):
        split_tasks([], _lexicon("xu"), 1, RngStream(1))
    with pytest.raises(ConfigError):
        split_tasks(_records(3, 4), _lexicon("xu"), 2, RngStream(1))  # 3 % 2 != 0
    with pytest.raises(ConfigError):
        split_tasks(_records(2, 4), _lexicon("xu"), 0, RngStream(1))
    with pytest.raises(ConfigError):
        split_tasks(_records(2, 4), _lexicon("xu"), 1, RngStream(1), train_fraction=1.0)
    with pytest.raises(StreamValidationError):
        split_tasks([("only one", "a"), ("x", "b"), ("y", "b")], _lexicon("xu"), 1, RngStream(1))
    with pytest.raises(StreamValidationError):
        split_tasks([("", "a"), ("x", "a")], _lexicon("xu"), 1, RngStream(1))


# ---------------------------------------------------------------------------
# synthetic generator


SMALL = SynthSpec(
    classes=6,
    tasks=3,
    notes_per_class=8,
    shared_entities=10,
    filler_words=20,
    noise_rate=0.0,
)


def test_synth_spec_validation():
    for bad in (
        {"classes": 1},
        {"classes": 6, "tasks": 4},
        {"notes_per_class": 1},
        {"keywords_per_class": 0},
        {"noise_rate": 1.0},
        {"noise_rate": -0.1},
        {"min_words": 5, "max_words": 4},
        {"min_words": 0},
    ):
        from dataclasses import replace

        with pytest.raises(ConfigError):
            replace(SMALL, **bad).validate()


def test_synthesize_shapes():
    stream = synthesize_stream(SMALL, RngStream(3))
    assert stream.num_classes == 6
    assert stream.num_tasks == 3
    for task in stream.tasks:
        assert len(task.label_ids) == 2
        assert len(task.train) + len(task.test) == 2 * 8
        assert len(task.test) >= 2


def test_synthesize_deterministic():
    a = synthesize_stream(SMALL, RngStream(11))
    b = synthesize_stream(SMALL, RngStream(11))
    assert a.label_names == b.label_names
    assert a.lexicon.entries == b.lexicon.entries
    assert [n.text for t in a.tasks for n in t.train] == [
        n.text for t in b.tasks for n in t.train
    ]
    c = synthesize_stream(SMALL, RngStream(12))
    assert [n.text for t in c.tasks for n in t.train] != [
        n.text for t in a.tasks for n in t.train
    ]


def test_synthesize_every_note_carries_class_keyword():
    """With zero noise each note must contain a keyword of its own class."""
    stream = synthesize_stream(SMALL, RngStream(7))
    lex = stream.lexicon
    for task in stream.tasks:
        for note in task.train + task.test:
            cond = int(stream.label_names[note.label].removeprefix("cond"))
            keywords = {lex.entries[cond][0]}  # one keyword per class here
            assert keywords & set(note.entities), note.text


def test_synthesize_extraction_matches_tokens():
    """Filler never collides with lexicon surfaces, so the extracted
    entities are exactly the entity tokens of the text."""
    stream = synthesize_stream(SMALL, RngStream(7))
    lex = stream.lexicon
    for task in stream.tasks:
        for note in task.train[:10]:
            expected = tuple(t for t in note.text.split() if t in lex)
            assert note.entities == expected
            assert note.entities == extract_entities(note.text, lex)
            assert note.entity_ids == lex.encode(note.entities)


def test_synthesize_noise_drops_keywords():
    from dataclasses import replace

    noisy = replace(SMALL, noise_rate=0.5, notes_per_class=40)
    stream = synthesize_stream(noisy, RngStream(3))
    lex = stream.lexicon
    missing = 0
    total = 0
    for task in stream.tasks:
        for note in task.train + task.test:
            cond = int(stream.label_names[note.label].removeprefix("cond"))
            total += 1
            if lex.entries[cond][0] not in note.entities:
                missing += 1
    assert 0.3 < missing / total < 0.7


def test_synthesize_shared_entities_in_every_note():
    stream = synthesize_stream(SMALL, RngStream(5))
    symptom_ids = {
        i for i, (_, t) in enumerate(stream.lexicon.entries) if t == "symptom"
    }
    for task in stream.tasks:
        for note in task.train + task.test:
            shared = [e for e in note.entity_ids if e not in symptom_ids]
            assert 4 <= len(shared) <= 8


# ---------------------------------------------------------------------------
# serialisation


def _small_stream(seed=3):
    return synthesize_stream(SMALL, RngStream(seed))


def test_stream_roundtrip(tmp_path):
    stream = _small_stream()
    path = tmp_path / "stream.jsonl"
    save_stream(stream, path)
    loaded = load_stream(path)
    assert loaded.label_names == stream.label_names
    assert loaded.lexicon.entries == stream.lexicon.entries
    assert loaded.char_vocab.chars == stream.char_vocab.chars
    for ta, tb in zip(stream.tasks, loaded.tasks):
        assert ta.label_ids == tb.label_ids
        assert ta.label_names == tb.label_names
        for na, nb in zip(ta.train + ta.test, tb.train + tb.test):
            assert na.text == nb.text
            assert na.entities == nb.entities
            assert na.label == nb.label
            assert na.task == nb.task
            assert na.char_ids == nb.char_ids


def test_stream_roundtrip_is_byte_stable(tmp_path):
    stream = _small_stream()
    p1 = tmp_path / "one.jsonl"
    p2 = tmp_path / "two.jsonl"
    save_stream(stream, p1)
    save_stream(load_stream(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def _lines(tmp_path, mutate):
    """Save a small stream, apply `mutate` to its lines, write it back."""
    path = tmp_path / "stream.jsonl"
    save_stream(_small_stream(), path)
    lines = path.read_text(encoding="utf-8").splitlines()
    lines = mutate(lines)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_load_rejects_wrong_format(tmp_path):
    def mutate(lines):
        h = json.loads(lines[0])
        h["format"] = "something-else"
        return [json.dumps(h)] + lines[1:]

    with pytest.raises(StreamParseError, match="format"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_wrong_version(tmp_path):
    def mutate(lines):
        h = json.loads(lines[0])
        h["version"] = 99
        return [json.dumps(h)] + lines[1:]

    with pytest.raises(StreamParseError, match="version"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_missing_header_key(tmp_path):
    def mutate(lines):
        h = json.loads(lines[0])
        del h["labels"]
        return [json.dumps(h)] + lines[1:]

    with pytest.raises(StreamParseError, match="labels"):
        load_stream(_lines(tmp_path, mutate))


def test_load_reports_bad_json_line(tmp_path):
    path = _lines(tmp_path, lambda lines: lines[:3] + ["{not json"] + lines[4:])
    with pytest.raises(StreamParseError) as exc:
        load_stream(path)
    assert exc.value.line == 4


def test_load_rejects_unknown_label(tmp_path):
    def mutate(lines):
        rec = json.loads(lines[1])
        rec["label"] = "mystery"
        return lines[:1] + [json.dumps(rec)] + lines[2:]

    with pytest.raises(StreamValidationError, match="mystery"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_label_task_mismatch(tmp_path):
    def mutate(lines):
        rec = json.loads(lines[1])
        rec["task"] = (rec["task"] + 1) % 3
        return lines[:1] + [json.dumps(rec)] + lines[2:]

    with pytest.raises(StreamValidationError, match="belongs to task"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_bad_split(tmp_path):
    def mutate(lines):
        rec = json.loads(lines[1])
        rec["split"] = "validation"
        return lines[:1] + [json.dumps(rec)] + lines[2:]

    with pytest.raises(StreamParseError, match="split"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_foreign_entity(tmp_path):
    def mutate(lines):
        rec = json.loads(lines[1])
        rec["entities"] = ["notanentity"]
        return lines[:1] + [json.dumps(rec)] + lines[2:]

    with pytest.raises(StreamValidationError, match="notanentity"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_label_order_not_by_task(tmp_path):
    def mutate(lines):
        h = json.loads(lines[0])
        h["labels"] = list(reversed(h["labels"]))
        return [json.dumps(h)] + lines[1:]

    with pytest.raises(StreamValidationError, match="ordered by task"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_task_without_training_notes(tmp_path):
    def mutate(lines):
        kept = [lines[0]]
        for raw in lines[1:]:
            rec = json.loads(raw)
            if rec["task"] == 0 and rec["split"] == "train":
                continue
            kept.append(raw)
        return kept

    with pytest.raises(StreamValidationError, match="no training notes"):
        load_stream(_lines(tmp_path, mutate))


def test_load_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(StreamParseError, match="empty"):
        load_stream(path)
