"""Metrics, embedding export, and the experiment driver."""

import json
import math

import numpy as np
import numpy.testing as npt
import pytest

import lifelearn.evaluation as evaluation
from lifelearn.continual import E2mcConfig
from lifelearn.errors import ConfigError, MetricError
from lifelearn.evaluation import (
    ExperimentConfig,
    StageReport,
    aggregation_degree,
    evaluate_stage,
    evaluate_task,
    export_embeddings,
    mean_pairwise_cosine,
    pca_2d,
    run_experiment,
    synthetic_preset,
    write_all_reports,
    write_reports_json,
    write_stage_reports,
    write_summary,
    write_timings,
)
from lifelearn.model import DualEncoderModel, ModelConfig, pack_notes
from lifelearn.numeric import RngStream
from lifelearn.stream import Note, SynthSpec, synthesize_stream

SPEC = SynthSpec(
    classes=4, tasks=2, notes_per_class=8, shared_entities=6,
    filler_words=12, noise_rate=0.0,
)
FAST = E2mcConfig(
    lr_phase1=0.05, lr_align_context=0.01, lr_align_entity=0.01,
    batch_train=8, batch_phase2=8, replay_per_batch=4, budget=16,
    epochs_per_task=2,
)
SMALL_MODEL = ModelConfig(embed_dim=4, hidden=3)


@pytest.fixture(scope="module")
def stream():
    return synthesize_stream(SPEC, RngStream(7))


@pytest.fixture(scope="module")
def model(stream):
    m = DualEncoderModel(
        stream.char_vocab.size, stream.lexicon.size, SMALL_MODEL,
        RngStream(11), n_classes=SPEC.classes,
    )
    return m


def make_note(char_ids, entity_ids, label=0, task=0):
    return Note(
        text="x", entities=(), label=label, task=task,
        char_ids=tuple(char_ids), entity_ids=tuple(entity_ids), source_id="t",
    )


# ---------------------------------------------------------------------------
# accuracy


def test_evaluate_task_matches_per_note_argmax(model, stream):
    notes = list(stream.tasks[0].test)
    hits = 0
    for note in notes:
        enc = model.forward_batch(pack_notes([note]))
        hits += int(enc.logits[0].argmax() == note.label)
    assert evaluate_task(model, notes) == hits / len(notes)


def test_evaluate_task_chunking_is_invisible(model, stream, monkeypatch):
    notes = list(stream.tasks[0].test)
    whole = evaluate_task(model, notes)
    monkeypatch.setattr(evaluation, "EVAL_BATCH", 4)
    assert evaluate_task(model, notes) == whole


def test_evaluate_task_rejects_empty_list(model):
    with pytest.raises(MetricError):
        evaluate_task(model, [])


def test_evaluate_stage_aggregates_per_task(model, stream):
    first, avg, per_task = evaluate_stage(model, stream, 2)
    assert per_task == [evaluate_task(model, list(t.test)) for t in stream.tasks]
    assert first == per_task[0]
    npt.assert_allclose(avg, np.mean(per_task))


@pytest.mark.parametrize("stage", [0, 3, -1])
def test_evaluate_stage_rejects_bad_stage(model, stream, stage):
    with pytest.raises(MetricError):
        evaluate_stage(model, stream, stage)


# ---------------------------------------------------------------------------
# aggregation metric


def test_mean_pairwise_cosine_known_values():
    assert mean_pairwise_cosine([[1.0, 0.0], [2.0, 0.0]]) == pytest.approx(1.0)
    assert mean_pairwise_cosine([[1.0, 0.0], [0.0, 5.0]]) == pytest.approx(0.0)
    assert mean_pairwise_cosine([[1.0, 0.0], [-3.0, 0.0]]) == pytest.approx(-1.0)
    # pairs: (e0,e1)=0, (e0,e0+e1)=1/sqrt2, (e1,e0+e1)=1/sqrt2
    got = mean_pairwise_cosine([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert got == pytest.approx(np.sqrt(2.0) / 3.0)


def test_mean_pairwise_cosine_zero_row_scores_zero():
    # a zero vector has no direction, so it contributes 0 to both its pairs
    got = mean_pairwise_cosine([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert got == pytest.approx(1.0 / 3.0)


@pytest.mark.parametrize("bad", [np.zeros(3), np.zeros((1, 3)), np.zeros((2, 2, 2))])
def test_mean_pairwise_cosine_rejects_bad_shape(bad):
    with pytest.raises(MetricError):
        mean_pairwise_cosine(bad)


def test_aggregation_degree_matches_manual(model):
    notes = [
        make_note((2, 3), (0, 1, 2)),
        make_note((3, 4), (3, 4)),
        make_note((4, 5), (1, 1, 5)),  # duplicates collapse to 2 distinct ids
    ]
    align = model.slot("align_s").value
    expected = []
    for ids in [(0, 1, 2), (3, 4), (1, 5)]:
        vec = model.single_entity_states(np.array(ids, dtype=np.int64)) @ align
        expected.append(mean_pairwise_cosine(vec))
    npt.assert_allclose(aggregation_degree(model, notes), np.mean(expected))


def test_aggregation_degree_skips_single_entity_notes(model):
    lone = make_note((2, 3), (4,))
    pair = make_note((3, 4), (0, 3))
    both = aggregation_degree(model, [lone, pair])
    assert both == aggregation_degree(model, [pair])


def test_aggregation_degree_needs_qualifying_note(model):
    with pytest.raises(MetricError):
        aggregation_degree(model, [make_note((2,), (4,))])
    with pytest.raises(MetricError):
        aggregation_degree(model, [])


def test_aggregation_degree_needs_entity_channel(stream):
    bare = DualEncoderModel(
        stream.char_vocab.size, 0,
        ModelConfig(embed_dim=4, hidden=3, use_entities=False),
        RngStream(5), n_classes=2,
    )
    with pytest.raises(MetricError):
        aggregation_degree(bare, [make_note((2, 3), (0, 1))])


# ---------------------------------------------------------------------------
# 2-D projection


def test_pca_2d_collinear_points():
    x = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    coords, comps = pca_2d(x)
    # direction of maximal variance is (1,2)/sqrt5, sign fixed on index 1
    npt.assert_allclose(comps[0], np.array([1.0, 2.0]) / np.sqrt(5.0), atol=1e-12)
    npt.assert_allclose(coords[:, 1], 0.0, atol=1e-12)
    npt.assert_allclose(coords[:, 0], (x[:, 0] - 1.5) * np.sqrt(5.0), atol=1e-12)


def test_pca_2d_components_orthonormal():
    x = np.random.default_rng(3).normal(size=(12, 5))
    coords, comps = pca_2d(x)
    npt.assert_allclose(comps @ comps.T, np.eye(2), atol=1e-12)
    npt.assert_allclose(coords, (x - x.mean(axis=0)) @ comps.T, atol=1e-12)


def test_pca_2d_sign_is_deterministic():
    x = np.random.default_rng(4).normal(size=(9, 4))
    _, comps = pca_2d(x)
    _, flipped = pca_2d(-x)  # mirrored cloud, same principal directions
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        assert comps[i, j] > 0
        assert flipped[i, j] > 0


def test_pca_2d_single_column_pads_zero_direction():
    x = np.array([[1.0], [2.0], [4.0]])
    coords, comps = pca_2d(x)
    npt.assert_allclose(comps[1], 0.0)
    npt.assert_allclose(coords[:, 1], 0.0)


@pytest.mark.parametrize("bad", [np.zeros(4), np.zeros((1, 4))])
def test_pca_2d_rejects_bad_shape(bad):
    with pytest.raises(MetricError):
        pca_2d(bad)


# ---------------------------------------------------------------------------
# embedding export


def test_export_embeddings_rows_match_model(model, stream, tmp_path):
    path = tmp_path / "emb.csv"
    n = export_embeddings(model, stream, 3, path)
    assert n == stream.lexicon.size
    lines = path.read_text(encoding="utf-8").splitlines()
    width = 2 * SMALL_MODEL.hidden
    head = ["entity", "type", "stage"]
    head += [f"v{j}" for j in range(width)] + ["pca_x", "pca_y"]
    assert lines[0] == ",".join(head)
    assert len(lines) == 1 + stream.lexicon.size

    ids = np.arange(stream.lexicon.size, dtype=np.int64)
    vectors = model.single_entity_states(ids) @ model.slot("align_s").value
    coords, _ = pca_2d(vectors)
    row = lines[1 + 4].split(",")
    surface, etype = stream.lexicon.entries[4]
    assert row[:3] == [surface, etype, "3"]
    npt.assert_allclose([float(v) for v in row[3 : 3 + width]], vectors[4], rtol=1e-10)
    npt.assert_allclose([float(v) for v in row[3 + width :]], coords[4], rtol=1e-10)


def test_export_embeddings_needs_entity_channel(stream, tmp_path):
    bare = DualEncoderModel(
        stream.char_vocab.size, 0,
        ModelConfig(embed_dim=4, hidden=3, use_entities=False),
        RngStream(5), n_classes=2,
    )
    with pytest.raises(MetricError):
        export_embeddings(bare, stream, 1, tmp_path / "emb.csv")


# ---------------------------------------------------------------------------
# experiment configuration


@pytest.mark.parametrize(
    "kwargs",
    [
        {"strategies": ()},
        {"strategies": ("nope",)},
        {"strategies": ("gem",)},
        {"strategies": ("e2mc", "e2mc")},
        {"seeds": ()},
        {"seeds": (1, 1)},
        {"jobs": 0},
        {"ewc_lambda": -1.0},
        {"ewc_sample": 0},
        {"model": ModelConfig(embed_dim=0)},
        {"train": E2mcConfig(lr_phase1=0.0)},
    ],
)
def test_experiment_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kwargs).validate()


def test_experiment_config_accepts_defaults():
    ExperimentConfig().validate()


def test_synthetic_preset_passthrough():
    cfg = synthetic_preset(("finetune", "e2mc"), (1, 2, 3), jobs=2, checkpoints=False)
    cfg.validate()
    assert cfg.strategies == ("finetune", "e2mc")
    assert cfg.seeds == (1, 2, 3)
    assert cfg.jobs == 2
    assert cfg.checkpoints is False
    # tuned for short synthetic notes: keyword detection plus big steps
    assert cfg.model.agg_mode == "max-pool"
    assert cfg.train.lr_phase1 > E2mcConfig().lr_phase1
    assert cfg.train.epochs_per_task >= E2mcConfig().epochs_per_task


# ---------------------------------------------------------------------------
# experiment driver


@pytest.fixture(scope="module")
def experiment(stream, tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = ExperimentConfig(
        strategies=("finetune", "e2mc", "e2mc-no-entity"),
        seeds=(1, 2),
        model=SMALL_MODEL,
        train=FAST,
        ewc_lambda=1.0,
    )
    return cfg, run_experiment(stream, cfg, out), out


def test_run_experiment_cell_grid(experiment, stream):
    cfg, reports, _ = experiment
    n_stages = len(stream.tasks)
    assert len(reports) == len(cfg.strategies) * len(cfg.seeds) * n_stages
    expected = [
        (name, seed, stage)
        for name in cfg.strategies
        for seed in cfg.seeds
        for stage in range(1, n_stages + 1)
    ]
    assert [(r.strategy, r.seed, r.stage) for r in reports] == expected


def test_run_experiment_metric_ranges(experiment):
    _, reports, _ = experiment
    for r in reports:
        assert 0.0 <= r.acc_first <= 1.0
        assert 0.0 <= r.acc_avg <= 1.0
        assert len(r.per_task_acc) == r.stage
        assert r.per_task_acc[0] == r.acc_first
        npt.assert_allclose(r.acc_avg, np.mean(r.per_task_acc))
        assert r.wall_time >= 0.0


def test_run_experiment_aggregation_only_with_entities(experiment):
    _, reports, _ = experiment
    for r in reports:
        if r.strategy == "e2mc-no-entity":
            assert math.isnan(r.aggregation_degree)
        else:
            assert -1.0 <= r.aggregation_degree <= 1.0


def test_run_experiment_omega_probes(experiment):
    _, reports, _ = experiment
    for r in reports:
        probes = (r.omega_probe_before, r.omega_probe_after)
        if r.strategy.startswith("e2mc") and r.stage >= 2:
            assert all(np.isfinite(probes))  # no-entity still aligns context
        else:  # stage 1 has nothing to preserve; finetune never consolidates
            assert all(math.isnan(p) for p in probes)


def test_run_experiment_writes_run_files(experiment, stream):
    cfg, _, out = experiment
    n_stages = len(stream.tasks)
    for name in cfg.strategies:
        for seed in cfg.seeds:
            run_dir = out / name / f"seed-{seed}"
            log = (run_dir / "train_log.csv").read_text(encoding="utf-8")
            assert log.splitlines()[0] == "stage,epoch,step,phase,loss,omega_c,omega_s"
            for stage in range(1, n_stages + 1):
                assert (run_dir / f"stage-{stage:02d}.npz").exists()
                emb = run_dir / f"embeddings-stage-{stage:02d}.csv"
                assert emb.exists() == (name != "e2mc-no-entity")


def test_run_experiment_checkpoints_reload(experiment, stream):
    _, reports, out = experiment
    model = DualEncoderModel.load(out / "e2mc" / "seed-1" / "stage-02.npz")
    first, avg, _ = evaluate_stage(model, stream, 2)
    row = next(r for r in reports if (r.strategy, r.seed, r.stage) == ("e2mc", 1, 2))
    assert (first, avg) == (row.acc_first, row.acc_avg)


def test_run_experiment_optional_outputs_skippable(stream, tmp_path):
    cfg = ExperimentConfig(
        strategies=("e2mc",), seeds=(1,), model=SMALL_MODEL, train=FAST,
        checkpoints=False, embeddings=False,
    )
    run_experiment(stream, cfg, tmp_path)
    run_dir = tmp_path / "e2mc" / "seed-1"
    assert (run_dir / "train_log.csv").exists()
    assert not list(run_dir.glob("*.npz"))
    assert not list(run_dir.glob("embeddings-*.csv"))


def test_run_experiment_is_deterministic(experiment, stream, tmp_path):
    cfg, reports, _ = experiment
    again = run_experiment(stream, cfg, tmp_path)
    assert again == reports or [
        (r.strategy, r.seed, r.stage, r.acc_first, r.acc_avg, r.per_task_acc)
        for r in again
    ] == [
        (r.strategy, r.seed, r.stage, r.acc_first, r.acc_avg, r.per_task_acc)
        for r in reports
    ]
    # byte-level check through the deterministic writer (timing stays apart)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_stage_reports(reports, a)
    write_stage_reports(again, b)
    assert a.read_bytes() == b.read_bytes()


def test_run_experiment_parallel_matches_serial(stream, tmp_path):
    cfg_serial = ExperimentConfig(
        strategies=("finetune",), seeds=(1, 2), model=SMALL_MODEL, train=FAST,
        checkpoints=False, embeddings=False,
    )
    cfg_par = ExperimentConfig(
        strategies=("finetune",), seeds=(1, 2), model=SMALL_MODEL, train=FAST,
        jobs=2, checkpoints=False, embeddings=False,
    )
    serial = run_experiment(stream, cfg_serial, tmp_path / "s")
    par = run_experiment(stream, cfg_par, tmp_path / "p")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_stage_reports(serial, a)
    write_stage_reports(par, b)
    assert a.read_bytes() == b.read_bytes()


def test_run_experiment_validates_config(stream, tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(stream, ExperimentConfig(strategies=("gem",)), tmp_path)


# ---------------------------------------------------------------------------
# report writers


def test_write_stage_reports_format(experiment, tmp_path):
    _, reports, _ = experiment
    path = tmp_path / "stage.csv"
    write_stage_reports(reports, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == (
        "strategy,seed,stage,acc_first,acc_avg,aggregation_degree,"
        "omega_probe_before,omega_probe_after,mean_omega_c,mean_omega_s"
    )
    assert len(lines) == 1 + len(reports)
    r = reports[0]
    cell = lines[1].split(",")
    assert cell[:3] == [r.strategy, str(r.seed), str(r.stage)]
    assert float(cell[3]) == pytest.approx(r.acc_first, abs=1e-11)


def test_write_timings_format(experiment, tmp_path):
    _, reports, _ = experiment
    path = tmp_path / "timings.csv"
    write_timings(reports, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "strategy,seed,stage,wall_time"
    assert len(lines) == 1 + len(reports)
    assert float(lines[1].split(",")[3]) == pytest.approx(reports[0].wall_time, rel=1e-9)


def test_write_summary_means_and_stds(experiment, stream, tmp_path):
    cfg, reports, _ = experiment
    path = tmp_path / "summary.csv"
    write_summary(reports, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == (
        "strategy,stage,seeds,acc_first_mean,acc_first_std,acc_avg_mean,acc_avg_std"
    )
    assert len(lines) == 1 + len(cfg.strategies) * len(stream.tasks)
    # check one (strategy, stage) group against a direct computation
    rows = [r for r in reports if r.strategy == "e2mc" and r.stage == 2]
    firsts = np.array([r.acc_first for r in rows])
    target = next(l for l in lines[1:] if l.startswith("e2mc,2,"))
    cells = target.split(",")
    assert cells[2] == str(len(cfg.seeds))
    assert float(cells[3]) == pytest.approx(firsts.mean(), abs=1e-11)
    assert float(cells[4]) == pytest.approx(firsts.std(ddof=0), abs=1e-11)


def test_write_reports_json_roundtrip(experiment, tmp_path):
    _, reports, _ = experiment
    path = tmp_path / "reports.json"
    write_reports_json(reports, path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert len(payload) == len(reports)
    row, r = payload[0], reports[0]
    assert row["strategy"] == r.strategy
    assert row["per_task_acc"] == list(r.per_task_acc)
    nan_row = next(p for p in payload if p["strategy"] == "finetune")
    assert math.isnan(nan_row["omega_probe_before"])


def test_write_all_reports_creates_files(experiment, tmp_path):
    _, reports, _ = experiment
    write_all_reports(reports, tmp_path)
    for name in ("stage_reports.csv", "timings.csv", "summary.csv", "reports.json"):
        assert (tmp_path / name).exists()


def test_stage_report_is_frozen(experiment):
    _, reports, _ = experiment
    with pytest.raises(AttributeError):
        reports[0].acc_first = 0.5
