"""Experiment orchestration: sample construction, run artifacts,
reproducibility, reporting, and the finite-difference audit."""

import json
import math
import os

import numpy as np
import pytest

from sidrec import harness
from sidrec.config import TrainingConfig, config_hash
from sidrec.datagen import InteractionEvent, WorldConfig, leave_one_out_split
from sidrec.errors import DataError, InputError
from sidrec.evalkit import read_report


def ev(user, item, ts, labels=(1, 0, 0)):
    return InteractionEvent(user, item, ts, labels)


def micro_config(**kw):
    base = dict(levels=2, codes_per_level=8, content_dim=8, collab_dim=4,
                tokenizer_dim=16, tokenizer_blocks=1, tokenizer_heads=2,
                tokenizer_ff=32, recommender_dim=24, recommender_blocks=1,
                recommender_heads=2, recommender_ff=48, n_max=12,
                csa_hidden=8, capacity=4, beam_width=4, decode_beam_width=8,
                batch_size=4, warmup_steps=40, dynamic_steps=30,
                eval_interval=20, eval_users=40, seed=3)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="module")
def micro_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    wc = WorldConfig(n_users=40, n_items=30, n_clusters=4, content_dim=8)
    harness.synth_run(out, wc, 2000, seed=7)
    return out


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory, micro_data):
    run = tmp_path_factory.mktemp("run")
    manifest = harness.train_run(micro_data / "events.tsv",
                                 micro_data / "catalog.tsv",
                                 run, micro_config())
    return run, manifest


# -- sample construction --------------------------------------------------------


def test_build_samples_holds_out_last_two():
    # user 0: five events -> three training samples; user 1: two -> both kept
    events = [ev(0, 10, 0), ev(1, 20, 1), ev(0, 11, 2), ev(0, 12, 3),
              ev(1, 21, 4), ev(0, 13, 5), ev(0, 14, 6)]
    samples = harness.build_samples(events, n_max=50)
    assert [(s[0], s[1], s[3]) for s in samples] == [
        ((), 10, 0), ((), 20, 1), ((10,), 11, 2), ((10, 11), 12, 3),
        ((20,), 21, 4),
    ]
    labels = samples[0][2]
    assert labels == {"click": 1, "like": 0, "follow": 0}


def test_build_samples_history_truncates():
    events = [ev(0, i, i) for i in range(10)]
    samples = harness.build_samples(events, n_max=3)
    assert samples[-1][0] == (4, 5, 6)  # history for target 7, last 3 only
    assert len(samples) == 8


def test_build_samples_targets_match_split():
    # whatever build_samples trains on must avoid every val/test target
    events = [ev(u, 100 * u + i, t)
              for t, (u, i) in enumerate((u, i) for i in range(6)
                                         for u in range(3))]
    split = leave_one_out_split(events)
    samples = harness.build_samples(events)
    for u in range(3):
        targets = [s[1] for s in samples if s[1] // 100 == u]
        assert split[u].val_item not in targets
        assert split[u].test_item not in targets
        assert tuple(targets) == split[u].history


def test_validation_samples_limit_and_order():
    events = [ev(u, u * 10 + i, u * 10 + i) for u in (3, 1, 2)
              for i in range(4)]
    split = leave_one_out_split(events)
    val = harness.validation_samples(split)
    assert [s[1] for s in val] == [12, 22, 32]  # sorted by user
    assert [s[0] for s in val] == [(10, 11), (20, 21), (30, 31)]
    assert len(harness.validation_samples(split, limit=2)) == 2


def test_sample_cycler_epochs_shift_timestamps():
    samples = [((), i, None, i) for i in range(5)]
    cyc = harness.SampleCycler(samples, batch_size=2, ts_period=100)
    got = [cyc.next_batch() for _ in range(6)]
    assert [len(b) for b in got] == [2, 2, 1, 2, 2, 1]
    assert [s[3] for b in got[:3] for s in b] == [0, 1, 2, 3, 4]
    assert [s[3] for b in got[3:] for s in b] == [100, 101, 102, 103, 104]
    assert cyc.epoch == 1


def test_sample_cycler_rejects_bad_inputs():
    with pytest.raises(InputError):
        harness.SampleCycler([], 2, 10)
    with pytest.raises(InputError):
        harness.SampleCycler([((), 0, None, 0)], 0, 10)


def test_popularity_topk_count_then_id():
    samples = [((), t, None, 0) for t in (5, 3, 5, 9, 3, 7)]
    # counts: 5 -> 2, 3 -> 2, 9 -> 1, 7 -> 1; ties break toward smaller id
    assert harness.popularity_topk(samples, 3) == [3, 5, 7]
    assert harness.popularity_topk(samples, 10) == [3, 5, 7, 9]


def test_baseline_metrics_hand_count():
    events = [ev(u, it, t) for t, (u, it) in enumerate(
        [(0, 1), (0, 2), (0, 3), (1, 4), (1, 5), (1, 3), (2, 6), (2, 7), (2, 8)])]
    split = leave_one_out_split(events)
    cfg = micro_config(eval_users=10)
    # test items: 3, 3, 8; serve [3, 4] to everyone
    m = harness.baseline_metrics(split, cfg, [3, 4])
    assert m["recall@10"] == pytest.approx(2 / 3)
    assert m["recall@5"] == pytest.approx(2 / 3)
    assert m["ndcg@5"] == pytest.approx(2 / 3)  # both hits at rank 1


# -- synthetic world command ------------------------------------------------------


def test_synth_run_byte_identical(tmp_path):
    wc = WorldConfig(n_users=10, n_items=12, n_clusters=3, content_dim=6)
    harness.synth_run(tmp_path / "a", wc, 50, seed=4)
    harness.synth_run(tmp_path / "b", wc, 50, seed=4)
    harness.synth_run(tmp_path / "c", wc, 50, seed=5)
    for name in (harness.EVENTS_FILE, harness.CATALOG_FILE,
                 harness.WORLD_FILE):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / harness.EVENTS_FILE).read_bytes() != \
        (tmp_path / "c" / harness.EVENTS_FILE).read_bytes()


# -- training runs -----------------------------------------------------------------


def test_train_run_writes_complete_run_dir(micro_run):
    run, manifest = micro_run
    for name in manifest.files.values():
        assert (run / name).exists(), name
    assert (run / harness.MANIFEST_FILE).exists()
    assert manifest.version.startswith("sidrec-")
    assert manifest.phase_steps == {"warmup": 40, "dynamic": 30}
    assert manifest.transition_step == 40
    assert len(manifest.baseline["items"]) == 10
    assert 0.0 <= manifest.baseline["recall@10"] <= 1.0
    assert 0.0 <= manifest.final["recall@10"] <= 1.0


def test_train_run_metrics_log_is_tagged_jsonl(micro_run):
    run, manifest = micro_run
    lines = [json.loads(l) for l in
             (run / harness.METRICS_FILE).read_text().splitlines()]
    steps = [l for l in lines if l["kind"] == "step"]
    assert len(steps) == 70
    assert [l["step"] for l in steps] == list(range(1, 71))
    assert {l["phase"] for l in steps} == {"WARMUP", "DYNAMIC"}
    vals = [l for l in lines if l["kind"] == "val"]
    assert vals and all("val_loss" in l for l in vals)


def test_train_run_report_rows_cover_both_phases(micro_run):
    run, manifest = micro_run
    rows = read_report(run / harness.REPORT_FILE)
    assert rows[0]["step"] <= manifest.transition_step
    warm = [r for r in rows if r["phase"] == "WARMUP"]
    dyn = [r for r in rows if r["phase"] == "DYNAMIC"]
    assert warm[-1]["step"] == manifest.transition_step
    assert dyn[-1]["step"] == 70
    for r in rows:
        assert 0.0 <= r["recall@10"] <= 1.0
        assert r["entropy_level_1"] >= 0.0


def test_eval_run_matches_final_report_row(micro_run):
    run, manifest = micro_run
    row = harness.eval_run(run)
    last = read_report(run / harness.REPORT_FILE)[-1]
    assert row == last  # recomputed from artifacts alone, bit for bit
    assert row["recall@10"] == manifest.final["recall@10"]


def test_train_run_bit_reproducible(tmp_path, micro_data, micro_run):
    run, _ = micro_run
    again = tmp_path / "again"
    harness.train_run(micro_data / "events.tsv", micro_data / "catalog.tsv",
                      again, micro_config())
    for name in (harness.PARAMS_FILE, harness.INDEX_FILE,
                 harness.METRICS_FILE, harness.REPORT_FILE,
                 harness.MANIFEST_FILE, harness.CODEBOOK_FILE,
                 harness.SIDS_FILE, harness.CONFIG_FILE):
        assert (again / name).read_bytes() == (run / name).read_bytes(), name


def test_train_run_warmup_only_stops_at_phase_one(tmp_path, micro_data):
    man = harness.train_run(micro_data / "events.tsv",
                            micro_data / "catalog.tsv", tmp_path / "wu",
                            micro_config(warmup_steps=10))
    assert man.phase_steps["dynamic"] == 30
    man2 = harness.train_run(micro_data / "events.tsv",
                             micro_data / "catalog.tsv", tmp_path / "wu2",
                             micro_config(warmup_steps=10),
                             warmup_only=True)
    assert man2.phase_steps == {"warmup": 10, "dynamic": 0}
    assert man2.final["phase"] == "WARMUP"


def test_train_run_rejects_event_for_unknown_item(tmp_path, micro_data):
    events = (micro_data / "events.tsv").read_text()
    bad = tmp_path / "events.tsv"
    bad.write_text(events + "0\t999\t2000\t1,0,0\n")
    with pytest.raises(DataError, match="999"):
        harness.train_run(bad, micro_data / "catalog.tsv",
                          tmp_path / "run", micro_config())


def test_train_run_missing_inputs_name_the_path(tmp_path):
    with pytest.raises(DataError, match="events"):
        harness.train_run(tmp_path / "events.tsv", tmp_path / "catalog.tsv",
                          tmp_path / "run", micro_config())


# -- manifest ------------------------------------------------------------------------


def test_manifest_roundtrip(micro_run):
    _, manifest = micro_run
    again = harness.ExperimentManifest.from_json(manifest.to_json())
    assert again == manifest
    assert again.training_config() == micro_config()


def test_manifest_rejects_missing_and_unknown_fields():
    with pytest.raises(DataError, match="missing"):
        harness.ExperimentManifest.from_json("{}")
    with pytest.raises(DataError, match="bad manifest"):
        harness.ExperimentManifest.from_json("not-json {")
    good = json.loads(harness.ExperimentManifest(
        version="v", seed=1, config={}, data={}, files={},
        phase_steps={}, transition_step=0, baseline={}, final={}).to_json())
    good["surprise"] = 1
    with pytest.raises(DataError, match="surprise"):
        harness.ExperimentManifest.from_json(json.dumps(good))


def test_manifest_training_config_rejects_unknown_key(micro_run):
    _, manifest = micro_run
    broken = dict(manifest.config, mystery=3)
    bad = harness.ExperimentManifest(**{
        **{f: getattr(manifest, f) for f in
           ("version", "seed", "data", "files", "phase_steps",
            "transition_step", "baseline", "final")},
        "config": broken})
    with pytest.raises(DataError, match="mystery"):
        bad.training_config()


def test_rebuild_trainer_rejects_hash_mismatch(tmp_path, micro_data):
    run = tmp_path / "run"
    harness.train_run(micro_data / "events.tsv", micro_data / "catalog.tsv",
                      run, micro_config())
    params = run / harness.PARAMS_FILE
    lines = params.read_text().splitlines()
    head = json.loads(lines[0])
    head["config_hash"] = "0" * 16
    params.write_text("\n".join([json.dumps(head, sort_keys=True)]
                                + lines[1:]) + "\n")
    with pytest.raises(DataError, match="hash"):
        harness.rebuild_trainer(run)


# -- reporting ----------------------------------------------------------------------


def test_summarize_run_hand_aggregation(tmp_path):
    lines = [
        {"kind": "step", "step": 1, "phase": "WARMUP", "n_samples": 2,
         "loss_user": 4.0, "loss_item": 2.0, "loss_xtr": 1.0,
         "loss_ref": 2.0, "loss_kl": 0.0, "loss_total": 7.0,
         "filter_pass_rate": 1.0, "index_added": 0, "index_removed": 0,
         "index_stolen": 0},
        {"kind": "val", "step": 1, "val_loss": 3.0, "phase": "WARMUP"},
        {"kind": "step", "step": 2, "phase": "WARMUP", "n_samples": 2,
         "loss_user": 2.0, "loss_item": 1.0, "loss_xtr": 0.5,
         "loss_ref": 1.0, "loss_kl": 0.0, "loss_total": 3.5,
         "filter_pass_rate": 1.0, "index_added": 0, "index_removed": 0,
         "index_stolen": 0},
        {"kind": "step", "step": 3, "phase": "DYNAMIC", "n_samples": 2,
         "loss_user": 1.0, "loss_item": 0.5, "loss_xtr": 0.25,
         "loss_ref": 0.5, "loss_kl": 0.125, "loss_total": 2.0,
         "filter_pass_rate": 0.5, "index_added": 3, "index_removed": 1,
         "index_stolen": 2},
    ]
    with open(tmp_path / harness.METRICS_FILE, "w") as fh:
        for l in lines:
            fh.write(json.dumps(l) + "\n")
    s = harness.summarize_run(tmp_path)
    assert s["n_steps"] == 3
    warm = s["phases"]["WARMUP"]
    assert warm["steps"] == 2
    assert warm["loss_user"] == 3.0
    assert warm["loss_total"] == 5.25
    dyn = s["phases"]["DYNAMIC"]
    assert dyn["steps"] == 1
    assert dyn["loss_kl"] == 0.125
    assert dyn["index_added"] == 3 and dyn["index_stolen"] == 2
    assert any("incomplete" in w for w in s["warnings"])  # no manifest


def test_report_run_idempotent(micro_run):
    run, _ = micro_run
    first = harness.report_run(run)
    blobs = {n: (run / n).read_bytes() for n in
             (harness.SUMMARY_FILE, harness.ENTROPY_SERIES_FILE,
              harness.DENSITY_SERIES_FILE)}
    second = harness.report_run(run)
    assert first == second
    assert first["warnings"] == []
    for n, blob in blobs.items():
        assert (run / n).read_bytes() == blob


def test_report_run_empty_metrics_warns(tmp_path):
    (tmp_path / harness.METRICS_FILE).write_text("")
    s = harness.report_run(tmp_path)
    assert s["phases"] == {}
    assert len(s["warnings"]) >= 2  # no steps, no manifest, no report
    assert s["n_eval_rows"] == 0


def test_report_run_missing_dir_is_data_error(tmp_path):
    with pytest.raises(DataError):
        harness.report_run(tmp_path / "nowhere")


def test_series_files_match_report(micro_run):
    run, manifest = micro_run
    harness.report_run(run)
    rows = read_report(run / harness.REPORT_FILE)
    levels = manifest.config["levels"]
    ent = (run / harness.ENTROPY_SERIES_FILE).read_text().splitlines()
    assert ent[0] == "step,phase," + ",".join(
        f"level_{i + 1}" for i in range(levels))
    assert len(ent) == len(rows) + 1
    for line, row in zip(ent[1:], rows):
        parts = line.split(",")
        assert int(parts[0]) == row["step"] and parts[1] == row["phase"]
        for i in range(levels):
            assert float(parts[2 + i]) == row[f"entropy_level_{i + 1}"]


def test_churn_stats_sum_metrics(micro_run):
    run, _ = micro_run
    stats = harness.churn_stats(run)
    lines = [json.loads(l) for l in
             (run / harness.METRICS_FILE).read_text().splitlines()
             if json.loads(l)["kind"] == "step"]
    for phase, agg in stats.items():
        mine = [l for l in lines if l["phase"] == phase]
        assert agg["steps"] == len(mine)
        assert agg["index_added"] == sum(l["index_added"] for l in mine)


# -- index inspection -----------------------------------------------------------------


def test_load_run_index_and_dump(micro_run):
    run, _ = micro_run
    index = harness.load_run_index(run)
    index.check_invariants()
    lines = harness.index_dump_lines(index)
    assert lines[0] == "item\tsid\tweight\ttimestamp"
    assert len(lines) == 1 + index.n_links()
    item, sid, w, ts = lines[1].split("\t")
    assert index.top_sid(int(item)) is not None
    float(w), int(ts)


# -- finite-difference audit ------------------------------------------------------------


def test_gradcheck_suite_names_and_tolerance():
    results = dict(harness.gradcheck_suite(seeds=2))
    expected = {"add", "add_n", "scale", "add_const", "exp", "expm1",
                "clip_min", "relu", "concat_vec", "concat_rows", "reshape",
                "take_rows", "take_row", "pick", "embed_lookup", "matmul",
                "linear", "layer_norm", "causal_self_attention",
                "attention_pool", "softmax_cross_entropy", "sigmoid_bce",
                "recommender_loss", "tokenizer_loss", "behavior_loss",
                "behavior_loss_no_history", "kl_regularizer",
                "reference_loss"}
    assert set(results) == expected
    for name, err in results.items():
        assert err < harness.GRADCHECK_TOL, name


def test_gradcheck_suite_rejects_zero_seeds():
    with pytest.raises(InputError):
        harness.gradcheck_suite(seeds=0)
