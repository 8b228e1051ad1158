"""Experiment orchestration behind the CLI.

Owns run directories: a completed run holds the resolved config, the
fitted codebook and warm-up SID map, final parameters, the final index,
a per-step metrics log, an evaluation report, and a manifest written
last as the completion marker.  Everything a run writes is derived from
the config and its seed, so rerunning with the same inputs reproduces
every artifact byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import neural as nn
from . import rqkmeans
from .coevolution import DYNAMIC, WARMUP, Trainer, phase_scheduler
from .config import TrainingConfig, config_hash, save_config
from .csa import DEFAULT_BEHAVIORS, BehaviorHead, ItemStore
from .datagen import (WorldConfig, generate_stream, generate_world,
                      leave_one_out_split, load_catalog, load_events,
                      save_catalog, save_events)
from .errors import DataError, InputError
from .evalkit import (evaluate_ranking, make_report_row, read_report,
                      report_columns, usage_report, write_report)
from .index import BeamIndex, IndexConfig
from .recommender import Recommender, truncate_history
from .tokenizer import ItemTokenizer, kl_regularizer, reference_loss

EVENTS_FILE = "events.tsv"
CATALOG_FILE = "catalog.tsv"
WORLD_FILE = "world.json"
CONFIG_FILE = "config.cfg"
CODEBOOK_FILE = "codebook.tsv"
SIDS_FILE = "warmup_sids.tsv"
PARAMS_FILE = "params.ckpt"
INDEX_FILE = "index.tsv"
METRICS_FILE = "metrics.jsonl"
REPORT_FILE = "report.csv"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"
ENTROPY_SERIES_FILE = "entropy_series.csv"
DENSITY_SERIES_FILE = "density_series.csv"


# -- manifest -------------------------------------------------------------------

@dataclass
class ExperimentManifest:
    """Everything needed to reproduce or continue a run.

    Artifact paths under `files` are relative to the run directory;
    `data` keeps the event/catalog paths as given on the command line.
    No wall-clock anywhere, so two identical runs write identical bytes.
    """
    version: str
    seed: int
    config: dict
    data: dict
    files: dict
    phase_steps: dict
    transition_step: int
    baseline: dict
    final: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True,
                          indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, path="<manifest>") -> "ExperimentManifest":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"bad manifest: {exc}", path=path)
        if not isinstance(raw, dict):
            raise DataError("manifest must be a JSON object", path=path)
        names = {f.name for f in dataclasses.fields(cls)}
        missing = sorted(names - set(raw))
        extra = sorted(set(raw) - names)
        if missing or extra:
            raise DataError(
                f"manifest fields: missing {missing}, unknown {extra}",
                path=path)
        return cls(**raw)

    def training_config(self) -> TrainingConfig:
        known = {f.name for f in dataclasses.fields(TrainingConfig)}
        bad = sorted(set(self.config) - known)
        if bad:
            raise DataError(f"manifest config has unknown keys {bad}")
        missing = sorted(known - set(self.config))
        if missing:
            raise DataError(f"manifest config is missing keys {missing}")
        return TrainingConfig(**self.config).validate()


def version_string(cfg: TrainingConfig) -> str:
    return f"sidrec-{__version__}+cfg.{config_hash(cfg)[:8]}"


def save_manifest(run_dir, manifest: ExperimentManifest):
    with open(os.path.join(run_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())


def load_manifest(run_dir) -> ExperimentManifest:
    path = os.path.join(run_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        raise DataError("manifest not found (incomplete run?)", path=path)
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentManifest.from_json(fh.read(), path=path)


def _require_file(path, what: str):
    if not os.path.exists(path):
        raise DataError(f"{what} not found", path=str(path))
    return path


# -- sample construction ---------------------------------------------------------

def build_samples(events, behaviors=DEFAULT_BEHAVIORS, n_max: int = 50):
    """(history, target, labels, timestamp) tuples in stream order.

    The last two events of every user with at least three are held out,
    mirroring leave_one_out_split, so training never sees validation or
    test targets.  Histories keep the most recent n_max items.
    """
    total = Counter(ev.user_id for ev in events)
    trainable = {u: n - 2 if n >= 3 else n for u, n in total.items()}
    seen: dict = {}
    taken = Counter()
    samples = []
    for ev in events:
        hist = seen.setdefault(ev.user_id, [])
        if taken[ev.user_id] < trainable[ev.user_id]:
            samples.append((tuple(hist[-n_max:]), ev.item_id,
                            ev.label_dict(behaviors), ev.timestamp))
        taken[ev.user_id] += 1
        hist.append(ev.item_id)
    return samples


def validation_samples(split, limit=None):
    users = [u for u in sorted(split) if split[u].val_item is not None]
    if limit is not None:
        users = users[:limit]
    return [(split[u].history, split[u].val_item, None, 0) for u in users]


class SampleCycler:
    """Chronological batches, cycling the stream with shifted timestamps
    each epoch so the index clock keeps moving forward."""

    def __init__(self, samples, batch_size: int, ts_period: int):
        if not samples:
            raise InputError("no training samples")
        if batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {batch_size}")
        if ts_period < 1:
            raise InputError(f"ts_period must be >= 1, got {ts_period}")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.ts_period = ts_period
        self.pos = 0
        self.epoch = 0

    def next_batch(self):
        if self.pos >= len(self.samples):
            self.pos = 0
            self.epoch += 1
        chunk = self.samples[self.pos:self.pos + self.batch_size]
        self.pos += len(chunk)
        off = self.epoch * self.ts_period
        return [(h, t, lab, ts + off) for h, t, lab, ts in chunk]


# -- evaluation -------------------------------------------------------------------

def popularity_topk(samples, k: int = 10):
    """Most frequent training targets; count desc, item id asc on ties."""
    counts = Counter(target for _h, target, _lab, _ts in samples)
    ranked = sorted(counts, key=lambda i: (-counts[i], i))
    return ranked[:k]


def _test_users(split, limit):
    users = [u for u in sorted(split) if split[u].test_item is not None]
    if not users:
        raise InputError("no users with a test target")
    return users[:limit]


def evaluate_trainer(trainer: Trainer, split, config: TrainingConfig):
    """Leave-one-out ranking metrics on the test targets.

    Test-time history is the training history plus the validation item,
    so evaluation consumes one more step of context than training saw.
    """
    pairs = []
    for u in _test_users(split, config.eval_users):
        rec = split[u]
        history = truncate_history(list(rec.history) + [rec.val_item],
                                   config.n_max)
        ranked = trainer.recommender.decode_topk(
            trainer.indexed_history(history), config.decode_beam_width,
            10, trainer.index)
        pairs.append((ranked, rec.test_item))
    return evaluate_ranking(pairs)


def baseline_metrics(split, config: TrainingConfig, items):
    """The fixed ranked list `items` served to every test user."""
    pairs = [(items, split[u].test_item)
             for u in _test_users(split, config.eval_users)]
    return evaluate_ranking(pairs)


# -- training orchestration -------------------------------------------------------

def _check_events_cover_catalog(events, item_ids, events_path):
    known = set(item_ids)
    for ev in events:
        if ev.item_id not in known:
            raise DataError(
                f"event references item {ev.item_id} missing from the catalog",
                path=str(events_path))


def train_run(events_path, catalog_path, out_dir, config: TrainingConfig,
              warmup_only: bool = False) -> ExperimentManifest:
    """Run one experiment into out_dir and return its manifest.

    warmup_only stops after phase 1; the artifacts still leave the
    trainer ready to continue into phase 2.
    """
    config = config.validate()
    events = load_events(_require_file(events_path, "event file"),
                         n_behaviors=len(DEFAULT_BEHAVIORS))
    item_ids, content = load_catalog(_require_file(catalog_path, "catalog"))
    _check_events_cover_catalog(events, item_ids, events_path)
    split = leave_one_out_split(events, config.n_max)
    samples = build_samples(events, DEFAULT_BEHAVIORS, config.n_max)
    val = validation_samples(split, config.eval_users)
    if not val:
        raise DataError("no user has enough events for a validation target",
                        path=str(events_path))
    max_ts = max(ev.timestamp for ev in events)
    cycler = SampleCycler(samples, config.batch_size, max_ts + 1)

    trainer = Trainer(item_ids, content, config)
    os.makedirs(out_dir, exist_ok=True)
    h = config_hash(config)
    rows = []
    baseline_items = popularity_topk(samples, 10)

    def do_eval(step: int, phase: str):
        if rows and rows[-1]["step"] == step and rows[-1]["phase"] == phase:
            return rows[-1]
        metrics = evaluate_trainer(trainer, split, config)
        rows.append(make_report_row(step, phase, metrics,
                                    usage_report(trainer.index)))
        return rows[-1]

    with open(os.path.join(out_dir, METRICS_FILE), "w", encoding="utf-8") as log:
        def emit(obj):
            log.write(json.dumps(obj, sort_keys=True) + "\n")

        step = 0
        while trainer.state.phase == WARMUP and \
                trainer.state.steps_in_phase < config.warmup_steps:
            report = trainer.warmup_step(cycler.next_batch())
            step += 1
            emit({"kind": "step", "step": step, **report.as_dict()})
            if step % config.eval_interval == 0 and \
                    trainer.state.steps_in_phase < config.warmup_steps:
                v = trainer.validation_user_loss(val)
                phase_scheduler(trainer.state, v, config)
                emit({"kind": "val", "step": step, "val_loss": v,
                      "phase": trainer.state.phase})
                if trainer.state.phase == WARMUP:
                    do_eval(step, WARMUP)
        trainer.begin_dynamic_phase()
        warmup_steps_taken = step
        phase1 = do_eval(step, WARMUP)

        dynamic_steps_taken = 0
        if not warmup_only:
            for s in range(1, config.dynamic_steps + 1):
                report = trainer.dynamic_step(cycler.next_batch())
                step += 1
                trainer.index.check_invariants()
                emit({"kind": "step", "step": step, **report.as_dict()})
                if s % config.eval_interval == 0 and s < config.dynamic_steps:
                    do_eval(step, DYNAMIC)
            dynamic_steps_taken = config.dynamic_steps
            final = do_eval(step, DYNAMIC)
        else:
            final = phase1

    save_config(config, os.path.join(out_dir, CONFIG_FILE))
    rqkmeans.save_codebook(os.path.join(out_dir, CODEBOOK_FILE),
                           trainer.codebook, config_hash=h)
    rqkmeans.write_sid_dump(os.path.join(out_dir, SIDS_FILE),
                            trainer.warmup_sids)
    nn.save_arrays(os.path.join(out_dir, PARAMS_FILE),
                   trainer.parameter_arrays(), config_hash=h,
                   meta={"phase": trainer.state.phase,
                         "steps": warmup_steps_taken + dynamic_steps_taken})
    trainer.index.export_file(os.path.join(out_dir, INDEX_FILE))
    write_report(rows, config.levels, os.path.join(out_dir, REPORT_FILE))

    base_metrics = baseline_metrics(split, config, baseline_items)
    manifest = ExperimentManifest(
        version=version_string(config),
        seed=config.seed,
        config=dataclasses.asdict(config),
        data={"events": str(events_path), "catalog": str(catalog_path)},
        files={"config": CONFIG_FILE, "codebook": CODEBOOK_FILE,
               "warmup_sids": SIDS_FILE, "params": PARAMS_FILE,
               "index": INDEX_FILE, "metrics": METRICS_FILE,
               "report": REPORT_FILE},
        phase_steps={"warmup": warmup_steps_taken,
                     "dynamic": dynamic_steps_taken},
        transition_step=warmup_steps_taken,
        baseline={"items": baseline_items,
                  "recall@10": base_metrics["recall@10"],
                  "ndcg@10": base_metrics["ndcg@10"]},
        final={"step": step, "phase": final["phase"],
               "recall@5": final["recall@5"], "recall@10": final["recall@10"],
               "ndcg@5": final["ndcg@5"], "ndcg@10": final["ndcg@10"]},
    )
    save_manifest(out_dir, manifest)
    return manifest


def rebuild_trainer(run_dir, manifest: ExperimentManifest | None = None):
    """Reconstruct a trainer from a completed run's artifacts.

    The codebook and warm-up SIDs are refit from the catalog and seed
    (deterministic), then checkpointed parameters and the exported index
    replace the fresh state.
    """
    manifest = manifest or load_manifest(run_dir)
    config = manifest.training_config()
    item_ids, content = load_catalog(
        _require_file(manifest.data["catalog"], "catalog"))
    trainer = Trainer(item_ids, content, config)
    params_path = _require_file(
        os.path.join(run_dir, manifest.files["params"]), "checkpoint")
    arrays, ck_hash, _meta = nn.load_arrays(params_path)
    h = config_hash(config)
    if ck_hash and ck_hash != h:
        raise DataError(f"checkpoint config hash {ck_hash} does not match "
                        f"manifest config hash {h}", path=params_path)
    trainer.load_parameter_arrays(arrays)
    index_path = _require_file(
        os.path.join(run_dir, manifest.files["index"]), "index snapshot")
    trainer.index = BeamIndex.import_file(index_path, trainer.index.config)
    return trainer, manifest


def eval_run(run_dir):
    """Recompute final metrics from artifacts alone; returns the report row."""
    trainer, manifest = rebuild_trainer(run_dir)
    config = manifest.training_config()
    events = load_events(_require_file(manifest.data["events"], "event file"),
                         n_behaviors=len(DEFAULT_BEHAVIORS))
    split = leave_one_out_split(events, config.n_max)
    metrics = evaluate_trainer(trainer, split, config)
    step = manifest.phase_steps["warmup"] + manifest.phase_steps["dynamic"]
    phase = DYNAMIC if manifest.phase_steps["dynamic"] else WARMUP
    return make_report_row(step, phase, metrics, usage_report(trainer.index))


# -- reporting --------------------------------------------------------------------

_AGG_KEYS = ("loss_user", "loss_item", "loss_xtr", "loss_ref", "loss_kl",
             "loss_total", "filter_pass_rate")
_SUM_KEYS = ("index_added", "index_removed", "index_stolen")


def _read_metrics_lines(path):
    lines = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"bad metrics line: {exc}", path=str(path),
                                line=n)
            if not isinstance(obj, dict) or "kind" not in obj:
                raise DataError("metrics line is not a tagged object",
                                path=str(path), line=n)
            lines.append(obj)
    return lines


def summarize_run(run_dir) -> dict:
    """Aggregate the metrics log per phase; incomplete runs get warnings
    instead of errors so partial state stays inspectable."""
    warnings = []
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    steps = []
    if os.path.exists(metrics_path):
        steps = [l for l in _read_metrics_lines(metrics_path)
                 if l["kind"] == "step"]
        if not steps:
            warnings.append("metrics log holds no training steps")
    else:
        warnings.append(f"metrics log missing: {metrics_path}")

    phases: dict = {}
    for line in steps:
        agg = phases.setdefault(line["phase"], {
            "steps": 0, **{k: 0.0 for k in _AGG_KEYS},
            **{k: 0 for k in _SUM_KEYS}})
        agg["steps"] += 1
        for k in _AGG_KEYS:
            agg[k] += float(line[k])
        for k in _SUM_KEYS:
            agg[k] += int(line[k])
    for agg in phases.values():
        for k in _AGG_KEYS:
            agg[k] /= agg["steps"]

    transition = None
    try:
        transition = load_manifest(run_dir).transition_step
    except DataError as exc:
        warnings.append(f"run incomplete: {exc}")
    summary = {"phases": phases, "transition_step": transition,
               "warnings": warnings, "n_steps": len(steps)}
    return summary


def write_series(run_dir) -> int:
    """Per-level entropy and density series from the evaluation report;
    returns the number of rows written."""
    report_path = os.path.join(run_dir, REPORT_FILE)
    rows = read_report(_require_file(report_path, "evaluation report"))
    levels = 0
    while rows and f"entropy_level_{levels + 1}" in rows[0]:
        levels += 1
    for name, stem in ((ENTROPY_SERIES_FILE, "entropy_level_"),
                       (DENSITY_SERIES_FILE, "density_level_")):
        with open(os.path.join(run_dir, name), "w", encoding="utf-8") as fh:
            cols = ["step", "phase"] + [f"level_{i + 1}" for i in range(levels)]
            fh.write(",".join(cols) + "\n")
            for row in rows:
                vals = [str(row["step"]), row["phase"]]
                vals += [repr(row[f"{stem}{i + 1}"]) for i in range(levels)]
                fh.write(",".join(vals) + "\n")
    return len(rows)


def report_run(run_dir) -> dict:
    """Summary + series files; idempotent, tolerant of partial runs."""
    if not os.path.isdir(run_dir):
        raise DataError("run directory not found", path=str(run_dir))
    summary = summarize_run(run_dir)
    if os.path.exists(os.path.join(run_dir, REPORT_FILE)):
        summary["n_eval_rows"] = write_series(run_dir)
    else:
        summary["warnings"].append("evaluation report missing, no series files")
        summary["n_eval_rows"] = 0
    with open(os.path.join(run_dir, SUMMARY_FILE), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


# -- synthetic data ---------------------------------------------------------------

def synth_run(out_dir, world_config: WorldConfig, n_events: int, seed: int):
    """World + event stream + catalog into out_dir; byte-deterministic."""
    world = generate_world(world_config, seed)
    events = generate_stream(world, n_events)
    os.makedirs(out_dir, exist_ok=True)
    save_events(events, os.path.join(out_dir, EVENTS_FILE))
    save_catalog(list(range(world_config.n_items)), world.content_features,
                 os.path.join(out_dir, CATALOG_FILE))
    record = {"seed": seed, "n_events": n_events,
              **dataclasses.asdict(world_config)}
    record["behaviors"] = list(record["behaviors"])
    record["behavior_rates"] = list(record["behavior_rates"])
    with open(os.path.join(out_dir, WORLD_FILE), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, indent=2) + "\n")
    return len(events)


# -- index inspection ---------------------------------------------------------------

def load_run_index(run_dir) -> BeamIndex:
    manifest = load_manifest(run_dir)
    config = manifest.training_config()
    path = _require_file(os.path.join(run_dir, manifest.files["index"]),
                         "index snapshot")
    return BeamIndex.import_file(
        path, IndexConfig(gamma=config.gamma, delta_t=config.delta_t,
                          capacity=config.capacity, offset=config.offset))


def index_dump_lines(index: BeamIndex):
    """item, sid, weight, timestamp rows plus per-item alias counts."""
    lines = ["item\tsid\tweight\ttimestamp"]
    for item in sorted(index.items()):
        for sid, w, ts in index.forward_lookup(item):
            toks = ",".join(str(t) for t in sid)
            lines.append(f"{item}\t{toks}\t{w!r}\t{ts}")
    return lines


def churn_stats(run_dir) -> dict:
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    out: dict = {}
    if not os.path.exists(metrics_path):
        return out
    for line in _read_metrics_lines(metrics_path):
        if line["kind"] != "step":
            continue
        agg = out.setdefault(line["phase"],
                             {"steps": 0, **{k: 0 for k in _SUM_KEYS}})
        agg["steps"] += 1
        for k in _SUM_KEYS:
            agg[k] += int(line[k])
    return out


# -- finite-difference audit --------------------------------------------------------

GRADCHECK_TOL = 1e-3


def _scalarize(t):
    if t.data.ndim == 0:
        return t
    flat = nn.reshape(t, (int(t.data.size),))
    return nn.softmax_cross_entropy(flat, 0)


def _primitive_checks(rng):
    """(name, loss_fn, params) triples, one per differentiable primitive.

    Values near relu/clip kinks are kept at least 0.3 away from the
    threshold so central differences stay on one branch.
    """
    def p(name, arr):
        return nn.Parameter(name, np.asarray(arr, dtype=np.float64))

    def away_from(floor, shape):
        sign = rng.integers(0, 2, size=shape) * 2 - 1
        return floor + sign * rng.uniform(0.3, 1.2, size=shape)

    checks = []
    a = p("a", rng.standard_normal(5))
    b = p("b", rng.standard_normal(5))
    checks.append(("add", lambda: _scalarize(nn.add(a, b)), [a, b]))
    terms = [p(f"t{i}", rng.standard_normal(4)) for i in range(3)]
    checks.append(("add_n",
                   lambda: _scalarize(nn.add_n(list(terms))), list(terms)))
    c = p("c", rng.standard_normal(4))
    checks.append(("scale", lambda: _scalarize(nn.scale(c, 0.7)), [c]))
    checks.append(("add_const", lambda: _scalarize(nn.add_const(c, 1.3)), [c]))
    d = p("d", rng.uniform(-1.0, 1.0, size=4))
    checks.append(("exp", lambda: _scalarize(nn.exp(d)), [d]))
    checks.append(("expm1", lambda: _scalarize(nn.expm1(d)), [d]))
    e = p("e", away_from(0.5, 6))
    checks.append(("clip_min", lambda: _scalarize(nn.clip_min(e, 0.5)), [e]))
    f = p("f", away_from(0.0, 6))
    checks.append(("relu", lambda: _scalarize(nn.relu(f)), [f]))
    g1, g2 = p("g1", rng.standard_normal(3)), p("g2", rng.standard_normal(2))
    checks.append(("concat_vec",
                   lambda: _scalarize(nn.concat_vec([g1, g2])), [g1, g2]))
    m1 = p("m1", rng.standard_normal((2, 3)))
    m2 = p("m2", rng.standard_normal((2, 3)))
    checks.append(("concat_rows",
                   lambda: _scalarize(nn.concat_rows([m1, m2])), [m1, m2]))
    checks.append(("reshape", lambda: _scalarize(nn.reshape(m1, (6,))), [m1]))
    m3 = p("m3", rng.standard_normal((4, 3)))
    checks.append(("take_rows",  # duplicate row: gradients must accumulate
                   lambda: _scalarize(nn.take_rows(m3, [0, 2, 0])), [m3]))
    checks.append(("take_row", lambda: _scalarize(nn.take_row(m3, 1)), [m3]))
    v = p("v", rng.standard_normal(5))
    checks.append(("pick", lambda: nn.pick(v, 2), [v]))
    tab = p("tab", rng.standard_normal((6, 3)))
    checks.append(("embed_lookup",
                   lambda: _scalarize(nn.embed_lookup(tab, [1, 4, 1])), [tab]))
    ma = p("ma", rng.standard_normal((3, 4)))
    mb = p("mb", rng.standard_normal((4, 2)))
    checks.append(("matmul",
                   lambda: _scalarize(nn.matmul(ma, mb)), [ma, mb]))
    x = p("x", rng.standard_normal((3, 4)))
    w = p("w", rng.standard_normal((4, 5)) * 0.5)
    bias = p("bias", rng.standard_normal(5) * 0.1)
    checks.append(("linear",
                   lambda: _scalarize(nn.linear(x, w, bias)), [x, w, bias]))
    gain = p("gain", 1.0 + 0.1 * rng.standard_normal(4))
    lb = p("lb", 0.1 * rng.standard_normal(4))
    checks.append(("layer_norm",
                   lambda: _scalarize(nn.layer_norm(x, gain, lb)),
                   [x, gain, lb]))
    q = p("q", rng.standard_normal((3, 4)))
    k = p("k", rng.standard_normal((3, 4)))
    vv = p("vv", rng.standard_normal((3, 4)))
    checks.append(("causal_self_attention",
                   lambda: _scalarize(
                       nn.causal_self_attention(q, k, vv, n_heads=2)),
                   [q, k, vv]))
    pq = p("pq", rng.standard_normal(4))
    pk = p("pk", rng.standard_normal((3, 4)))
    pv = p("pv", rng.standard_normal((3, 4)))
    checks.append(("attention_pool",
                   lambda: _scalarize(nn.attention_pool(pq, pk, pv)),
                   [pq, pk, pv]))
    lo = p("lo", rng.standard_normal(6))
    checks.append(("softmax_cross_entropy",
                   lambda: nn.softmax_cross_entropy(lo, 3), [lo]))
    s = p("s", np.asarray(rng.uniform(-1.5, 1.5)))
    checks.append(("sigmoid_bce", lambda: nn.sigmoid_bce(s, 1), [s]))
    return checks


def _composed_checks(seed: int):
    """The four training losses as whole graphs, tiny dimensions.

    Parameters behind a deliberate stop-gradient (the reference branch
    of the KL term, history rows in the behavior head) are excluded:
    central differences would see the value change that the gradient is
    designed to ignore.
    """
    rng = np.random.default_rng(seed)
    spec = rqkmeans.CodebookSpec(levels=2, codes_per_level=5, dim=4)
    x_dim = 6

    rec = Recommender(spec, seed=seed, name="rec", n_blocks=1, dim=8,
                      n_heads=2, ff_dim=16, n_max=10)
    index = BeamIndex(2, 5, IndexConfig())
    for i in range(4):
        index.update(i, [((i % 5, (i * 2 + 1) % 5), [0.0, 0.0])], now=0)
    checks = [("recommender_loss",
               lambda: rec.recommender_loss([0, 1, 2], (1, 3), index),
               rec.parameters())]

    tok = ItemTokenizer(spec, x_dim=x_dim, seed=seed + 1, name="tok",
                        n_blocks=1, dim=8, n_heads=2, ff_dim=16)
    x = rng.standard_normal(x_dim)
    checks.append(("tokenizer_loss", lambda: tok.loss(x, (1, 3)),
                   tok.parameters()))

    store = ItemStore(list(range(5)), rng.standard_normal((5, 4)), 2,
                      np.random.default_rng(seed + 2))
    head = BehaviorHead(store.x_dim, np.random.default_rng(seed + 3),
                        hidden=8)
    labels = {"click": 1, "like": 0, "follow": 1}
    checks.append(("behavior_loss",
                   lambda: head.sample_loss(store, [0, 2], 3, labels),
                   head.parameters()))
    # empty history: the item store's collaborative row feeds the target
    # directly, with no detached rows in sight
    checks.append(("behavior_loss_no_history",
                   lambda: head.sample_loss(store, [], 3, labels),
                   store.parameters() + head.parameters()))

    ref = ItemTokenizer(spec, x_dim=x_dim, seed=seed + 4, name="refq",
                        n_blocks=1, dim=8, n_heads=2, ff_dim=16)
    checks.append(("kl_regularizer",
                   lambda: kl_regularizer(tok, ref, x, (2, 1)),
                   tok.parameters()))
    checks.append(("reference_loss",
                   lambda: reference_loss(ref, x, (0, 2)),
                   ref.parameters()))
    return checks


def gradcheck_suite(seeds: int = 20, eps: float = 1e-4,
                    composed_coords: int = 6):
    """Max relative error per check over all seeds, as (name, err) pairs."""
    if seeds < 1:
        raise InputError(f"seeds must be >= 1, got {seeds}")
    worst: dict = {}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, loss_fn, params in _primitive_checks(rng):
            err = nn.finite_diff_check(loss_fn, params, eps=eps, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
        for name, loss_fn, params in _composed_checks(seed):
            err = nn.finite_diff_check(loss_fn, params, eps=eps,
                                       max_coords_per_param=composed_coords,
                                       seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    return list(worst.items())
