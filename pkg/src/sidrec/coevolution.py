"""Two-phase curriculum trainer.

Phase 1 (warm-up) trains every component against fixed quantizer SIDs;
phase 2 (dynamic) lets the tokenizer propose beam candidates, picks the
one the recommender finds easiest as the training target, and keeps the
beam index in sync with every prediction.

Batch discipline: all scoring inside a step reads the parameter and
index state from the start of the step; optimizer steps and index
mutations are applied together at the end.  Components whose loss term
is inactive this step (zero weight, filtered out, frozen) receive no
optimizer step at all, so their parameters hold bit-still.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import neural as nn
from . import rqkmeans
from .config import TrainingConfig
from .csa import DEFAULT_BEHAVIORS, BehaviorHead, ItemStore
from .errors import InputError
from .index import BeamIndex, IndexConfig, relevance_weight
from .recommender import Recommender, truncate_history
from .tokenizer import ItemTokenizer, kl_regularizer, reference_loss

WARMUP = "WARMUP"
DYNAMIC = "DYNAMIC"


# -- warm-up SID assignment ----------------------------------------------------

def _nested_candidates(codebook, level, prefix, residual):
    """All sids with levels >= `level` free, nearest-first.

    Depth-first over distance-ranked centroids, so the first yield is
    the plain quantization and the following ones differ in the last
    level first, then backtrack outward."""
    if level == codebook.spec.levels:
        yield prefix
        return
    centers = codebook.centroids[level]
    d2 = ((centers - residual[None, :]) ** 2).sum(axis=1)
    for t in np.argsort(d2, kind="stable"):
        t = int(t)
        yield from _nested_candidates(codebook, level + 1, prefix + (t,),
                                      residual - centers[t])


def assign_warmup_sids(item_ids, embeddings, codebook) -> dict:
    """Injective item -> SID map from residual quantization.

    First occurrence of each quantized SID keeps it; a collision moves
    the later item to its next-nearest free SID, varying the final level
    first and earlier levels only when a whole suffix block is
    exhausted.  Remaps never land on any item's raw quantization, so
    exactly the duplicate-scan items get moved, with no cascades.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    item_ids = [int(i) for i in item_ids]
    if embeddings.ndim != 2 or embeddings.shape[0] != len(item_ids):
        raise InputError("need one embedding row per item")
    if len(set(item_ids)) != len(item_ids):
        raise InputError("duplicate item ids")
    spec = codebook.spec
    capacity = spec.codes_per_level ** spec.levels
    if len(item_ids) > capacity:
        raise InputError(
            f"catalog size {len(item_ids)} exceeds SID space {capacity}")
    raw = [rqkmeans.tokenize(codebook, emb) for emb in embeddings]
    reserved = set(raw)
    # non-raw sids left for colliders: capacity - |reserved| of them, and
    # there are len(items) - |reserved| colliders, so the map always fits
    taken = set()
    mapping = {}
    for item, emb, base in zip(item_ids, embeddings, raw):
        if base not in taken:
            taken.add(base)
            mapping[item] = base
            continue
        for sid in _nested_candidates(codebook, 0, (), emb):
            if sid not in taken and sid not in reserved:
                taken.add(sid)
                mapping[item] = sid
                break
    return mapping


# -- gradient filter -----------------------------------------------------------

def gradient_filter(ce_losses, config: TrainingConfig) -> bool:
    """True iff the selected SID's relevance weight clears the bar.

    Accepts the per-level loss list or an already-summed float; the
    inequality is strict, so a sum exactly at the threshold fails.
    """
    if isinstance(ce_losses, (int, float)):
        ce_losses = [float(ce_losses)]
    w = relevance_weight(ce_losses, config.offset)
    return w > config.offset - config.resolved_filter_threshold()


# -- phase scheduling ----------------------------------------------------------

@dataclass
class PhaseState:
    phase: str = WARMUP
    steps_in_phase: int = 0
    best_loss: float = math.inf
    evals_since_improvement: int = 0
    history: list = field(default_factory=list)
    transitioned_at_eval: int | None = None

    def validate(self):
        if self.phase not in (WARMUP, DYNAMIC):
            raise InputError(f"unknown phase {self.phase!r}")
        return self


def phase_scheduler(state: PhaseState, validation_loss: float,
                    config: TrainingConfig) -> PhaseState:
    """Plateau rule: transition out of WARMUP once the validation loss
    fails to improve by more than plateau_rel_tol for plateau_patience
    consecutive evaluations.  Never transitions back."""
    state.validate()
    v = float(validation_loss)
    if not math.isfinite(v):
        raise InputError(f"validation loss must be finite, got {v}")
    state.history.append(v)
    if v < state.best_loss * (1.0 - config.plateau_rel_tol) or \
            not math.isfinite(state.best_loss):
        state.best_loss = v
        state.evals_since_improvement = 0
    else:
        state.evals_since_improvement += 1
    if state.phase == WARMUP and \
            state.evals_since_improvement >= config.plateau_patience:
        _transition(state)
    return state


def _transition(state: PhaseState):
    state.phase = DYNAMIC
    state.steps_in_phase = 0
    state.best_loss = math.inf
    state.evals_since_improvement = 0
    state.transitioned_at_eval = len(state.history)


# -- step reports --------------------------------------------------------------

@dataclass
class StepReport:
    """Loss sums over the batch.  `item` and `kl` cover only the samples
    whose gradient filter passed (the ones that contributed); *_contrib
    fields carry the weighted contributions that add up to `total`."""
    phase: str
    n_samples: int
    user: float = 0.0
    item: float = 0.0
    xtr: float = 0.0
    ref: float = 0.0
    kl: float = 0.0
    item_contrib: float = 0.0
    xtr_contrib: float = 0.0
    reg_contrib: float = 0.0
    total: float = 0.0
    filter_passed: int = 0
    index_added: int = 0
    index_removed: int = 0
    index_stolen: int = 0

    def as_dict(self) -> dict:
        return {
            "phase": self.phase, "n_samples": self.n_samples,
            "loss_user": self.user, "loss_item": self.item,
            "loss_xtr": self.xtr, "loss_ref": self.ref, "loss_kl": self.kl,
            "loss_total": self.total,
            "filter_pass_rate": (self.filter_passed / self.n_samples
                                 if self.phase == DYNAMIC else 1.0),
            "index_added": self.index_added,
            "index_removed": self.index_removed,
            "index_stolen": self.index_stolen,
        }


def _check_batch(batch, n_max: int):
    if not batch:
        raise InputError("batch is empty")
    out = []
    for sample in batch:
        if len(sample) != 4:
            raise InputError(
                "each sample is (history, target_item, labels, timestamp)")
        history, target, labels, ts = sample
        out.append((truncate_history(list(history), n_max),
                    int(target), labels, int(ts)))
    return out


# -- the trainer ---------------------------------------------------------------

class Trainer:
    """Owns the four trainable components plus the codebook and index."""

    def __init__(self, item_ids, content, config: TrainingConfig,
                 behaviors=DEFAULT_BEHAVIORS):
        self.config = config.validate()
        content = np.asarray(content, dtype=np.float64)
        if content.ndim != 2 or content.shape[1] != config.content_dim:
            raise InputError(
                f"content must be [n_items, {config.content_dim}]")
        seeds = [int(s) for s in
                 np.random.SeedSequence(config.seed).generate_state(6)]
        spec = rqkmeans.CodebookSpec(config.levels, config.codes_per_level,
                                     config.content_dim)
        self.codebook = rqkmeans.fit(content, spec, seed=seeds[0])
        self.store = ItemStore(item_ids, content, config.collab_dim,
                               np.random.default_rng(seeds[1]))
        self.warmup_sids = assign_warmup_sids(item_ids, content, self.codebook)

        self.index = BeamIndex(config.levels, config.codes_per_level,
                               IndexConfig(gamma=config.gamma,
                                           delta_t=config.delta_t,
                                           capacity=config.capacity,
                                           offset=config.offset))
        # one-to-one warm-up links land at the maximum weight: zero losses
        zero = [0.0] * config.levels
        for item in self.store.item_ids:
            self.index.update(item, [(self.warmup_sids[item], zero)], now=0)

        self.tokenizer = ItemTokenizer(
            spec, x_dim=self.store.x_dim, seed=seeds[2], name="tok",
            n_blocks=config.tokenizer_blocks, dim=config.tokenizer_dim,
            n_heads=config.tokenizer_heads, ff_dim=config.tokenizer_ff)
        self.reference = ItemTokenizer(
            spec, x_dim=self.store.x_dim, seed=seeds[2], name="ref",
            n_blocks=config.tokenizer_blocks, dim=config.tokenizer_dim,
            n_heads=config.tokenizer_heads, ff_dim=config.tokenizer_ff)
        self.reference.copy_parameters_from(self.tokenizer)
        self.recommender = Recommender(
            spec, seed=seeds[3], name="rec",
            n_blocks=config.recommender_blocks, dim=config.recommender_dim,
            n_heads=config.recommender_heads, ff_dim=config.recommender_ff,
            n_max=config.n_max)
        self.head = BehaviorHead(self.store.x_dim,
                                 np.random.default_rng(seeds[4]),
                                 behaviors=behaviors, hidden=config.csa_hidden)

        wd = config.weight_decay
        self.opt_rec = nn.AdamW(self.recommender.parameters(),
                                lr=config.lr_recommender, weight_decay=wd)
        self.opt_tok = nn.AdamW(self.tokenizer.parameters(),
                                lr=config.lr_tokenizer, weight_decay=wd)
        self.opt_ref = nn.AdamW(self.reference.parameters(),
                                lr=config.lr_tokenizer, weight_decay=wd)
        self.opt_csa = nn.AdamW(self.store.parameters() + self.head.parameters(),
                                lr=config.lr_csa, weight_decay=wd)
        self.offline = bool(config.offline)
        self.state = PhaseState()

    # -- shared helpers ----------------------------------------------------

    def _warmup_sid(self, item: int):
        sid = self.warmup_sids.get(item)
        if sid is None:
            raise InputError(f"item {item} has no warm-up SID")
        return sid

    def indexed_history(self, history):
        """History restricted to items the index can still tokenize."""
        return [i for i in history if self.index.top_sid(i) is not None]

    def _step_components(self, live):
        """One optimizer step per live component; others only drop any
        stray gradient so nothing moves."""
        for opt, is_live in live:
            if is_live:
                opt.step()
            else:
                opt.zero_grad()
        self.state.steps_in_phase += 1

    # -- phase 1 -------------------------------------------------------------

    def warmup_step(self, batch) -> StepReport:
        if self.state.phase != WARMUP:
            raise InputError(f"warmup_step in phase {self.state.phase}")
        cfg = self.config
        batch = _check_batch(batch, cfg.n_max)
        report = StepReport(phase=WARMUP, n_samples=len(batch),
                            filter_passed=len(batch))
        totals = []
        ref_totals = []
        for history, target, labels, _ts in batch:
            sid = self._warmup_sid(target)
            x = self.store.x_value(target)
            user = self.recommender.recommender_loss(
                self.indexed_history(history), sid, self.index)
            total = user
            report.user += float(user.data)
            if cfg.lambda1 > 0:
                item = self.tokenizer.loss(x, sid)
                c = nn.scale(item, cfg.lambda1)
                total = nn.add(total, c)
                report.item += float(item.data)
                report.item_contrib += float(c.data)
            if cfg.lambda2 > 0:
                xtr = self.head.sample_loss(self.store, history, target, labels)
                c = nn.scale(xtr, cfg.lambda2)
                total = nn.add(total, c)
                report.xtr += float(xtr.data)
                report.xtr_contrib += float(c.data)
            ref = reference_loss(self.reference, x, sid)
            report.ref += float(ref.data)
            ref_totals.append(ref)
            totals.append(total)
            report.total += float(total.data)
        nn.scale(nn.add_n(totals), 1.0 / len(batch)).backward()
        nn.scale(nn.add_n(ref_totals), 1.0 / len(batch)).backward()
        self._step_components([
            (self.opt_rec, True),
            (self.opt_tok, cfg.lambda1 > 0),
            (self.opt_csa, cfg.lambda2 > 0),
            (self.opt_ref, True),
        ])
        return report

    # -- phase 2 -------------------------------------------------------------

    def begin_dynamic_phase(self):
        if self.state.phase == WARMUP:
            _transition(self.state)
            scale = self.config.dynamic_lr_scale
            for opt in (self.opt_rec, self.opt_tok, self.opt_ref,
                        self.opt_csa):
                opt.lr *= scale

    def dynamic_step(self, batch) -> StepReport:
        if self.state.phase != DYNAMIC:
            raise InputError(f"dynamic_step in phase {self.state.phase}")
        cfg = self.config
        batch = _check_batch(batch, cfg.n_max)
        report = StepReport(phase=DYNAMIC, n_samples=len(batch))
        totals = []
        phi_live = False
        csa_live = False
        ref_live = False
        pending = []
        for history, target, labels, ts in batch:
            x = self.store.x_value(target)
            hist = self.indexed_history(history)
            cands = self.tokenizer.beam_candidates(x, cfg.beam_width)
            scored = self.recommender.score_candidates(
                self.recommender.resolve_history(hist, self.index),
                cands.sids())
            best = None
            for sid, ces in scored:
                s = 0.0
                for ce in ces:
                    s += ce
                key = (s / cfg.levels, sid)
                if best is None or key < best[:2]:
                    best = (key[0], sid, ces)
            _, c_star, ces_star = best
            passed = gradient_filter(ces_star, cfg)

            user = self.recommender.recommender_loss(hist, c_star, self.index)
            total = user
            report.user += float(user.data)
            if passed:
                report.filter_passed += 1
            if passed and cfg.w_item > 0 and not self.offline:
                item = self.tokenizer.loss(x, c_star)
                c = nn.scale(item, cfg.w_item)
                total = nn.add(total, c)
                report.item += float(item.data)
                report.item_contrib += float(c.data)
                phi_live = True
            if cfg.w_xtr > 0:
                xtr = self.head.sample_loss(self.store, history, target, labels)
                c = nn.scale(xtr, cfg.w_xtr)
                total = nn.add(total, c)
                report.xtr += float(xtr.data)
                report.xtr_contrib += float(c.data)
                csa_live = True
            if cfg.w_ref > 0:
                reg = reference_loss(self.reference, x, self._warmup_sid(target))
                report.ref += float(reg.data)
                ref_live = True
                if passed and cfg.eta > 0 and not self.offline:
                    kl = kl_regularizer(self.tokenizer, self.reference, x, c_star)
                    reg = nn.add(reg, nn.scale(kl, cfg.eta))
                    report.kl += float(kl.data)
                    phi_live = True
                c = nn.scale(reg, cfg.w_ref)
                total = nn.add(total, c)
                report.reg_contrib += float(c.data)
            totals.append(total)
            report.total += float(total.data)
            pending.append((target, scored, ts))

        nn.scale(nn.add_n(totals), 1.0 / len(batch)).backward()
        # mutations at batch end: optimizer steps, then index updates
        self._step_components([
            (self.opt_rec, True),
            (self.opt_tok, phi_live),
            (self.opt_csa, csa_live),
            (self.opt_ref, ref_live),
        ])
        for target, scored, ts in pending:
            result = self.index.update(target, scored, now=ts)
            report.index_added += len(result.added)
            report.index_removed += len(result.removed)
            report.index_stolen += len(result.stolen)
        return report

    # -- validation ----------------------------------------------------------

    def validation_user_loss(self, samples) -> float:
        """Mean recommender CE against the current selection targets:
        warm-up SIDs in phase 1, min-loss candidates in phase 2."""
        if not samples:
            raise InputError("no validation samples")
        total = 0.0
        cfg = self.config
        with nn.no_grad():
            for history, target, _labels, _ts in samples:
                hist = self.indexed_history(history)
                if self.state.phase == WARMUP:
                    sid = self._warmup_sid(target)
                    node = self.recommender.recommender_loss(hist, sid, self.index)
                    total += float(node.data)
                else:
                    cands = self.tokenizer.beam_candidates(
                        self.store.x_value(target), cfg.beam_width)
                    _sid, mean_ce = self.recommender.min_loss_select(
                        hist, cands, self.index)
                    total += mean_ce * cfg.levels
        return total / len(samples)

    # -- persistence ----------------------------------------------------------

    def parameter_arrays(self) -> dict:
        out = {}
        for p in (self.recommender.parameters() + self.tokenizer.parameters()
                  + self.reference.parameters() + self.store.parameters()
                  + self.head.parameters()):
            if p.name in out:
                raise InputError(f"duplicate parameter name {p.name}")
            out[p.name] = p.data
        return out

    def load_parameter_arrays(self, arrays: dict):
        own = self.parameter_arrays()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise InputError(
                f"parameter set mismatch: missing {missing}, extra {extra}")
        for p in (self.recommender.parameters() + self.tokenizer.parameters()
                  + self.reference.parameters() + self.store.parameters()
                  + self.head.parameters()):
            a = np.asarray(arrays[p.name], dtype=np.float64)
            if a.shape != p.data.shape:
                raise InputError(f"shape mismatch for {p.name}")
            p.data[...] = a
