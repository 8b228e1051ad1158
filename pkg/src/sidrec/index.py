"""Dynamic one-to-many item <-> token-sequence store.

Each item holds up to `capacity` weighted SID aliases; each SID is owned
by at most one item (the reverse map is a partial function).  Updates
follow a fixed four-step discipline:

1. relevance weights for the predicted SIDs (offset minus summed CE);
2. momentum merge against the item's existing entries;
3. graph-integrity pruning: fetched links whose reverse no longer points
   at the item are severed (they may re-enter through the ownership
   branch if also predicted); predicted SIDs owned by another item are
   stolen when the incumbent link is older than delta_t, otherwise the
   incumbent is respected and the SID is excluded;
4. top-capacity consolidation, ties broken by lexicographically smaller
   SID.  A steal prunes the victim immediately even if the stolen SID
   then fails to survive step 4.

Timestamps are logical event times (integers) and refresh on every
successful (re)assertion of a link; kept-but-not-repredicted links keep
their old timestamp.  State is deterministic given the update sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DataError, InputError, InvariantError


@dataclass
class IndexConfig:
    gamma: float = 0.9
    delta_t: int = 1000
    capacity: int = 8
    offset: float = 100.0

    def validate(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise InputError(f"gamma must be in [0,1], got {self.gamma}")
        if self.delta_t < 0:
            raise InputError(f"delta_t must be >= 0, got {self.delta_t}")
        if self.capacity < 1:
            raise InputError(f"capacity must be >= 1, got {self.capacity}")
        if not math.isfinite(self.offset):
            raise InputError("offset must be finite")
        return self


def relevance_weight(ce_losses, offset: float) -> float:
    """offset minus the summed per-token cross-entropies."""
    losses = list(ce_losses)
    if not losses:
        raise InputError("ce_losses is empty")
    total = 0.0
    for v in losses:
        v = float(v)
        if not math.isfinite(v) or v < 0:
            raise InputError(f"ce loss must be finite and >= 0, got {v}")
        total += v
    return float(offset) - total


def momentum_merge(old_weight, cur_weight, gamma: float) -> float:
    """Blend an existing weight with a freshly predicted one.

    Both present -> gamma-weighted average (computed as
    cur + gamma*(old - cur): exact at gamma=0, an exact fixed point when
    old == cur, and gamma=1 returns old via an explicit branch); only
    one present -> that one.
    """
    if not (0.0 <= gamma <= 1.0):
        raise InputError(f"gamma must be in [0,1], got {gamma}")
    if old_weight is None and cur_weight is None:
        raise InputError("momentum_merge needs at least one weight")
    if old_weight is None:
        return float(cur_weight)
    if cur_weight is None:
        return float(old_weight)
    old, cur = float(old_weight), float(cur_weight)
    if gamma == 1.0:
        return old
    return cur + gamma * (old - cur)


@dataclass
class UpdateResult:
    """Outcome of one update: the item's new alias list plus churn."""
    entries: list                 # [(sid, weight, timestamp)] best first
    added: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    stolen: list = field(default_factory=list)    # [(victim_item, sid)]
    excluded: list = field(default_factory=list)  # fresh-conflict sids


class IndexSnapshot:
    """Immutable point-in-time view; safe for concurrent readers."""

    def __init__(self, levels, codes, capacity, clock, forward, reverse):
        self.levels = levels
        self.codes = codes
        self.capacity = capacity
        self.clock = clock
        self._forward = forward
        self._reverse = reverse

    def top_sid(self, item_id):
        entries = self._forward.get(item_id)
        return entries[0][0] if entries else None

    def forward_lookup(self, item_id):
        return list(self._forward.get(item_id, ()))

    def reverse_lookup(self, sid):
        return self._reverse.get(tuple(sid))

    def all_sids(self):
        return sorted(self._reverse)

    def items(self):
        return sorted(self._forward)

    def n_links(self):
        return sum(len(v) for v in self._forward.values())


class BeamIndex:
    """Mutable store; single writer, snapshot() for readers."""

    def __init__(self, levels: int, codes_per_level: int,
                 config: IndexConfig | None = None):
        if levels < 1 or codes_per_level < 2:
            raise InputError("need levels >= 1 and codes_per_level >= 2")
        self.levels = levels
        self.codes = codes_per_level
        self.config = (config or IndexConfig()).validate()
        self.clock = 0
        self._forward = {}   # item -> [(sid, weight, ts)] sorted (-w, sid)
        self._reverse = {}   # sid -> (item, ts)

    # -- validation helpers ------------------------------------------------

    def _check_sid(self, sid):
        sid = tuple(int(t) for t in sid)
        if len(sid) != self.levels:
            raise InputError(f"sid length {len(sid)} != levels {self.levels}")
        for t in sid:
            if not (0 <= t < self.codes):
                raise InputError(f"token {t} out of range [0, {self.codes})")
        return sid

    @staticmethod
    def _check_time(now):
        if isinstance(now, bool) or not isinstance(now, int):
            raise InputError(f"timestamps are integer event times, got {now!r}")
        return now

    # -- the Algorithm-1 update ---------------------------------------------

    def update(self, item_id, predicted, now, config: IndexConfig | None = None):
        cfg = (config or self.config).validate()
        now = self._check_time(now)
        if now < self.clock:
            raise InputError(f"time regression: now={now} < clock={self.clock}")
        if not predicted:
            raise InputError("predicted SID list is empty")

        # step 1: relevance weights
        cur_w = {}
        for sid, losses in predicted:
            sid = self._check_sid(sid)
            if sid in cur_w:
                raise InputError(f"duplicate predicted sid {sid}")
            cur_w[sid] = relevance_weight(losses, cfg.offset)

        fetched = {sid: (w, ts) for sid, w, ts in self._forward.get(item_id, ())}

        # step 2: momentum merge over fetched | predicted
        merged = {}
        for sid in set(fetched) | set(cur_w):
            merged[sid] = momentum_merge(
                fetched[sid][0] if sid in fetched else None,
                cur_w.get(sid), cfg.gamma)

        # step 3: graph integrity
        survivors = {}   # sid -> (weight, timestamp)
        steals, excluded = [], []

        def resolve_conflict(sid, weight):
            owner_item, owner_ts = self._reverse[sid]
            if owner_ts < now - cfg.delta_t:
                steals.append((owner_item, sid))
                survivors[sid] = (weight, now)
            else:
                excluded.append(sid)

        for sid in sorted(merged):
            owner = self._reverse.get(sid)
            if sid in fetched:
                if owner is None or owner[0] != item_id:
                    # forward association severed; a predicted sid may
                    # still re-enter through ownership resolution
                    if sid in cur_w:
                        if owner is None:
                            survivors[sid] = (cur_w[sid], now)
                        else:
                            resolve_conflict(sid, cur_w[sid])
                    continue
                ts = now if sid in cur_w else fetched[sid][1]
                survivors[sid] = (merged[sid], ts)
            else:
                if owner is None or owner[0] == item_id:
                    survivors[sid] = (merged[sid], now)
                else:
                    resolve_conflict(sid, merged[sid])

        # steals prune the victim immediately
        for victim, sid in steals:
            self._forward[victim] = [e for e in self._forward[victim]
                                     if e[0] != sid]
            if not self._forward[victim]:
                del self._forward[victim]
            del self._reverse[sid]

        # step 4: top-capacity consolidation
        ranked = sorted(survivors.items(), key=lambda kv: (-kv[1][0], kv[0]))
        kept = ranked[:cfg.capacity]
        final = {sid for sid, _ in kept}

        # fetched links that drop out (severed, out-merged, or evicted)
        # release their reverse entries; a stolen sid that then failed
        # consolidation was already unowned by the steal above
        for sid in fetched:
            if sid not in final:
                owner = self._reverse.get(sid)
                if owner is not None and owner[0] == item_id:
                    del self._reverse[sid]

        entries = [(sid, w, ts) for sid, (w, ts) in kept]
        entries.sort(key=lambda e: (-e[1], e[0]))
        if entries:
            self._forward[item_id] = entries
        else:
            self._forward.pop(item_id, None)
        for sid, w, ts in entries:
            self._reverse[sid] = (item_id, ts)
        self.clock = now

        return UpdateResult(
            entries=list(entries),
            added=sorted(final - set(fetched)),
            removed=sorted(set(fetched) - final),
            stolen=steals,
            excluded=excluded,
        )

    # -- reads -------------------------------------------------------------

    def forward_lookup(self, item_id):
        return list(self._forward.get(item_id, ()))

    def reverse_lookup(self, sid):
        return self._reverse.get(self._check_sid(sid))

    def top_sid(self, item_id):
        entries = self._forward.get(item_id)
        return entries[0][0] if entries else None

    def all_sids(self):
        return sorted(self._reverse)

    def items(self):
        return sorted(self._forward)

    def n_links(self):
        return sum(len(v) for v in self._forward.values())

    def snapshot(self) -> IndexSnapshot:
        forward = {i: tuple(v) for i, v in self._forward.items()}
        return IndexSnapshot(self.levels, self.codes, self.config.capacity,
                             self.clock, forward, dict(self._reverse))

    # -- invariants ----------------------------------------------------------

    def check_invariants(self):
        cap = self.config.capacity
        seen = {}
        for item, entries in self._forward.items():
            if not entries:
                raise InvariantError(f"item {item} has an empty entry list")
            if len(entries) > cap:
                raise InvariantError(f"item {item} holds {len(entries)} > B={cap}")
            key = [(-w, sid) for sid, w, ts in entries]
            if key != sorted(key):
                raise InvariantError(f"item {item} entries not sorted")
            for sid, w, ts in entries:
                if not math.isfinite(w):
                    raise InvariantError(f"non-finite weight on {item}/{sid}")
                if ts > self.clock:
                    raise InvariantError(f"timestamp {ts} ahead of clock {self.clock}")
                if sid in seen:
                    raise InvariantError(f"sid {sid} owned by {seen[sid]} and {item}")
                seen[sid] = item
                if self._reverse.get(sid) != (item, ts):
                    raise InvariantError(
                        f"forward/reverse mismatch on {item}/{sid}")
        for sid, (item, ts) in self._reverse.items():
            if seen.get(sid) != item:
                raise InvariantError(f"dangling reverse entry {sid} -> {item}")

    # -- serialization --------------------------------------------------------

    def export_file(self, path):
        lines = [f"sidrec-index\t{self.levels}\t{self.codes}\t"
                 f"{self.config.capacity}\t{self.clock}\n"]
        for item in sorted(self._forward):
            for sid, w, ts in self._forward[item]:
                toks = ",".join(str(t) for t in sid)
                lines.append(f"{item}\t{toks}\t{w!r}\t{ts}\n")
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(lines)

    @classmethod
    def import_file(cls, path, config: IndexConfig | None = None):
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise DataError("empty index file", path=path, line=1)
        head = lines[0].split("\t")
        if len(head) != 5 or head[0] != "sidrec-index":
            raise DataError("malformed index header", path=path, line=1)
        try:
            levels, codes, capacity, clock = (int(v) for v in head[1:])
        except ValueError:
            raise DataError("non-integer field in header", path=path, line=1)
        cfg = config or IndexConfig(capacity=capacity)
        if cfg.capacity != capacity:
            raise DataError(f"config capacity {cfg.capacity} != file capacity "
                            f"{capacity}", path=path, line=1)
        idx = cls(levels, codes, cfg)
        idx.clock = clock
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"expected 4 fields, got {len(parts)}",
                                path=path, line=n)
            try:
                item = int(parts[0])
                sid = tuple(int(t) for t in parts[1].split(","))
                weight = float(parts[2])
                ts = int(parts[3])
            except ValueError as exc:
                raise DataError(f"unparsable field: {exc}", path=path, line=n)
            try:
                sid = idx._check_sid(sid)
            except InputError as exc:
                raise DataError(str(exc), path=path, line=n)
            if not math.isfinite(weight):
                raise DataError(f"non-finite weight {parts[2]}", path=path, line=n)
            if ts > clock:
                raise DataError(f"timestamp {ts} ahead of clock {clock}",
                                path=path, line=n)
            if sid in idx._reverse:
                raise DataError(f"sid {sid} assigned twice", path=path, line=n)
            idx._forward.setdefault(item, []).append((sid, weight, ts))
            idx._reverse[sid] = (item, ts)
        for item, entries in idx._forward.items():
            if len(entries) > capacity:
                raise DataError(f"item {item} holds {len(entries)} > B={capacity}",
                                path=path, line=1)
            entries.sort(key=lambda e: (-e[1], e[0]))
        return idx
