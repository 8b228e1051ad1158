import math
import random

import pytest

from sidrec.errors import DataError, InputError
from sidrec.index import (BeamIndex, IndexConfig, momentum_merge,
                          relevance_weight)


def cfg(**kw):
    return IndexConfig(**kw)


# ---------------------------------------------------------------- weights

def test_relevance_weight_examples():
    assert relevance_weight([1.0, 1.0, 0.5], 100.0) == 97.5
    assert relevance_weight([0.0, 0.0, 0.0], 100.0) == 100.0


def test_relevance_weight_matches_independent_sum():
    rng = random.Random(3)
    for _ in range(50):
        losses = [rng.uniform(0, 20) for _ in range(3)]
        got = relevance_weight(losses, 100.0)
        assert got == pytest.approx(100.0 - sum(losses), abs=1e-12)


def test_relevance_weight_rejects_bad_losses():
    with pytest.raises(InputError):
        relevance_weight([], 100.0)
    with pytest.raises(InputError):
        relevance_weight([1.0, -0.1], 100.0)
    with pytest.raises(InputError):
        relevance_weight([float("nan")], 100.0)


def test_momentum_merge_cases():
    assert momentum_merge(80.0, 100.0, 0.9) == 82.0
    assert momentum_merge(None, 97.5, 0.9) == 97.5
    assert momentum_merge(55.0, None, 0.9) == 55.0
    assert momentum_merge(80.0, 100.0, 0.0) == 100.0
    assert momentum_merge(80.0, 100.0, 1.0) == 80.0
    with pytest.raises(InputError):
        momentum_merge(None, None, 0.5)
    with pytest.raises(InputError):
        momentum_merge(1.0, 2.0, 1.5)


def test_momentum_merge_fixed_point():
    for w in [97.5, -3.25, 0.1 + 0.2]:
        assert momentum_merge(w, w, 0.9) == w


# ---------------------------------------------------------------- updates

def make_index(**kw):
    return BeamIndex(3, 6, cfg(**kw))


def test_bootstrap_insert():
    idx = make_index()
    res = idx.update(5, [((1, 2, 3), [1.0, 1.0, 0.5])], now=10)
    assert res.entries == [((1, 2, 3), 97.5, 10)]
    assert res.added == [(1, 2, 3)]
    assert idx.reverse_lookup((1, 2, 3)) == (5, 10)
    assert idx.top_sid(5) == (1, 2, 3)
    idx.check_invariants()


def test_stale_conflict_steals_link():
    idx = make_index(delta_t=100)
    idx.update(1, [((0, 0, 0), [0.0, 0.0, 0.0])], now=0)
    res = idx.update(2, [((0, 0, 0), [1.0, 1.0, 1.0])], now=101)
    assert idx.reverse_lookup((0, 0, 0)) == (2, 101)
    assert idx.forward_lookup(1) == []
    assert res.stolen == [(1, (0, 0, 0))]
    idx.check_invariants()


def test_fresh_conflict_respects_incumbent():
    idx = make_index(delta_t=100)
    idx.update(1, [((0, 0, 0), [0.0, 0.0, 0.0])], now=0)
    res = idx.update(2, [((0, 0, 0), [1.0, 1.0, 1.0])], now=100)  # ts 0 not < 0
    assert idx.reverse_lookup((0, 0, 0)) == (1, 0)
    assert idx.forward_lookup(2) == []
    assert res.excluded == [(0, 0, 0)]
    idx.check_invariants()


def test_top_capacity_with_lexicographic_ties():
    idx = make_index(capacity=8)
    predicted = [((0, 0, t), [1.0, 1.0, 1.0]) for t in range(6)] + \
                [((0, 1, t), [1.0, 1.0, 1.0]) for t in range(4)]
    res = idx.update(7, predicted, now=1)
    assert len(res.entries) == 8
    kept = [sid for sid, w, ts in res.entries]
    assert kept == sorted(kept)       # equal weights -> lexicographic
    assert kept[0] == (0, 0, 0) and kept[-1] == (0, 1, 1)
    idx.check_invariants()


def test_overlap_refreshes_timestamp_and_merges():
    idx = make_index(gamma=0.9)
    idx.update(3, [((2, 2, 2), [0.0, 0.0, 0.0])], now=5)       # weight 100
    res = idx.update(3, [((2, 2, 2), [10.0, 5.0, 5.0])], now=9)  # cur 80
    (sid, w, ts), = res.entries
    assert w == 80.0 + 0.9 * (100.0 - 80.0)  # delta form, old=100 cur=80
    assert ts == 9
    assert idx.reverse_lookup((2, 2, 2)) == (3, 9)


def test_kept_but_not_repredicted_keeps_timestamp():
    idx = make_index()
    idx.update(3, [((2, 2, 2), [0.0, 0.0, 0.0])], now=5)
    idx.update(3, [((1, 1, 1), [1.0, 1.0, 1.0])], now=8)
    entries = {sid: (w, ts) for sid, w, ts in idx.forward_lookup(3)}
    assert entries[(2, 2, 2)][1] == 5
    assert entries[(1, 1, 1)][1] == 8


def test_update_input_validation():
    idx = make_index()
    idx.update(0, [((0, 0, 0), [1, 1, 1])], now=5)
    with pytest.raises(InputError):
        idx.update(0, [((0, 0, 0), [1, 1, 1])], now=4)      # regression
    with pytest.raises(InputError):
        idx.update(0, [((0, 0, 0), [1, 1, 1])], now=5.5)    # non-integer
    with pytest.raises(InputError):
        idx.update(0, [], now=6)
    with pytest.raises(InputError):
        idx.update(0, [((0, 0), [1, 1])], now=6)            # short sid
    with pytest.raises(InputError):
        idx.update(0, [((0, 0, 9), [1, 1, 1])], now=6)      # token range
    with pytest.raises(InputError):
        idx.update(0, [((0, 0, 1), [1, 1, 1]),
                       ((0, 0, 1), [2, 2, 2])], now=6)      # dup sid


def test_forward_lookup_unknown_item():
    assert make_index().forward_lookup(123) == []
    assert make_index().reverse_lookup((0, 0, 0)) is None


def test_snapshot_is_immutable_view():
    idx = make_index()
    idx.update(1, [((0, 0, 1), [1, 1, 1])], now=1)
    snap = idx.snapshot()
    idx.update(1, [((4, 4, 4), [0, 0, 0])], now=2)
    assert snap.top_sid(1) == (0, 0, 1)
    assert snap.all_sids() == [(0, 0, 1)]
    assert snap.clock == 1
    assert idx.top_sid(1) == (4, 4, 4)  # higher weight ranks first


# ------------------------------------------------------- reference oracle

class OracleIndex:
    """Flat-layout re-implementation of the documented update discipline."""

    def __init__(self, config):
        self.cfg = config
        self.links = {}   # (item, sid) -> (weight, ts)
        self.owner = {}   # sid -> item
        self.clock = 0

    def update(self, item, predicted, now):
        c = self.cfg
        cur = {}
        for sid, losses in predicted:
            total = 0.0
            for v in losses:
                total += float(v)
            cur[tuple(sid)] = c.offset - total
        mine = {sid: self.links[(it, sid)]
                for (it, sid) in list(self.links) if it == item}

        weights = {}
        for sid in set(mine) | set(cur):
            if sid in mine and sid in cur:
                old, new = mine[sid][0], cur[sid]
                weights[sid] = old if c.gamma == 1.0 else \
                    new + c.gamma * (old - new)
            elif sid in cur:
                weights[sid] = cur[sid]
            else:
                weights[sid] = mine[sid][0]

        surv, steals = {}, []
        for sid in sorted(weights):
            own = self.owner.get(sid)
            if sid in mine:
                if own != item:
                    if sid in cur:
                        if own is None:
                            surv[sid] = (cur[sid], now)
                        elif self.links[(own, sid)][1] < now - c.delta_t:
                            steals.append((own, sid))
                            surv[sid] = (cur[sid], now)
                    continue
                surv[sid] = (weights[sid], now if sid in cur else mine[sid][1])
            else:
                if own is None or own == item:
                    surv[sid] = (weights[sid], now)
                elif self.links[(own, sid)][1] < now - c.delta_t:
                    steals.append((own, sid))
                    surv[sid] = (weights[sid], now)

        for victim, sid in steals:
            del self.links[(victim, sid)]
            del self.owner[sid]

        ranked = sorted(surv.items(), key=lambda kv: (-kv[1][0], kv[0]))
        final = ranked[: c.capacity]
        final_sids = {sid for sid, _ in final}
        for sid in mine:
            if sid not in final_sids and self.owner.get(sid) == item:
                del self.links[(item, sid)]
                del self.owner[sid]
        for sid, (w, ts) in final:
            self.links[(item, sid)] = (w, ts)
            self.owner[sid] = item
        self.clock = now


def state_of(idx: BeamIndex):
    flat = {}
    for item in idx.items():
        for sid, w, ts in idx.forward_lookup(item):
            flat[(item, sid)] = (w.hex(), ts)
    owner = {sid: it for sid, (it, ts) in
             ((s, idx.reverse_lookup(s)) for s in idx.all_sids())}
    return flat, owner, idx.clock


def oracle_state(orc: OracleIndex):
    flat = {k: (float(w).hex(), ts) for k, (w, ts) in orc.links.items()}
    return flat, dict(orc.owner), orc.clock


def test_randomized_updates_match_oracle_bitexact():
    config = cfg(gamma=0.9, delta_t=25, capacity=8, offset=100.0)
    idx = BeamIndex(3, 6, config)
    orc = OracleIndex(config)
    rng = random.Random(1234)

    pool = set()
    while len(pool) < 200:
        pool.add(tuple(rng.randrange(6) for _ in range(3)))
    pool = sorted(pool)

    now = 0
    for step in range(5000):
        item = rng.randrange(30)
        sids = rng.sample(pool, rng.randint(1, 8))
        predicted = [(sid, [rng.uniform(0.0, 12.0) for _ in range(3)])
                     for sid in sids]
        now += rng.choice([0, 0, 1, 1, 2, 7])
        idx.update(item, predicted, now)
        orc.update(item, predicted, now)
        if step % 100 == 0:
            idx.check_invariants()
            assert state_of(idx) == oracle_state(orc)
    idx.check_invariants()
    assert state_of(idx) == oracle_state(orc)


# ---------------------------------------------------------- serialization

def test_export_import_empty(tmp_path):
    idx = make_index()
    p = tmp_path / "idx.tsv"
    idx.export_file(p)
    back = BeamIndex.import_file(p)
    assert state_of(back) == state_of(idx)


def test_export_import_roundtrip_bitexact(tmp_path):
    idx = make_index()
    rng = random.Random(9)
    now = 0
    for _ in range(300):
        sids = {tuple(rng.randrange(6) for _ in range(3))
                for _ in range(rng.randint(1, 6))}
        predicted = [(s, [rng.uniform(0, 15) for _ in range(3)]) for s in sids]
        now += rng.randrange(3)
        idx.update(rng.randrange(12), predicted, now)
    p = tmp_path / "idx.tsv"
    idx.export_file(p)
    back = BeamIndex.import_file(p)
    assert state_of(back) == state_of(idx)
    back.check_invariants()
    # exporting the imported index reproduces the file byte for byte
    p2 = tmp_path / "idx2.tsv"
    back.export_file(p2)
    assert p.read_bytes() == p2.read_bytes()


def test_import_rejects_corruption(tmp_path):
    good = tmp_path / "good.tsv"
    idx = make_index()
    idx.update(1, [((0, 1, 2), [1, 1, 1])], now=3)
    idx.export_file(good)
    lines = good.read_text().splitlines()

    def write(name, text):
        p = tmp_path / name
        p.write_text(text)
        return p

    with pytest.raises(DataError, match="header"):
        BeamIndex.import_file(write("h.tsv", "bogus\t1\t2\n"))
    with pytest.raises(DataError, match=":2:"):
        BeamIndex.import_file(write("f.tsv", lines[0] + "\n1\t0,1\n"))
    with pytest.raises(DataError, match=":2:"):
        BeamIndex.import_file(
            write("t.tsv", lines[0] + "\n1\t0,1,9\t5.0\t3\n"))
    with pytest.raises(DataError, match=":3:"):
        BeamIndex.import_file(
            write("d.tsv", lines[0] + "\n1\t0,1,2\t5.0\t3\n2\t0,1,2\t4.0\t3\n"))
    with pytest.raises(DataError, match="ahead of clock"):
        BeamIndex.import_file(
            write("c.tsv", lines[0] + "\n1\t0,1,2\t5.0\t99\n"))
    with pytest.raises(DataError):
        BeamIndex.import_file(write("e.tsv", ""))
