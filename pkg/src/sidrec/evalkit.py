"""Ranking metrics, codebook usage statistics, and the CSV report."""

from __future__ import annotations

import csv
import math
from collections import Counter

from .errors import DataError, InputError


def recall_at_k(ranked_items, target, k: int) -> float:
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    ranked_items = list(ranked_items)
    if not ranked_items:
        raise InputError("ranked list is empty")
    return 1.0 if target in ranked_items[:k] else 0.0


def ndcg_at_k(ranked_items, target, k: int) -> float:
    """Single relevant item, so ideal DCG is 1 and the gain at 1-based
    rank r is 1/log2(r + 1)."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    ranked_items = list(ranked_items)
    if not ranked_items:
        raise InputError("ranked list is empty")
    for r, item in enumerate(ranked_items[:k], start=1):
        if item == target:
            return 1.0 / math.log2(r + 1.0)
    return 0.0


def evaluate_ranking(pairs, ks=(5, 10)):
    """pairs: iterable of (ranked item list, target item).

    Returns {"recall@k": mean, "ndcg@k": mean} over users.  Per pair
    ndcg <= recall, so that ordering survives the mean.
    """
    pairs = list(pairs)
    if not pairs:
        raise InputError("no evaluation pairs")
    out = {}
    for k in ks:
        rec = [recall_at_k(r, t, k) for r, t in pairs]
        ndcg = [ndcg_at_k(r, t, k) for r, t in pairs]
        out[f"recall@{k}"] = sum(rec) / len(rec)
        out[f"ndcg@{k}"] = sum(ndcg) / len(ndcg)
    return out


# -- codebook usage -----------------------------------------------------------

def sid_usage(index, all_aliases: bool = False):
    """Per-level token counts over the live index.

    Default counts each item's top-weight alias once, so counts at every
    level sum to the number of indexed items.  all_aliases=True counts
    every stored link instead.
    """
    counts = [Counter() for _ in range(index.levels)]
    if all_aliases:
        for item in index.items():
            for sid, _w, _ts in index.forward_lookup(item):
                for lvl, tok in enumerate(sid):
                    counts[lvl][tok] += 1
    else:
        for item in index.items():
            top = index.top_sid(item)
            if top is None:
                continue
            for lvl, tok in enumerate(top):
                counts[lvl][tok] += 1
    return counts


def codebook_entropy(counts: Counter) -> float:
    """Shannon entropy in bits of the empirical token distribution."""
    total = sum(counts.values())
    if total <= 0:
        return 0.0
    h = 0.0
    for c in counts.values():
        if c > 0:
            p = c / total
            h -= p * math.log2(p)
    return h


def codebook_density(counts: Counter, codes_per_level: int) -> float:
    if codes_per_level < 1:
        raise InputError("codes_per_level must be >= 1")
    active = sum(1 for c in counts.values() if c > 0)
    return active / codes_per_level


def usage_report(index, all_aliases: bool = False):
    """[(entropy_bits, density)] per level."""
    counts = sid_usage(index, all_aliases=all_aliases)
    return [(codebook_entropy(c), codebook_density(c, index.codes))
            for c in counts]


# -- CSV report ---------------------------------------------------------------

def report_columns(levels: int):
    cols = ["step", "phase", "recall@5", "recall@10", "ndcg@5", "ndcg@10"]
    cols += [f"entropy_level_{i + 1}" for i in range(levels)]
    cols += [f"density_level_{i + 1}" for i in range(levels)]
    return cols


def make_report_row(step, phase, ranking_metrics, per_level):
    """per_level: [(entropy, density)] as from usage_report."""
    row = {"step": step, "phase": phase}
    for k in (5, 10):
        row[f"recall@{k}"] = ranking_metrics[f"recall@{k}"]
        row[f"ndcg@{k}"] = ranking_metrics[f"ndcg@{k}"]
    for i, (h, d) in enumerate(per_level):
        row[f"entropy_level_{i + 1}"] = h
        row[f"density_level_{i + 1}"] = d
    return row


def write_report(rows, levels: int, path):
    cols = report_columns(levels)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            missing = [c for c in cols if c not in row]
            if missing:
                raise InputError(f"report row missing columns {missing}")
            writer.writerow({c: _fmt(row[c]) for c in cols})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_report(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("report has no header", path=str(path), line=1)
        rows = []
        for n, raw in enumerate(reader, start=2):
            row = {}
            for key, val in raw.items():
                if key is None or val is None:
                    raise DataError("ragged report row", path=str(path), line=n)
                if key in ("step",):
                    try:
                        row[key] = int(val)
                    except ValueError:
                        raise DataError(f"bad step {val!r}", path=str(path),
                                        line=n)
                elif key == "phase":
                    row[key] = val
                else:
                    try:
                        row[key] = float(val)
                    except ValueError:
                        raise DataError(f"bad value {val!r} for {key}",
                                        path=str(path), line=n)
            rows.append(row)
    return rows
