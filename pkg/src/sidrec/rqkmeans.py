"""Residual K-means tokenizer used to bootstrap semantic IDs.

Level 1 clusters the raw embeddings; each further level clusters the
residuals left by the previous one.  A SID is the tuple of per-level
nearest-centroid indices.

Determinism contract (tests re-derive it with plain loops):
  * per-level RNG streams come from SeedSequence(seed).spawn(levels)
  * k-means++ draws the first center uniformly, then each next center
    via rng.choice weighted by squared distance to the nearest chosen
    center (uniform fallback when every distance is zero)
  * Lloyd iteration: assign to nearest centroid (ties -> smallest
    index), replace non-empty centroids by member means, then re-seed
    empty centroids (ascending id) with the points farthest from their
    assigned centroid, farthest first, each point used at most once
  * squared distances are computed as ((x - c) ** 2).sum(last axis)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, InputError
from .neural.checkpoint import load_arrays, save_arrays


@dataclass(frozen=True)
class CodebookSpec:
    levels: int
    codes_per_level: int
    dim: int

    def validate(self) -> None:
        if self.levels < 1:
            raise InputError(f"levels must be >= 1, got {self.levels}")
        if self.codes_per_level < 2:
            raise InputError(f"codes_per_level must be >= 2, got {self.codes_per_level}")
        if self.dim < 1:
            raise InputError(f"dim must be >= 1, got {self.dim}")


@dataclass
class Codebook:
    spec: CodebookSpec
    centroids: list  # levels arrays of [codes_per_level, dim]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # [n, k]; plain difference form keeps ties identical to a loop oracle
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=2)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    centers = _kmeanspp(points, k, rng)
    for _ in range(iters):
        dists = _sq_dists(points, centers)
        assign = dists.argmin(axis=1)
        own = dists[np.arange(points.shape[0]), assign]
        new = centers.copy()
        empty = []
        for c in range(k):
            members = assign == c
            if members.any():
                new[c] = points[members].mean(axis=0)
            else:
                empty.append(c)
        if empty:
            # farthest points first; each claims one empty cluster
            order = np.argsort(-own, kind="stable")
            for c, p in zip(empty, order):
                new[c] = points[p]
        centers = new
    return centers


def fit(embeddings: np.ndarray, spec: CodebookSpec, iters: int = 25,
        seed: int = 0) -> Codebook:
    spec.validate()
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError(f"embeddings must be a non-empty [N, d] array, got {x.shape}")
    if x.shape[1] != spec.dim:
        raise InputError(f"embedding dim {x.shape[1]} != spec dim {spec.dim}")
    if iters < 1:
        raise InputError("iters must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(spec.levels)
    residual = x.copy()
    centroids = []
    for level in range(spec.levels):
        rng = np.random.default_rng(streams[level])
        centers = _lloyd(residual, spec.codes_per_level, iters, rng)
        centroids.append(centers)
        assign = _sq_dists(residual, centers).argmin(axis=1)
        residual = residual - centers[assign]
    return Codebook(spec=spec, centroids=centroids)


def tokenize(codebook: Codebook, embedding: np.ndarray) -> tuple:
    """Nearest centroid per level on the running residual.  Ties break
    to the smallest token id (argmin picks the first minimum)."""
    x = np.asarray(embedding, dtype=np.float64)
    if x.shape != (codebook.spec.dim,):
        raise InputError(f"embedding shape {x.shape} != ({codebook.spec.dim},)")
    tokens = []
    residual = x
    for centers in codebook.centroids:
        t = int(((residual[None, :] - centers) ** 2).sum(axis=1).argmin())
        tokens.append(t)
        residual = residual - centers[t]
    return tuple(tokens)


def tokenize_batch(codebook: Codebook, embeddings: np.ndarray) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.spec.dim:
        raise InputError(f"embeddings must be [N, {codebook.spec.dim}]")
    out = np.empty((x.shape[0], codebook.spec.levels), dtype=np.int64)
    residual = x.copy()
    for level, centers in enumerate(codebook.centroids):
        assign = _sq_dists(residual, centers).argmin(axis=1)
        out[:, level] = assign
        residual -= centers[assign]
    return out


def reconstruct(codebook: Codebook, tokens) -> np.ndarray:
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) != codebook.spec.levels:
        raise InputError(f"expected {codebook.spec.levels} tokens, got {len(tokens)}")
    out = np.zeros(codebook.spec.dim, dtype=np.float64)
    for level, t in enumerate(tokens):
        if not 0 <= t < codebook.spec.codes_per_level:
            raise InputError(f"token {t} out of range at level {level + 1}")
        out += codebook.centroids[level][t]
    return out


def residual_mse_per_level(codebook: Codebook, embeddings: np.ndarray) -> list:
    """Mean squared residual after each level; non-increasing by
    construction since every level subtracts a nearest centroid."""
    x = np.asarray(embeddings, dtype=np.float64)
    residual = x.copy()
    out = []
    for centers in codebook.centroids:
        assign = _sq_dists(residual, centers).argmin(axis=1)
        residual = residual - centers[assign]
        out.append(float((residual * residual).sum(axis=1).mean()))
    return out


def sid_stats(sids) -> dict:
    sids = list(sids)
    distinct = len(set(sids))
    return {"items": len(sids), "distinct": distinct,
            "collisions": len(sids) - distinct}


def save_codebook(path, codebook: Codebook, config_hash: str = "") -> None:
    arrays = {f"level_{i}": c for i, c in enumerate(codebook.centroids)}
    meta = {"kind": "codebook", "levels": codebook.spec.levels,
            "codes_per_level": codebook.spec.codes_per_level,
            "dim": codebook.spec.dim}
    save_arrays(path, arrays, config_hash=config_hash, meta=meta)


def load_codebook(path) -> Codebook:
    arrays, _, meta = load_arrays(path)
    if not meta or meta.get("kind") != "codebook":
        raise DataError("not a codebook container", path=path, line=1)
    spec = CodebookSpec(levels=int(meta["levels"]),
                        codes_per_level=int(meta["codes_per_level"]),
                        dim=int(meta["dim"]))
    spec.validate()
    centroids = []
    for i in range(spec.levels):
        arr = arrays.get(f"level_{i}")
        if arr is None:
            raise DataError(f"missing level_{i}", path=path, line=1)
        if arr.shape != (spec.codes_per_level, spec.dim):
            raise DataError(f"level_{i} has shape {arr.shape}", path=path, line=1)
        centroids.append(arr)
    return Codebook(spec=spec, centroids=centroids)


def write_sid_dump(path, sids: dict) -> None:
    """item_id<TAB>t1,t2,...,tL per line, sorted by item id."""
    with open(path, "w") as fh:
        for item in sorted(sids):
            toks = ",".join(str(t) for t in sids[item])
            fh.write(f"{item}\t{toks}\n")


def load_sid_dump(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise DataError("expected item_id<TAB>tokens", path=path, line=ln)
            try:
                item = int(fields[0])
                tokens = tuple(int(t) for t in fields[1].split(","))
            except ValueError:
                raise DataError(f"bad record {line!r}", path=path, line=ln)
            if item in out:
                raise DataError(f"duplicate item {item}", path=path, line=ln)
            out[item] = tokens
    return out
