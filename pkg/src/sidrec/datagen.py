"""Synthetic interaction worlds and event streams.

A world has C clusters with orthonormal centers.  Items carry a latent
vector (their center plus noise) and observed content features (latent
plus smaller noise); users carry a preference vector near their own
cluster's center.  Events pick items by preference-popularity sampling
and attach thresholded noisy-affinity behavior labels.

Popularity ranks are item ids themselves, assigned in per-cluster
contiguous blocks (cluster 0 owns the globally hottest items).  Global
popularity alone therefore explains nothing about which item a user of
cluster c > 0 picks, which keeps frequency baselines honest.

Item choice uses relu(affinity)^sharpness * zipf, not a softmax: the
rectification gives exactly zero probability across orthogonal clusters
at zero noise, making the degenerate-structure behavior exact rather
than merely likely.

Everything is a pure function of (config, seed); regeneration is
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InputError

DEFAULT_BEHAVIORS = ("click", "like", "follow")


@dataclass
class WorldConfig:
    n_users: int = 500
    n_items: int = 200
    n_clusters: int = 8
    content_dim: int = 16
    noise: float = 0.05
    zipf_exponent: float = 1.2
    sharpness: float = 4.0
    behaviors: tuple = DEFAULT_BEHAVIORS
    behavior_rates: tuple = (0.5, 0.25, 0.1)
    label_noise: float = 0.3
    pilot_events: int = 2000

    def validate(self):
        if self.n_users < 1 or self.n_items < 1:
            raise InputError("need at least one user and one item")
        if not (1 <= self.n_clusters <= self.n_items):
            raise InputError(
                f"n_clusters={self.n_clusters} must be in [1, n_items]")
        if self.n_clusters > self.content_dim:
            raise InputError("orthonormal centers need n_clusters <= content_dim")
        if self.noise < 0 or self.label_noise < 0:
            raise InputError("noise scales must be >= 0")
        if self.zipf_exponent < 0:
            raise InputError("zipf_exponent must be >= 0")
        if self.sharpness <= 0:
            raise InputError("sharpness must be > 0")
        if len(self.behaviors) != len(self.behavior_rates):
            raise InputError("one rate per behavior required")
        for r in self.behavior_rates:
            if not (0.0 < r < 1.0):
                raise InputError(f"behavior rate {r} outside (0,1)")
        return self


@dataclass
class SyntheticWorld:
    config: WorldConfig
    seed: int
    centers: np.ndarray          # [C, d] orthonormal rows
    item_cluster: np.ndarray     # [N]
    item_latent: np.ndarray      # [N, d]
    content_features: np.ndarray  # [N, d] observed, feeds the models
    popularity: np.ndarray       # [N] unnormalized zipf mass
    user_cluster: np.ndarray     # [U]
    user_pref: np.ndarray        # [U, d]
    behavior_thresholds: np.ndarray  # per behavior

    def choice_probs(self, user: int) -> np.ndarray:
        a = self.item_latent @ self.user_pref[user]
        s = np.where(a > 0.0, a, 0.0) ** self.config.sharpness * self.popularity
        total = s.sum()
        if total <= 0.0:
            return np.full(len(s), 1.0 / len(s))
        return s / total

    def affinity(self, user: int, item: int) -> float:
        return float(self.item_latent[item] @ self.user_pref[user])


@dataclass
class InteractionEvent:
    user_id: int
    item_id: int
    timestamp: int
    labels: tuple   # 0/1 per behavior, aligned with config.behaviors

    def label_dict(self, behaviors=DEFAULT_BEHAVIORS):
        return dict(zip(behaviors, self.labels))


def _sample_items(world, rng, users):
    """Inverse-CDF draws; one uniform per event."""
    cdf = {}
    items = np.empty(len(users), dtype=np.int64)
    for row, u in enumerate(users):
        u = int(u)
        if u not in cdf:
            cdf[u] = np.cumsum(world.choice_probs(u))
        items[row] = min(int(np.searchsorted(cdf[u], rng.random())),
                         world.config.n_items - 1)
    return items


def _noisy_labels(world, rng, user, item):
    a = world.affinity(int(user), int(item))
    out = []
    for b, th in enumerate(world.behavior_thresholds):
        z = a + world.config.label_noise * rng.standard_normal()
        out.append(1 if z > th else 0)
    return tuple(out)


def generate_world(config: WorldConfig, seed: int) -> SyntheticWorld:
    config.validate()
    root = np.random.SeedSequence(seed)
    s_struct, s_pilot = root.spawn(2)
    rng = np.random.default_rng(s_struct)

    C, N, U, d = (config.n_clusters, config.n_items, config.n_users,
                  config.content_dim)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    centers = q[:, :C].T.copy()

    per = N // C
    item_cluster = np.minimum(np.arange(N) // max(per, 1), C - 1)
    item_latent = centers[item_cluster] + \
        config.noise * rng.standard_normal((N, d))
    content = item_latent + 0.2 * config.noise * rng.standard_normal((N, d))
    # rank == item id: per-cluster contiguous popularity blocks
    popularity = (1.0 + np.arange(N)) ** (-config.zipf_exponent)

    user_cluster = np.arange(U) % C
    user_pref = centers[user_cluster] + \
        0.5 * config.noise * rng.standard_normal((U, d))

    world = SyntheticWorld(config, seed, centers, item_cluster, item_latent,
                           content, popularity, user_cluster, user_pref,
                           behavior_thresholds=np.zeros(len(config.behaviors)))

    # calibrate thresholds so stream label rates land near the configured
    # base rates: quantiles of pilot noisy affinities
    prng = np.random.default_rng(s_pilot)
    n_pilot = max(min(config.pilot_events, 20000), 200)
    pusers = prng.integers(0, U, size=n_pilot)
    pitems = _sample_items(world, prng, pusers)
    zs = np.empty((len(config.behaviors), n_pilot))
    for row, (u, i) in enumerate(zip(pusers, pitems)):
        a = world.affinity(int(u), int(i))
        for b in range(len(config.behaviors)):
            zs[b, row] = a + config.label_noise * prng.standard_normal()
    thresholds = np.array([
        float(np.quantile(zs[b], 1.0 - config.behavior_rates[b]))
        for b in range(len(config.behaviors))
    ])
    world.behavior_thresholds = thresholds
    return world


def generate_stream(world: SyntheticWorld, n_events: int):
    """Chronological events; timestamps are the global event counter."""
    cfg = world.config
    if n_events < cfg.n_users:
        raise InputError(
            f"n_events={n_events} < n_users={cfg.n_users}")
    rng = np.random.default_rng(np.random.SeedSequence(world.seed).spawn(3)[2])
    users = rng.integers(0, cfg.n_users, size=n_events)
    items = _sample_items(world, rng, users)
    events = []
    for t in range(n_events):
        labels = _noisy_labels(world, rng, users[t], items[t])
        events.append(InteractionEvent(int(users[t]), int(items[t]), t, labels))
    return events


@dataclass
class SplitRecord:
    history: tuple      # train items, oldest first, truncated to n_max
    val_item: int | None
    test_item: int | None


def leave_one_out_split(events, n_max: int = 50):
    """Last event per user -> test, second-to-last -> val, rest -> train.

    Users with fewer than three events contribute train history only.
    """
    per_user = {}
    for ev in events:
        per_user.setdefault(ev.user_id, []).append(ev.item_id)
    split = {}
    for user in sorted(per_user):
        items = per_user[user]
        if len(items) >= 3:
            split[user] = SplitRecord(tuple(items[:-2][-n_max:]),
                                      items[-2], items[-1])
        else:
            split[user] = SplitRecord(tuple(items[-n_max:]), None, None)
    return split


# -- file formats -------------------------------------------------------------

def save_events(events, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            labels = ",".join(str(v) for v in ev.labels)
            fh.write(f"{ev.user_id}\t{ev.item_id}\t{ev.timestamp}\t{labels}\n")


def load_events(path, n_behaviors=None):
    events = []
    last_ts = {}
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"expected 4 fields, got {len(parts)}",
                                path=path, line=n)
            try:
                user, item, ts = int(parts[0]), int(parts[1]), int(parts[2])
                labels = tuple(int(v) for v in parts[3].split(","))
            except ValueError as exc:
                raise DataError(f"unparsable field: {exc}", path=path, line=n)
            if any(v not in (0, 1) for v in labels):
                raise DataError(f"labels must be 0/1, got {parts[3]}",
                                path=path, line=n)
            if n_behaviors is not None and len(labels) != n_behaviors:
                raise DataError(f"expected {n_behaviors} labels", path=path,
                                line=n)
            if user in last_ts and ts <= last_ts[user]:
                raise DataError(
                    f"timestamp {ts} not increasing for user {user}",
                    path=path, line=n)
            last_ts[user] = ts
            events.append(InteractionEvent(user, item, ts, labels))
    return events


def save_catalog(item_ids, features, path):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(item_ids) != features.shape[0]:
        raise InputError("catalog needs one feature row per item")
    with open(path, "w", encoding="utf-8") as fh:
        for item, row in zip(item_ids, features):
            vals = ",".join(repr(float(v)) for v in row)
            fh.write(f"{item}\t{vals}\n")


def load_catalog(path):
    """Returns (item_ids list, features [N, d])."""
    ids, rows, dim = [], [], None
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"expected 2 fields, got {len(parts)}",
                                path=path, line=n)
            try:
                item = int(parts[0])
                row = [float(v) for v in parts[1].split(",")]
            except ValueError as exc:
                raise DataError(f"unparsable field: {exc}", path=path, line=n)
            if item in seen:
                raise DataError(f"duplicate item {item}", path=path, line=n)
            if dim is None:
                dim = len(row)
            elif len(row) != dim:
                raise DataError(f"feature dim {len(row)} != {dim}",
                                path=path, line=n)
            seen.add(item)
            ids.append(item)
            rows.append(row)
    if not ids:
        raise DataError("catalog is empty", path=path, line=1)
    return ids, np.array(rows)
