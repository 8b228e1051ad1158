"""Collaborative signal alignment: a DIN-style multi-behavior head.

Each item carries a frozen content vector and a trainable collaborative
embedding; X_i is their concatenation.  The head attends over the
(detached) history with the target as query and emits one sigmoid
logit per behavior.  Because the history side enters as constants, the
behavior loss trains only the head and the target item's collaborative
embedding, never the user context.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from . import neural as nn

DEFAULT_BEHAVIORS = ("click", "like", "follow")


class ItemStore:
    """Frozen content features plus one trainable collab row per item."""

    def __init__(self, item_ids, content: np.ndarray, collab_dim: int,
                 rng: np.random.Generator, init_scale: float = 0.1):
        content = np.asarray(content, dtype=np.float64)
        item_ids = [int(i) for i in item_ids]
        if content.ndim != 2 or content.shape[0] != len(item_ids):
            raise InputError("content must be [n_items, d_c]")
        if len(set(item_ids)) != len(item_ids):
            raise InputError("duplicate item ids")
        if collab_dim < 1:
            raise InputError("collab_dim must be >= 1")
        self.item_ids = item_ids
        self._row = {item: r for r, item in enumerate(item_ids)}
        self.content = content.copy()
        self.content.setflags(write=False)
        self.collab = nn.Parameter(
            "csa.collab",
            init_scale * rng.standard_normal((len(item_ids), collab_dim)))
        self.content_dim = content.shape[1]
        self.collab_dim = collab_dim
        self.x_dim = self.content_dim + collab_dim

    def row(self, item_id: int) -> int:
        r = self._row.get(int(item_id))
        if r is None:
            raise InputError(f"unknown item id {item_id}")
        return r

    def content_value(self, item_id: int) -> np.ndarray:
        return self.content[self.row(item_id)]

    def x_value(self, item_id: int) -> np.ndarray:
        r = self.row(item_id)
        return np.concatenate([self.content[r], self.collab.data[r]])

    def x_values(self, item_ids) -> np.ndarray:
        rows = [self.row(i) for i in item_ids]
        return np.concatenate([self.content[rows], self.collab.data[rows]], axis=1)

    def x_tensor(self, item_id: int):
        """Graph-connected X_i; gradient reaches only this item's collab row."""
        r = self.row(item_id)
        return nn.concat_vec([
            nn.constant(self.content[r]),
            nn.take_row(self.collab, r),
        ])

    def item_representation(self, item_id: int) -> np.ndarray:
        """Current X_i as a plain array (fresh copy)."""
        return self.x_value(item_id)

    def parameters(self):
        return [self.collab]


class BehaviorHead:
    """attention_pool + 2-layer MLP with one sigmoid output per behavior.

    The output layer starts at zero so an untrained head predicts 0.5.
    """

    def __init__(self, x_dim: int, rng: np.random.Generator,
                 behaviors=DEFAULT_BEHAVIORS, hidden: int = 32):
        behaviors = tuple(behaviors)
        if not behaviors:
            raise InputError("need at least one behavior")
        self.behaviors = behaviors
        self.x_dim = x_dim
        d_in = 2 * x_dim
        self.no_history = nn.Parameter("csa.no_history",
                                       0.1 * rng.standard_normal(x_dim))
        self.w1 = nn.Parameter("csa.w1",
                               rng.standard_normal((d_in, hidden)) / np.sqrt(d_in))
        self.b1 = nn.Parameter("csa.b1", np.zeros(hidden))
        self.w2 = nn.Parameter("csa.w2", np.zeros((hidden, len(behaviors))))
        self.b2 = nn.Parameter("csa.b2", np.zeros(len(behaviors)))

    def parameters(self):
        return [self.no_history, self.w1, self.b1, self.w2, self.b2]

    def logits(self, store: ItemStore, history, target: int):
        """Per-behavior logits as a graph tensor [|B|]."""
        x_i = store.x_tensor(target)
        if history:
            keys = nn.constant(store.x_values(history))  # detached history
            pooled = nn.attention_pool(x_i, keys, keys)
        else:
            pooled = self.no_history
        h = nn.relu(nn.linear(nn.concat_vec([pooled, x_i]), self.w1, self.b1))
        return nn.linear(h, self.w2, self.b2)

    def predict_behaviors(self, store: ItemStore, history, target: int) -> dict:
        with nn.no_grad():
            logits = self.logits(store, history, target).data
        return {b: nn.sigmoid_value(logits[i]) for i, b in enumerate(self.behaviors)}

    def sample_loss(self, store: ItemStore, history, target: int, labels: dict):
        missing = [b for b in self.behaviors if b not in labels]
        if missing:
            raise InputError(f"event is missing labels for {missing}")
        logits = self.logits(store, history, target)
        terms = [nn.sigmoid_bce(nn.pick(logits, i), labels[b])
                 for i, b in enumerate(self.behaviors)]
        return nn.add_n(terms)

    def collaborative_loss(self, store: ItemStore, batch):
        """Sum of sigmoid_bce over behaviors and samples."""
        if not batch:
            raise InputError("collaborative_loss needs a non-empty batch")
        return nn.add_n([self.sample_loss(store, h, t, y) for h, t, y in batch])
