"""User-to-token sequence model.

Predicts the next item's token sequence from interaction history.  Each
history item is encoded as one sequence row: the sum of its L token
embeddings (the item's current top-weight alias in the index) plus a
learned position.  A learned BOS row precedes the history, and during
teacher forcing the target's tokens are fed back after it.

All forwards run at a fixed padded length for a given history size, so
prefix scoring during constrained decoding is bit-identical to the full
teacher-forced pass (matmul kernels round differently across shapes).
Output heads initialize to zero: a fresh model is exactly uniform over
every level, which also pins down tie-breaking behavior.
"""

from __future__ import annotations

import numpy as np

from . import neural as nn
from .errors import InputError
from .rqkmeans import CodebookSpec
from .transformer import TransformerStack

N_MAX_DEFAULT = 50


def truncate_history(items, n_max):
    """Keep the most recent n_max items (input is oldest first)."""
    items = list(items)
    return items[-n_max:] if len(items) > n_max else items


class Recommender:
    """Causal model P(c_1..c_L | H_u) over semantic token sequences."""

    def __init__(self, spec: CodebookSpec, seed: int, name: str = "rec",
                 n_blocks: int = 2, dim: int = 64, n_heads: int = 2,
                 ff_dim: int = 128, n_max: int = N_MAX_DEFAULT):
        spec.validate()
        if n_max < 1:
            raise InputError("n_max must be positive")
        self.spec = spec
        self.dim = dim
        self.n_max = n_max
        self.name = name
        rng = np.random.default_rng(seed)

        L, K = spec.levels, spec.codes_per_level
        self.bos = nn.Parameter(f"{name}.bos",
                                rng.standard_normal(dim) / np.sqrt(dim))
        # one table per level, shared between history encoding and
        # teacher-forced target feeding
        self.tok_emb = [
            nn.Parameter(f"{name}.emb{l}",
                         rng.standard_normal((K, dim)) / np.sqrt(dim))
            for l in range(L)
        ]
        n_pos = 1 + n_max + (L - 1)
        self.pos_emb = nn.Parameter(f"{name}.pos",
                                    rng.standard_normal((n_pos, dim)) / np.sqrt(dim))
        self.stack = TransformerStack(f"{name}.stack", n_blocks, dim,
                                      n_heads, ff_dim, rng)
        # zero heads: fresh model is uniform at every step
        self.head_w = [nn.Parameter(f"{name}.head{l}.w", np.zeros((dim, K)))
                       for l in range(L)]
        self.head_b = [nn.Parameter(f"{name}.head{l}.b", np.zeros(K))
                       for l in range(L)]

    def parameters(self):
        out = [self.bos, *self.tok_emb, self.pos_emb]
        out.extend(self.stack.parameters())
        out.extend(self.head_w)
        out.extend(self.head_b)
        return out

    # -- input handling ----------------------------------------------------

    def _check_sid(self, sid):
        L, K = self.spec.levels, self.spec.codes_per_level
        if len(sid) != L:
            raise InputError(f"sid length {len(sid)} != levels {L}")
        for t in sid:
            if not (0 <= int(t) < K):
                raise InputError(f"token {t} out of range [0, {K})")
        return tuple(int(t) for t in sid)

    def resolve_history(self, history, index) -> np.ndarray:
        """Map history items to their top-weight SIDs; [n, L] token array.

        Items are oldest first; lists longer than n_max keep the most
        recent n_max.  An item without any index link is rejected.
        """
        items = truncate_history(history, self.n_max)
        L = self.spec.levels
        tokens = np.zeros((len(items), L), dtype=np.int64)
        for row, item in enumerate(items):
            sid = index.top_sid(item)
            if sid is None:
                raise InputError(f"history item {item} has no SID in the index")
            tokens[row] = self._check_sid(sid)
        return tokens

    # -- forward -------------------------------------------------------------

    def _rows(self, hist_tokens: np.ndarray, prefix) -> nn.Tensor:
        """[1 + n + (L-1), dim] input rows: BOS, history, fed tokens, pads."""
        L = self.spec.levels
        n = hist_tokens.shape[0]
        rows = [nn.reshape(self.bos, (1, self.dim))]
        if n:
            summed = nn.take_rows(self.tok_emb[0], hist_tokens[:, 0].tolist())
            for l in range(1, L):
                summed = nn.add(summed, nn.take_rows(self.tok_emb[l],
                                                     hist_tokens[:, l].tolist()))
            rows.append(summed)
        for p, tok in enumerate(prefix):
            rows.append(nn.reshape(nn.take_row(self.tok_emb[p], int(tok)),
                                   (1, self.dim)))
        for _ in range(L - 1 - len(prefix)):
            rows.append(nn.constant(np.zeros((1, self.dim))))
        seq = rows[0] if len(rows) == 1 else nn.concat_rows(rows)
        pos = nn.take_rows(self.pos_emb, list(range(n + L)))
        return nn.add(seq, pos)

    def _sid_logits(self, hist_tokens, sid):
        """Teacher-forced logits tensors, one per level."""
        n = hist_tokens.shape[0]
        h = self.stack.forward(self._rows(hist_tokens, sid[:-1]))
        return [nn.linear(nn.take_row(h, n + l), self.head_w[l], self.head_b[l])
                for l in range(self.spec.levels)]

    # -- scoring and losses ----------------------------------------------------

    def next_sid_logprob(self, history, sid, index) -> np.ndarray:
        """Per-level log P(c_l | c_<l, H_u).  Sum equals -loss exactly."""
        sid = self._check_sid(sid)
        tokens = self.resolve_history(history, index)
        with nn.no_grad():
            logits = self._sid_logits(tokens, sid)
            return np.array([nn.log_softmax_values(lg.data)[sid[l]]
                             for l, lg in enumerate(logits)])

    def recommender_loss(self, history, sid, index) -> nn.Tensor:
        """Sum of per-level cross-entropies; gradients reach this model only."""
        sid = self._check_sid(sid)
        tokens = self.resolve_history(history, index)
        logits = self._sid_logits(tokens, sid)
        return nn.add_n([nn.softmax_cross_entropy(lg, sid[l])
                         for l, lg in enumerate(logits)])

    def step_logprobs(self, hist_tokens: np.ndarray, prefix) -> np.ndarray:
        """Log-probs for the next level given already-resolved history."""
        L = self.spec.levels
        if len(prefix) >= L:
            raise InputError(f"prefix length {len(prefix)} must be < {L}")
        n = hist_tokens.shape[0]
        with nn.no_grad():
            h = self.stack.forward(self._rows(hist_tokens, prefix))
            lg = nn.linear(nn.take_row(h, n + len(prefix)),
                           self.head_w[len(prefix)], self.head_b[len(prefix)])
            return nn.log_softmax_values(lg.data)

    def score_candidates(self, hist_tokens, sids):
        """Per-level CE losses for each candidate sid, no gradients.

        One teacher-forced forward per candidate; sids come back
        validated, paired with their loss lists.
        """
        out = []
        for raw in sids:
            sid = self._check_sid(raw)
            with nn.no_grad():
                logits = self._sid_logits(hist_tokens, sid)
                ces = [-float(nn.log_softmax_values(lg.data)[sid[l]])
                       for l, lg in enumerate(logits)]
            out.append((sid, ces))
        return out

    def min_loss_select(self, history, candidates, index):
        """Pick the candidate with the smallest mean per-token CE.

        Ties go to the lexicographically smallest sid; the result is
        independent of candidate order.  Returns (sid, mean_ce).
        """
        sids = candidates.sids() if hasattr(candidates, "sids") else list(candidates)
        if not sids:
            raise InputError("candidate set is empty")
        L = self.spec.levels
        tokens = self.resolve_history(history, index)
        best = None
        for sid, ces in self.score_candidates(tokens, sids):
            total = 0.0
            for ce in ces:
                total += ce
            key = (total / L, sid)
            if best is None or key < best:
                best = key
        return best[1], best[0]

    # -- constrained decoding ---------------------------------------------------

    def decode_topk(self, history, beam_width: int, k: int, index):
        """Top-k distinct items by beam search over the index's SID trie.

        Every emitted SID exists in the index; items reachable through
        several aliases keep their best-scoring one.  Fewer than k
        reachable items yields a shorter list.  Width at least the
        number of indexed SIDs reproduces exhaustive scoring.
        """
        if beam_width < 1:
            raise InputError(f"beam width must be >= 1, got {beam_width}")
        if k < 1:
            raise InputError(f"k must be >= 1, got {k}")
        all_sids = [self._check_sid(s) for s in index.all_sids()]
        if not all_sids:
            raise InputError("index holds no SIDs to decode against")
        children = {}
        for sid in all_sids:
            for d in range(self.spec.levels):
                children.setdefault(sid[:d], set()).add(sid[d])

        tokens = self.resolve_history(history, index)
        beams = [((), 0.0)]
        for _level in range(self.spec.levels):
            grown = []
            for prefix, total in beams:
                lps = self.step_logprobs(tokens, prefix)
                for t in sorted(children[prefix]):
                    grown.append((prefix + (t,), total + float(lps[t])))
            grown.sort(key=lambda e: (-e[1], e[0]))
            beams = grown[:beam_width]

        ranked, seen = [], set()
        for sid, _total in beams:
            item = index.reverse_lookup(sid)[0]
            if item not in seen:
                seen.add(item)
                ranked.append(item)
            if len(ranked) == k:
                break
        return ranked
