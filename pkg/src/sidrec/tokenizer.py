"""Item-to-token sequence model.

Maps an item representation to a distribution over semantic token ids,
one codebook level at a time.  The item vector enters only as the BOS
input (projected, treated as a constant), so training this model never
moves item representations; they are owned by the behavior model.

The reference twin is a second instance of the same architecture whose
job is to keep assigning the original token ids to drifting item
vectors; `kl_regularizer` then penalizes the live model for moving its
per-token probabilities away from the twin's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .errors import InputError
from .rqkmeans import CodebookSpec
from .transformer import TransformerStack

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass
class CandidateSet:
    """Beam output: SIDs sorted by total log-prob, best first.

    candidates: list of (sid tuple, total log-prob)
    per_token:  sid tuple -> tuple of per-level log-probs
    """
    candidates: list
    per_token: dict

    def sids(self):
        return [sid for sid, _ in self.candidates]


def _check_x(x_vec, x_dim):
    x = np.asarray(x_vec, dtype=np.float64)
    if x.shape != (x_dim,):
        raise InputError(f"item vector must have shape ({x_dim},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("item vector contains non-finite values")
    return x


class ItemTokenizer:
    """Causal model P(c_1..c_L | X_i) with per-level output heads."""

    def __init__(self, spec: CodebookSpec, x_dim: int, seed: int,
                 name: str = "tok", n_blocks: int = 1, dim: int = 32,
                 n_heads: int = 2, ff_dim: int = 64):
        spec.validate()
        if x_dim < 1:
            raise InputError("x_dim must be positive")
        self.spec = spec
        self.x_dim = x_dim
        self.dim = dim
        self.name = name
        rng = np.random.default_rng(seed)

        L, K = spec.levels, spec.codes_per_level
        self.bos_w = nn.Parameter(f"{name}.bos.w",
                                  rng.standard_normal((x_dim, dim)) / np.sqrt(x_dim))
        self.bos_b = nn.Parameter(f"{name}.bos.b", np.zeros(dim))
        # input embeddings for tokens fed back at positions 1..L-1.
        # Zero init: an untrained model's step distributions then do not
        # depend on the prefix, which makes small-width beam search exact
        # against exhaustive enumeration (trained models lose this).
        self.tok_emb = [
            nn.Parameter(f"{name}.emb{l}", np.zeros((K, dim)))
            for l in range(L - 1)
        ]
        self.pos_emb = nn.Parameter(f"{name}.pos",
                                    rng.standard_normal((L, dim)) / np.sqrt(dim))
        self.stack = TransformerStack(f"{name}.stack", n_blocks, dim,
                                      n_heads, ff_dim, rng)
        self.head_w = [
            nn.Parameter(f"{name}.head{l}.w",
                         rng.standard_normal((dim, K)) / np.sqrt(dim))
            for l in range(L)
        ]
        self.head_b = [nn.Parameter(f"{name}.head{l}.b", np.zeros(K))
                       for l in range(L)]

    def parameters(self):
        out = [self.bos_w, self.bos_b, *self.tok_emb, self.pos_emb]
        out.extend(self.stack.parameters())
        out.extend(self.head_w)
        out.extend(self.head_b)
        return out

    def copy_parameters_from(self, other: "ItemTokenizer"):
        """Copy parameter values by position (architectures must match)."""
        mine, theirs = self.parameters(), other.parameters()
        if len(mine) != len(theirs):
            raise InputError("tokenizer architectures differ")
        for p, q in zip(mine, theirs):
            if p.data.shape != q.data.shape:
                raise InputError(
                    f"shape mismatch {p.name}: {p.data.shape} vs {q.data.shape}")
            p.data[...] = q.data

    # -- forward ---------------------------------------------------------

    def _check_prefix(self, prefix):
        L, K = self.spec.levels, self.spec.codes_per_level
        if len(prefix) >= L:
            raise InputError(f"prefix length {len(prefix)} must be < {L}")
        for t in prefix:
            if not (0 <= int(t) < K):
                raise InputError(f"token {t} out of range [0, {K})")

    def _rows(self, x, prefix) -> nn.Tensor:
        """Input rows: BOS, fed-back tokens, then zero pads out to L.

        Always length L.  The causal mask keeps pad rows invisible to
        earlier positions, and the fixed shape keeps prefix scoring
        bit-identical to full-sequence teacher forcing (matmul kernels
        can round differently for different shapes).
        """
        L = self.spec.levels
        rows = [nn.reshape(nn.linear(nn.constant(x), self.bos_w, self.bos_b),
                           (1, self.dim))]
        for p, tok in enumerate(prefix):
            rows.append(nn.reshape(nn.take_row(self.tok_emb[p], int(tok)),
                                   (1, self.dim)))
        for _ in range(L - len(rows)):
            rows.append(nn.constant(np.zeros((1, self.dim))))
        seq = rows[0] if len(rows) == 1 else nn.concat_rows(rows)
        pos = nn.take_rows(self.pos_emb, list(range(L)))
        return nn.add(seq, pos)

    def _sid_logits(self, x, sid):
        """Logits tensors for every level, teacher-forcing the given sid."""
        h = self.stack.forward(self._rows(x, sid[:-1]))
        L = self.spec.levels
        out = []
        for l in range(L):
            row = nn.take_row(h, l)
            out.append(nn.linear(row, self.head_w[l], self.head_b[l]))
        return out

    def _check_sid(self, sid):
        L, K = self.spec.levels, self.spec.codes_per_level
        if len(sid) != L:
            raise InputError(f"sid length {len(sid)} != levels {L}")
        for t in sid:
            if not (0 <= int(t) < K):
                raise InputError(f"token {t} out of range [0, {K})")
        return tuple(int(t) for t in sid)

    # -- losses and scores -----------------------------------------------

    def ce_nodes(self, x_vec, sid):
        """Per-level cross-entropy graph nodes."""
        x = _check_x(x_vec, self.x_dim)
        sid = self._check_sid(sid)
        logits = self._sid_logits(x, sid)
        return [nn.softmax_cross_entropy(lg, sid[l])
                for l, lg in enumerate(logits)]

    def loss(self, x_vec, sid) -> nn.Tensor:
        """Sum of per-level cross-entropies (negative sid log-likelihood)."""
        return nn.add_n(self.ce_nodes(x_vec, sid))

    def sid_logprob(self, x_vec, sid) -> np.ndarray:
        """Per-level log P(c_l | prefix, X).  Sum equals -loss exactly."""
        x = _check_x(x_vec, self.x_dim)
        sid = self._check_sid(sid)
        with nn.no_grad():
            logits = self._sid_logits(x, sid)
            return np.array([nn.log_softmax_values(lg.data)[sid[l]]
                             for l, lg in enumerate(logits)])

    def step_logprobs(self, x_vec, prefix) -> np.ndarray:
        """Log-probs over the next level's K tokens given a prefix."""
        x = _check_x(x_vec, self.x_dim)
        self._check_prefix(prefix)
        with nn.no_grad():
            h = self.stack.forward(self._rows(x, prefix))
            row = nn.take_row(h, len(prefix))
            lg = nn.linear(row, self.head_w[len(prefix)],
                           self.head_b[len(prefix)])
            return nn.log_softmax_values(lg.data)

    # -- beam search -------------------------------------------------------

    def beam_candidates(self, x_vec, beam_width: int) -> CandidateSet:
        """Length-synchronous beam over token sequences.

        Keeps the top `beam_width` prefixes at every level, ranked by
        total log-prob with ties broken by lexicographically smaller
        token sequence.  A width of K^L or more reproduces exhaustive
        enumeration.
        """
        if int(beam_width) != beam_width or beam_width < 1:
            raise InputError(f"beam width must be a positive integer, got {beam_width}")
        x = _check_x(x_vec, self.x_dim)
        L, K = self.spec.levels, self.spec.codes_per_level
        width = min(int(beam_width), K ** L)

        beams = [((), 0.0, ())]  # (tokens, total logprob, per-token logprobs)
        for _level in range(L):
            grown = []
            for toks, total, per in beams:
                lps = self.step_logprobs(x, toks)
                for t in range(K):
                    lp = float(lps[t])
                    grown.append((toks + (t,), total + lp, per + (lp,)))
            grown.sort(key=lambda e: (-e[1], e[0]))
            beams = grown[:width]

        return CandidateSet(
            candidates=[(toks, total) for toks, total, _ in beams],
            per_token={toks: per for toks, total, per in beams},
        )


def reference_loss(ref: ItemTokenizer, x_vec, warmup_sid) -> nn.Tensor:
    """Cross-entropy of the frozen warm-up sid under the reference twin.

    Gradient flows into the twin's parameters only; this is what keeps
    the twin tracking drifting item vectors.
    """
    return ref.loss(x_vec, warmup_sid)


def kl_regularizer(live: ItemTokenizer, ref: ItemTokenizer,
                   x_vec, sid) -> nn.Tensor:
    """(1/L) sum over levels of (r - ln r - 1), r = P_ref(c_l) / P_live(c_l).

    Per-token probabilities are floored at PROB_FLOOR before the ratio.
    The twin's side is a constant: gradient reaches live parameters only.
    Each term is computed as expm1(d) - d with d = ln r, which is exactly
    zero when the two models hold identical parameters and is never
    negative in floating point.
    """
    if live.spec.levels != ref.spec.levels or \
            live.spec.codes_per_level != ref.spec.codes_per_level:
        raise InputError("live and reference tokenizers disagree on codebook shape")
    live_ces = live.ce_nodes(x_vec, sid)
    ref_lps = ref.sid_logprob(x_vec, sid)
    terms = []
    for l, ce in enumerate(live_ces):
        live_lp = nn.clip_min(nn.scale(ce, -1.0), _LOG_FLOOR)
        ref_lp = max(float(ref_lps[l]), _LOG_FLOOR)
        # d = ln r = ref_lp - live_lp
        d = nn.add_const(nn.scale(live_lp, -1.0), ref_lp)
        terms.append(nn.add(nn.expm1(d), nn.scale(d, -1.0)))
    return nn.scale(nn.add_n(terms), 1.0 / live.spec.levels)
