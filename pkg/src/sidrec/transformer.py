"""Decoder-only transformer stack shared by the two sequence models.

Pre-norm residual blocks:

    x = x + W_o . attn(LN1(x))
    x = x + W2 . relu(W1 . LN2(x) + b1) + b2

followed by a final layer norm.  Attention is causally masked, so row t
of the output depends only on rows 0..t of the input; both sequence
models rely on this for prefix reuse.
"""

from __future__ import annotations

import numpy as np

from . import neural as nn
from .errors import InputError


class TransformerStack:
    """A stack of causal pre-LN blocks over a [T, dim] sequence."""

    def __init__(self, name: str, n_blocks: int, dim: int, n_heads: int,
                 ff_dim: int, rng: np.random.Generator):
        if n_blocks < 1 or dim < 1 or ff_dim < 1:
            raise InputError("transformer sizes must be positive")
        if n_heads < 1 or dim % n_heads != 0:
            raise InputError(
                f"n_heads={n_heads} must divide dim={dim}")
        self.name = name
        self.n_blocks = n_blocks
        self.dim = dim
        self.n_heads = n_heads
        self.ff_dim = ff_dim

        def weight(nm, rows, cols, fan_in):
            data = rng.standard_normal((rows, cols)) / np.sqrt(fan_in)
            return nn.Parameter(f"{name}.{nm}", data)

        def bias(nm, n):
            return nn.Parameter(f"{name}.{nm}", np.zeros(n))

        self.blocks = []
        for b in range(n_blocks):
            p = f"block{b}"
            blk = {
                "ln1_g": nn.Parameter(f"{name}.{p}.ln1.g", np.ones(dim)),
                "ln1_b": bias(f"{p}.ln1.b", dim),
                "wq": weight(f"{p}.wq", dim, dim, dim),
                "bq": bias(f"{p}.bq", dim),
                # no key bias: softmax cancels a per-query constant shift,
                # so it would be a parameter with an exactly-zero gradient
                "wk": weight(f"{p}.wk", dim, dim, dim),
                "wv": weight(f"{p}.wv", dim, dim, dim),
                "bv": bias(f"{p}.bv", dim),
                # residual-branch outputs start small so the stack is
                # near-identity at init
                "wo": weight(f"{p}.wo", dim, dim, dim * 2 * n_blocks),
                "bo": bias(f"{p}.bo", dim),
                "ln2_g": nn.Parameter(f"{name}.{p}.ln2.g", np.ones(dim)),
                "ln2_b": bias(f"{p}.ln2.b", dim),
                "w1": weight(f"{p}.w1", dim, ff_dim, dim),
                "b1": bias(f"{p}.b1", ff_dim),
                "w2": weight(f"{p}.w2", ff_dim, dim, ff_dim * 2 * n_blocks),
                "b2": bias(f"{p}.b2", dim),
            }
            self.blocks.append(blk)
        self.ln_f_g = nn.Parameter(f"{name}.lnf.g", np.ones(dim))
        self.ln_f_b = nn.Parameter(f"{name}.lnf.b", np.zeros(dim))

    def parameters(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.values())
        out.extend([self.ln_f_g, self.ln_f_b])
        return out

    def forward(self, x: nn.Tensor) -> nn.Tensor:
        """x: [T, dim] -> [T, dim]."""
        for blk in self.blocks:
            h = nn.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            q = nn.linear(h, blk["wq"], blk["bq"])
            k = nn.matmul(h, blk["wk"])
            v = nn.linear(h, blk["wv"], blk["bv"])
            a = nn.causal_self_attention(q, k, v, self.n_heads)
            x = nn.add(x, nn.linear(a, blk["wo"], blk["bo"]))
            h2 = nn.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            ff = nn.linear(nn.relu(nn.linear(h2, blk["w1"], blk["b1"])),
                           blk["w2"], blk["b2"])
            x = nn.add(x, ff)
        return nn.layer_norm(x, self.ln_f_g, self.ln_f_b)
