"""AdamW with decoupled weight decay.

One instance per model component; components never share parameters,
which is what keeps the loss terms' gradients isolated from each other.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import InputError
from .tensor import Parameter

log = logging.getLogger(__name__)


class AdamW:
    def __init__(self, params, lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise InputError("optimizer needs at least one parameter")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise InputError("duplicate parameter names in one optimizer")
        if lr <= 0:
            raise InputError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self.rejected_steps = 0
        for p in self.params:
            p.state.setdefault("m", np.zeros_like(p.data))
            p.state.setdefault("v", np.zeros_like(p.data))

    def step(self) -> bool:
        """Apply one update.  Returns False (and changes nothing) if any
        gradient is non-finite; gradients are zeroed either way."""
        for p in self.params:
            if not np.isfinite(p.grad).all():
                self.rejected_steps += 1
                log.warning("step rejected: non-finite gradient on %s", p.name)
                self.zero_grad()
                return False
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            m, v = p.state["m"], p.state["v"]
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.zero_grad()
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict:
        """Flat view of moments for checkpointing."""
        out = {}
        for p in self.params:
            out[p.name + ".m"] = p.state["m"]
            out[p.name + ".v"] = p.state["v"]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for p in self.params:
            for key in ("m", "v"):
                src = arrays.get(f"{p.name}.{key}")
                if src is None:
                    raise InputError(f"missing optimizer state for {p.name}.{key}")
                if src.shape != p.data.shape:
                    raise InputError(f"optimizer state shape mismatch for {p.name}")
                p.state[key] = src.astype(np.float64).copy()
        self.step_count = int(step_count)
