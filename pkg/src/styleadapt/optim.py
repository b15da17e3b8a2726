"""Adaptive-moment updates over named tensor collections.

Kept free of torch.optim so the moment buffers serialize into checkpoints
exactly and updates stay value-semantic (inputs are never mutated).
"""

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, values):
        return cls(m={k: torch.zeros_like(t) for k, t in values.items()},
                   v={k: torch.zeros_like(t) for k, t in values.items()},
                   step=0)

    def to_arrays(self):
        """Flatten into named float32 arrays for checkpointing."""
        out = {}
        for name, t in self.m.items():
            out["m." + name] = t.detach().cpu().numpy()
        for name, t in self.v.items():
            out["v." + name] = t.detach().cpu().numpy()
        out["step"] = np.asarray(float(self.step), dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays):
        m = {}
        v = {}
        step = 0
        for name, arr in arrays.items():
            if name == "step":
                step = int(np.asarray(arr).item())
            elif name.startswith("m."):
                m[name[2:]] = torch.from_numpy(np.asarray(arr))
            elif name.startswith("v."):
                v[name[2:]] = torch.from_numpy(np.asarray(arr))
        return cls(m=m, v=v, step=step)


def adam_step(values, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns (new values, new state)."""
    t = state.step + 1
    new_m = {}
    new_v = {}
    new_values = {}
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, x in values.items():
        g = grads[name].detach()
        x = x.detach()
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_m[name] = m
        new_v[name] = v
        if lr == 0:
            new_values[name] = x.clone()
        else:
            new_values[name] = x - lr * (m / bias1) / (torch.sqrt(v / bias2) + eps)
    return new_values, AdamState(m=new_m, v=new_v, step=t)


def sgd_update(values, grads, lr):
    """Plain gradient step; returns new values."""
    if lr == 0:
        return {name: x.detach().clone() for name, x in values.items()}
    return {name: x.detach() - lr * grads[name].detach() for name, x in values.items()}
