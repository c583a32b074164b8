"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


def decays(name: str) -> bool:
    """Only weight matrices decay; biases, LN params, embeddings and the class token do not."""
    return name.endswith(".weight")


@dataclass
class OptimState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.025
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], opt: OptimState, lr: float | None = None) -> None:
    """One AdamW update, in place.

    The decay ``p -= lr * wd * p`` is applied first, then the bias-corrected
    Adam step. ``lr`` overrides ``opt.lr`` for scheduled updates.
    """
    lr = opt.lr if lr is None else lr
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {', '.join(missing[:5])}"
                            + (" ..." if len(missing) > 5 else ""))
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, p in params.items():
        g = p.grad
        if opt.weight_decay and decays(name):
            p.data -= lr * opt.weight_decay * p.data
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
