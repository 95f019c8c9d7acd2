"""Parameter store and Adam updates for the prediction network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamStore:
    """Named trainable tensors plus per-parameter Adam moments.

    The step count is shared across all parameters of one optimizer instance
    (bias correction uses a single global step).
    """

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def names(self) -> list[str]:
        return list(self.params)

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another float precision (moments reset)."""
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, p.data.astype(dtype))
        return out


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, no weight decay.

    ``grads`` must be keyed identically to the store; a missing gradient is an
    error rather than a silent skip.
    """
    missing = set(store.params) - set(grads)
    if missing:
        raise KeyError(f"missing gradients for parameters: {sorted(missing)}")
    store.step_count += 1
    b1, b2 = betas
    t = store.step_count
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm
