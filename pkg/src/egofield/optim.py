from __future__ import annotations

from typing import Mapping

import numpy as np


class Adam:
    """Adam over a dict of named arrays, updated in place.

    Moments are per element, so rows can be appended or removed between
    steps with ``extend`` and ``select`` (densification).
    """

    def __init__(self, params: Mapping[str, np.ndarray], lrs: Mapping[str, float],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            lr = self.lrs.get(name, 0.0)
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def select(self, keep: np.ndarray) -> None:
        """Keep only the rows flagged in ``keep`` (pruning)."""
        for name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def extend(self, rows_from: np.ndarray) -> None:
        """Append rows with zeroed moments, one per entry of ``rows_from``."""
        n_new = len(rows_from)
        for name in self.m:
            shape = (n_new,) + self.m[name].shape[1:]
            self.m[name] = np.concatenate([self.m[name], np.zeros(shape)])
            self.v[name] = np.concatenate([self.v[name], np.zeros(shape)])


def exp_decay(lr_init: float, lr_final: float, step: int, total: int) -> float:
    if total <= 1 or lr_init == 0.0:
        return lr_init if step < total else lr_final
    t = min(max(step / (total - 1), 0.0), 1.0)
    return float(np.exp((1.0 - t) * np.log(lr_init) + t * np.log(max(lr_final, 1e-300))))
