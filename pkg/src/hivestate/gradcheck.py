"""Central finite-difference check of the CNN's analytic gradients.

Leaky ReLU and max pooling are only piecewise smooth. When a ±h probe moves
some pre-activation across zero, or changes which element wins a pool
window, the central difference averages two different slopes and disagrees
with the (correct) one-sided analytic gradient. For such entries the step is
shrunk until both probes stay on the base point's piece.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cnn import CnnModel, _forward, backward, loss

STEP = 1e-5
MIN_STEP = 1e-9


def _loss_and_pattern(model: CnnModel, x: np.ndarray, labels: np.ndarray):
    s, (conv, _, dense) = _forward(model, x)
    parts = []
    for _, _, z, arg, _ in conv:
        parts += [(z > 0).ravel(), arg.ravel()]
    for _, z in dense[:-1]:
        parts.append((z > 0).ravel())
    return float(loss(s, labels).mean()), np.concatenate([p.astype(np.int64) for p in parts])


@dataclass
class GradCheck:
    errors: dict[str, float] = field(default_factory=dict)  # per tensor
    checked: int = 0
    shrunk: int = 0  # entries that needed a step below STEP
    unresolved: int = 0  # entries still straddling a kink at MIN_STEP

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def numeric_gradient(model: CnnModel, x, labels, name: str, index: int,
                     step: float = STEP, min_step: float = MIN_STEP, base=None) -> tuple[float, float]:
    """Central difference for one parameter entry; returns (value, step used)."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if base is None:
        base = _loss_and_pattern(model, x, labels)[1]
    flat = model.params[name].reshape(-1)
    old = flat[index]
    h = step
    try:
        while True:
            flat[index] = old + h
            up, p_up = _loss_and_pattern(model, x, labels)
            flat[index] = old - h
            down, p_down = _loss_and_pattern(model, x, labels)
            smooth = np.array_equal(p_up, base) and np.array_equal(p_down, base)
            if smooth or h / 10 < min_step:
                return (up - down) / (2 * h), (h if smooth else -h)
            h /= 10
    finally:
        flat[index] = old


def check_gradients(model: CnnModel, x, labels, names=None, max_per_tensor: int | None = None,
                    rng: np.random.Generator | None = None, step: float = STEP) -> GradCheck:
    """Compare analytic and numeric gradients; error per tensor is
    ||a - n|| / max(||a|| + ||n||, 1e-12) over the checked entries."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _, grads = backward(model, x, labels)
    base = _loss_and_pattern(model, x, labels)[1]
    out = GradCheck()
    for name in names or list(model.params):
        size = model.params[name].size
        idx = np.arange(size)
        if max_per_tensor is not None and size > max_per_tensor:
            idx = np.sort((rng or np.random.default_rng(0)).choice(size, max_per_tensor, replace=False))
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            num[n], used = numeric_gradient(model, x, labels, name, int(i), step, base=base)
            out.shrunk += abs(used) < step
            out.unresolved += used < 0
        ana = grads[name].reshape(-1)[idx]
        out.errors[name] = float(np.linalg.norm(ana - num)
                                 / max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12))
        out.checked += len(idx)
    return out
