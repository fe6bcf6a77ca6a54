"""Binary soft-margin SVM with an RBF kernel, trained by SMO."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

FULL_GRAM_LIMIT = 4096
_HEADER = struct.Struct("<4sIIIdd")
MAGIC = b"HSVM"
VERSION = 1


@dataclass(frozen=True)
class SvmConfig:
    c: float = 1.0
    gamma: float | None = None  # None -> 1 / n_features
    tol: float = 1e-3
    max_passes: int = 10
    max_sweeps: int = 10_000

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray  # (n_sv, d)
    alphas: np.ndarray  # signed alpha_i * y_i
    bias: float
    gamma: float

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]


def rbf_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a ** 2).sum(1)[:, None] + (b ** 2).sum(1)[None, :] - 2 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(dim: int) -> float:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return 1.0 / dim


class _Kernel:
    """Gram matrix access: precomputed when small, row-wise on demand otherwise."""

    def __init__(self, x: np.ndarray, gamma: float):
        self.x = x
        self.gamma = gamma
        self.full = rbf_matrix(x, x, gamma) if len(x) <= FULL_GRAM_LIMIT else None
        self._rows: dict[int, np.ndarray] = {}

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        r = self._rows.get(i)
        if r is None:
            if len(self._rows) > 512:
                self._rows.clear()
            r = rbf_matrix(self.x[i:i + 1], self.x, self.gamma)[0]
            self._rows[i] = r
        return r


def dual_objective(alpha: np.ndarray, y: np.ndarray, gram: np.ndarray) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ gram @ ay)


def train(x: Sequence, y: Sequence, cfg: SvmConfig = SvmConfig(), seed: int = 0,
          return_alpha: bool = False):
    """Solve the soft-margin dual with Platt's SMO.

    The second multiplier is chosen by the max |E_i - E_j| heuristic; when that
    makes no progress, the remaining candidates are tried from a seeded random
    starting point.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, d) with one label per row")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("labels must be -1 or +1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("training data must contain both classes")

    n, d = x.shape
    gamma = cfg.gamma if cfg.gamma is not None else default_gamma(d)
    c, tol = cfg.c, cfg.tol
    rng = np.random.default_rng(seed)
    kern = _Kernel(x, gamma)
    alpha = np.zeros(n)
    b = 0.0
    err = -y.copy()  # f(x_i) - y_i with f == 0

    def take_step(i: int, j: int) -> bool:
        nonlocal b
        if i == j:
            return False
        ai, aj = alpha[i], alpha[j]
        yi, yj = y[i], y[j]
        if yi != yj:
            lo, hi = max(0.0, aj - ai), min(c, c + aj - ai)
        else:
            lo, hi = max(0.0, ai + aj - c), min(c, ai + aj)
        if hi - lo < 1e-12:
            return False
        ki, kj = kern.row(i), kern.row(j)
        eta = 2.0 * ki[j] - 2.0  # K_ii = K_jj = 1 for the RBF kernel
        if eta >= 0:
            return False
        aj_new = np.clip(aj - yj * (err[i] - err[j]) / eta, lo, hi)
        if abs(aj_new - aj) < 1e-8 * (aj_new + aj + 1e-8):
            return False
        ai_new = min(max(ai + yi * yj * (aj - aj_new), 0.0), c)
        dai, daj = ai_new - ai, aj_new - aj
        b1 = b - err[i] - yi * dai - yj * daj * ki[j]
        b2 = b - err[j] - yi * dai * ki[j] - yj * daj
        if 0 < ai_new < c:
            b_new = b1
        elif 0 < aj_new < c:
            b_new = b2
        else:
            b_new = 0.5 * (b1 + b2)
        err[:] += yi * dai * ki + yj * daj * kj + (b_new - b)
        alpha[i], alpha[j] = ai_new, aj_new
        b = b_new
        return True

    def examine(i: int) -> bool:
        r = err[i] * y[i]
        if not ((r < -tol and alpha[i] < c) or (r > tol and alpha[i] > 0)):
            return False
        j = int(np.argmax(np.abs(err[i] - err)))
        if take_step(i, j):
            return True
        start = int(rng.integers(n))
        for k in range(n):
            if take_step(i, (start + k) % n):
                return True
        return False

    passes = 0
    sweeps = 0
    while passes < cfg.max_passes and sweeps < cfg.max_sweeps:
        changed = sum(examine(i) for i in range(n))
        passes = passes + 1 if changed == 0 else 0
        sweeps += 1

    keep = alpha > 0
    model = SvmModel(x[keep].copy(), (alpha * y)[keep], float(b), float(gamma))
    if return_alpha:
        return model, alpha
    return model


def decision_scores(model: SvmModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ValueError(f"expected {model.dim} features, got {x.shape[1]}")
    if len(model.alphas) == 0:
        return np.full(len(x), model.bias)
    return rbf_matrix(x, model.support_vectors, model.gamma) @ model.alphas + model.bias


def decision_score(model: SvmModel, x) -> float:
    return float(decision_scores(model, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def save_model(path, model: SvmModel) -> None:
    n, d = model.support_vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, model.gamma, model.bias))
        rows = np.column_stack([model.alphas, model.support_vectors]) if n else np.zeros((0, d + 1))
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def load_model(path) -> SvmModel:
    with open(path, "rb") as fh:
        magic, version, n, d, gamma, bias = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC or version != VERSION:
            raise ValueError(f"{path}: not an SVM model file (v{VERSION})")
        rows = np.frombuffer(fh.read(), dtype="<f8").reshape(n, d + 1)
    return SvmModel(rows[:, 1:].copy(), rows[:, 0].copy(), bias, gamma)
