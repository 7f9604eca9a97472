"""Dense linear algebra, seeded Gaussian sampling and log-log regression.

Matrices and vectors are plain float64 numpy arrays. Randomness comes from
numpy's PCG64 bit generator keyed by ``SeedSequence(seed, spawn_key=(stream,))``
so a ``(seed, stream)`` pair always reproduces the same sample sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


@dataclass(frozen=True)
class RngState:
    """A seed plus a stream counter; each pair names an independent stream."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "RngState":
        # fold extra keys into the stream so children never collide with the parent
        stream = self.stream
        for k in keys:
            stream = (stream * 1_000_003 + int(k) + 1) % (1 << 63)
        return RngState(self.seed, stream)


def _as_generator(rng: RngState | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, RngState):
        return rng.generator()
    return rng


def gaussian_matrix(rows: int, cols: int, sigma: float,
                    rng: RngState | np.random.Generator) -> np.ndarray:
    """I.i.d. N(0, sigma^2) entries, drawn as ``sigma * standard_normal``.

    Passing an ``RngState`` starts a fresh stream; passing a ``Generator``
    continues it.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    z = _as_generator(rng).standard_normal((rows, cols), dtype=DTYPE)
    if sigma == 0:
        return np.zeros((rows, cols), dtype=DTYPE)
    return sigma * z


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return m @ v


def matmat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def transpose_matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return m.T @ v


def outer_product(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.outer(u, v)


def dot(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v))


def euclidean_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v))


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    slope_stderr: float
    n_points: int

    def __str__(self) -> str:
        return f"{self.slope:+.4f} ± {self.slope_stderr:.4f} (n={self.n_points})"


def loglog_fit(points) -> ScalingFit:
    """Ordinary least squares of log(value) on log(width), natural logs.

    ``points`` is an iterable of ``(width, value)`` pairs; repeated widths are
    allowed and each pair counts as one observation.
    """
    pts = [(float(w), float(v)) for w, v in points]
    if len({w for w, _ in pts}) < 2:
        raise ValueError("insufficient points")
    if any(not (v > 0) for _, v in pts):
        raise ValueError("nonpositive value")
    x = np.log(np.array([w for w, _ in pts]))
    y = np.log(np.array([v for _, v in pts]))
    m = len(pts)
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    slope = float(dx @ (y - ym)) / sxx
    intercept = ym - slope * xm
    if m > 2:
        resid = y - (intercept + slope * x)
        s2 = float(resid @ resid) / (m - 2)
        stderr = math.sqrt(s2 / sxx)
    else:
        stderr = 0.0
    return ScalingFit(slope, float(intercept), stderr, m)
