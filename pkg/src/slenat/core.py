"""Shared parameters, Monte Carlo estimates and seeded random streams."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class SwallowedPointError(RuntimeError):
    """Raised when an observable is requested at a point the curve has cut off."""


class NotComputedError(RuntimeError):
    """Raised when a required Monte Carlo oracle value is missing."""


@dataclass(frozen=True)
class SleParams:
    """SLE parameter kappa and the exponents derived from it.

    ``a = 2/kappa`` is the Loewner speed, ``d = 1 + kappa/8`` the dimension of
    the curve and ``r = 2a`` the drift coefficient of the radial angle SDE.
    """

    kappa: float

    def __post_init__(self):
        k = float(self.kappa)
        if not math.isfinite(k) or not 0.0 < k < 8.0:
            raise ValueError(f"kappa must lie in (0, 8), got {self.kappa!r}")
        object.__setattr__(self, "kappa", k)

    @property
    def a(self) -> float:
        return 2.0 / self.kappa

    @property
    def d(self) -> float:
        return 1.0 + self.kappa / 8.0

    @property
    def r(self) -> float:
        return 2.0 * self.a

    @property
    def green_exponent(self) -> float:
        """Exponent ``d - 2`` of the conformal radius in the Green's function."""
        return self.d - 2.0

    @property
    def angle_exponent(self) -> float:
        """Exponent ``4a - 1`` of ``sin(arg z)`` in the Green's function."""
        return 4.0 * self.a - 1.0


@dataclass
class McEstimate:
    """Sample mean with its standard error.

    ``extra`` carries estimator-specific diagnostics (flag counts, the
    refinement check, ...).
    """

    mean: float
    stderr: float
    n: int
    seeds: tuple = ()
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples, seeds=(), **extra) -> "McEstimate":
        x = np.asarray(samples, dtype=float)
        n = x.size
        if n == 0:
            raise ValueError("no samples")
        se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        return cls(float(x.mean()), se, int(n), tuple(seeds), dict(extra))

    def zscore(self, value: float, other_se: float = 0.0) -> float:
        """Distance from ``value`` in units of the combined standard error."""
        se = math.hypot(self.stderr, other_se)
        if se == 0.0:
            return 0.0 if self.mean == value else math.inf
        return (self.mean - value) / se

    def __add__(self, other: "McEstimate") -> "McEstimate":
        return McEstimate(self.mean + other.mean, math.hypot(self.stderr, other.stderr),
                          min(self.n, other.n), self.seeds + other.seeds)

    def scaled(self, c: float) -> "McEstimate":
        return McEstimate(self.mean * c, self.stderr * abs(c), self.n, self.seeds, dict(self.extra))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n,
                "seeds": [int(s) for s in self.seeds]}


def combined_z(e1: McEstimate, e2: McEstimate) -> float:
    return e1.zscore(e2.mean, e2.stderr)


def path_rng(seed: int, index: int = 0, stream: int = 0) -> np.random.Generator:
    """Generator for one path, keyed by ``(seed, stream, index)``.

    The same key always yields the same stream regardless of how paths are
    batched.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


class PathStreams:
    """Per-path standard normal streams consumed at independent rates.

    Batched simulations with adaptive steps draw a different number of
    normals per path; buffering each path's own generator keeps path ``i``
    identical no matter which other paths share the batch.
    """

    def __init__(self, seed: int, indices, stream: int = 0, block: int = 256):
        self.seed = int(seed)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.block = int(block)
        self._gens = [path_rng(seed, int(i), stream) for i in self.indices]
        self._buf = np.empty((len(self._gens), self.block))
        for k, g in enumerate(self._gens):
            self._buf[k] = g.standard_normal(self.block)
        self._ptr = np.zeros(len(self._gens), dtype=np.int64)

    def __len__(self):
        return len(self._gens)

    def normals(self, rows: np.ndarray) -> np.ndarray:
        """One fresh normal for each row index in ``rows``."""
        rows = np.asarray(rows, dtype=np.int64)
        out = self._buf[rows, self._ptr[rows]]
        self._ptr[rows] += 1
        full = rows[self._ptr[rows] == self.block]
        for k in full:
            self._buf[k] = self._gens[k].standard_normal(self.block)
            self._ptr[k] = 0
        return out
