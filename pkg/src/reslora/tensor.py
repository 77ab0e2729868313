"""Dense float64 matrices and a seeded random source.

A ``Matrix`` is a 2-D ``numpy.ndarray`` of dtype float64. Everything else in
the package passes these around; the helpers here enforce the shape rules and
give the few reductions the rest of the code needs.

Random numbers come from :class:`SeededRng`, which is numpy's PCG64 bit
generator seeded through ``SeedSequence(seed)``. Normal draws use numpy's
ziggurat ``standard_normal``. For a fixed numpy release the draw sequence is
identical across runs and platforms.
"""
from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Raised when matrix shapes are incompatible."""


def as_matrix(values) -> Matrix:
    """Coerce nested sequences / scalars / arrays into a 2-D float64 array."""
    m = np.array(values, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim} dimensions")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"matrix dimensions must be positive, got {m.shape}")
    return m


def frozen(m: Matrix) -> Matrix:
    """Read-only copy of ``m``."""
    out = np.array(m, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def frobenius_norm(m: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def max_abs_diff(a: Matrix, b: Matrix) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b)))


def column_norms(m: Matrix) -> np.ndarray:
    """Euclidean norm of every column (one per batch example)."""
    return np.sqrt(np.sum(np.square(m), axis=0))


class SeededRng:
    """Single-owner deterministic random source.

    ``stream`` selects an independent child sequence of the same seed, so
    e.g. adapter initialisation and batch sampling never share draws.
    """

    def __init__(self, seed: int, stream: int | None = None):
        self.seed = int(seed)
        self.stream = stream
        if stream is None:
            ss = np.random.SeedSequence(self.seed)
        else:
            ss = np.random.SeedSequence(self.seed, spawn_key=(int(stream),))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, rows: int, cols: int, std: float = 1.0) -> Matrix:
        return gaussian_fill(self, rows, cols, std)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def gaussian_fill(rng: SeededRng, rows: int, cols: int, std: float) -> Matrix:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return std * rng.standard_normal((rows, cols))
