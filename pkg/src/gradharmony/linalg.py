"""Vector primitives and the flatten/reshape machinery for parameter gradients.

A flat gradient is a 1-D float64 ``numpy`` array. Its layout is described by a
:class:`ShapeManifest`, an ordered list of ``(name, dims)`` records.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .errors import DimensionError, ManifestError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ShapeManifest:
    entries: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ManifestError(f"duplicate tensor names in manifest: {names}")
        for name, dims in self.entries:
            if any(int(d) <= 0 for d in dims):
                raise ManifestError(f"tensor {name!r} has nonpositive dims {dims}")
        if self.size == 0:
            raise ManifestError("manifest describes zero elements")

    @classmethod
    def from_pairs(cls, pairs) -> "ShapeManifest":
        return cls(tuple((str(n), tuple(int(d) for d in dims)) for n, dims in pairs))

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    @property
    def size(self) -> int:
        return sum(int(np.prod(dims, dtype=np.int64)) for _, dims in self.entries)

    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, dims in self.entries:
            n = int(np.prod(dims, dtype=np.int64))
            out[name] = slice(start, start + n)
            start += n
        return out

    def dims_of(self, name: str) -> tuple[int, ...]:
        for n, dims in self.entries:
            if n == name:
                return dims
        raise KeyError(name)


class Cosine(NamedTuple):
    value: float
    degenerate: bool


def _as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        v = v.ravel()
    return v


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 1:
        raise DimensionError("vectors must have at least one entry")


def dot(a, b) -> float:
    a, b = _as_vector(a), _as_vector(b)
    _check_pair(a, b)
    return float(a @ b)


def norm(a) -> float:
    return float(np.linalg.norm(_as_vector(a)))


def cosine_similarity(a, b, eps: float = NORM_EPS) -> Cosine:
    """Cosine of the angle between ``a`` and ``b``.

    If either norm falls below ``eps`` the result is ``Cosine(0.0, True)``:
    a vanishing gradient carries no direction, so callers treat the pair as
    non-conflicting.
    """
    a, b = _as_vector(a), _as_vector(b)
    _check_pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        return Cosine(0.0, True)
    c = float((a @ b) / (na * nb))
    return Cosine(min(1.0, max(-1.0, c)), False)


def flatten(grads: Mapping[str, np.ndarray], manifest: ShapeManifest) -> np.ndarray:
    """Concatenate named tensors in manifest order."""
    if not grads:
        raise ManifestError("cannot flatten an empty tensor collection")
    expected = set(manifest.names)
    got = set(grads)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ManifestError(f"tensor names do not match manifest (missing={missing}, extra={extra})")
    parts = []
    for name, dims in manifest.entries:
        t = np.asarray(grads[name], dtype=np.float64)
        if t.shape != tuple(dims):
            raise ManifestError(f"tensor {name!r} has shape {t.shape}, manifest says {tuple(dims)}")
        parts.append(t.ravel())
    return np.concatenate(parts)


def reshape(flat, manifest: ShapeManifest) -> dict[str, np.ndarray]:
    """Inverse of :func:`flatten`. Returned arrays are copies."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.size != manifest.size:
        raise ManifestError(f"flat vector has {flat.size} entries, manifest needs {manifest.size}")
    out = {}
    for name, sl in manifest.offsets().items():
        out[name] = flat[sl].reshape(manifest.dims_of(name)).copy()
    return out
