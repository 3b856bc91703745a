"""Block change-of-basis matrices (DCT, Hadamard) used as fixed 1x1 layers.

A block of ``M x N`` pixels is flattened row-major into a vector ``f`` of
length ``MN`` (same convention as :func:`diffwm.tensorcore.space_to_depth`)
and transformed as ``f_T = D @ f``. ``D`` uses a plain ``1/(MN)`` DCT scale
without per-frequency normalisation, so it is not orthogonal and its inverse
is obtained numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import ShapeError

MAX_CONDITION = 1e12
RESIDUAL_TOL = 1e-9


class SingularTransformError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    name: str
    m: int
    n: int
    forward: np.ndarray  # D, (n_T, MN)
    inverse: np.ndarray  # D^-1, (MN, n_T)

    @property
    def n_t(self) -> int:
        return self.forward.shape[0]


def invert_transform(d: np.ndarray) -> np.ndarray:
    """Invert a square transform matrix, refusing ill-conditioned input."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"transform matrix must be square, got {d.shape}")
    cond = np.linalg.cond(d)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularTransformError(f"transform matrix is ill-conditioned (cond={cond:.3g})")
    # LU with partial pivoting
    inv = np.linalg.solve(d, np.eye(d.shape[0]))
    resid = np.abs(d @ inv - np.eye(d.shape[0])).max()
    if resid >= RESIDUAL_TOL:
        raise SingularTransformError(f"inversion residual {resid:.3g} exceeds {RESIDUAL_TOL}")
    return inv


def build_dct_matrix(m: int = 8, n: int = 8) -> TransformSpec:
    """DCT basis with a ``1/(MN)`` scale.

    ``D[theta, k] = cos((2r+1) u pi / 2M) cos((2c+1) v pi / 2N) / (MN)`` where
    ``k = r*N + c`` indexes the pixel and ``theta = u*N + v`` the frequency.
    """
    if m < 1 or n < 1:
        raise ValueError("block dimensions must be positive")
    k = np.arange(m * n)
    r, c = k // n, k % n
    u, v = r, c  # frequencies share the pixel index layout
    d = (np.cos((2 * r[None, :] + 1) * u[:, None] * np.pi / (2 * m))
         * np.cos((2 * c[None, :] + 1) * v[:, None] * np.pi / (2 * n))) / (m * n)
    return TransformSpec("dct", m, n, d, invert_transform(d))


def hadamard(n: int) -> np.ndarray:
    """Sylvester-ordered ``n x n`` Hadamard matrix (entries +-1)."""
    if n < 1 or n & (n - 1):
        raise ValueError(f"Hadamard size must be a power of two, got {n}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def build_hadamard_matrix(n: int = 8) -> TransformSpec:
    """Matrix form of ``f_T = H f H`` for square ``n x n`` blocks."""
    h = hadamard(n)
    k = np.arange(n * n)
    r, c = k // n, k % n
    # f_T[u, v] = sum_{r, c} H[u, r] f[r, c] H[c, v]
    d = h[r[:, None], r[None, :]] * h[c[None, :], c[:, None]]
    return TransformSpec("hadamard", n, n, d, invert_transform(d))


def build_transform(name: str, m: int = 8, n: int = 8) -> TransformSpec:
    if name == "dct":
        return build_dct_matrix(m, n)
    if name == "hadamard":
        if m != n:
            raise ValueError("Hadamard transform needs square blocks")
        return build_hadamard_matrix(n)
    raise ValueError(f"unknown transform {name!r}")


def apply_transform(t: np.ndarray, spec: TransformSpec, direction: str = "forward") -> np.ndarray:
    """Mix channels at every spatial position by ``D`` or ``D^-1``.

    ``t`` is ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    if direction == "forward":
        mat = spec.forward
    elif direction == "inverse":
        mat = spec.inverse
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return channel_mix(t, mat)


def channel_mix(t: np.ndarray, mat: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim not in (3, 4) or t.shape[-3] != mat.shape[1]:
        raise ShapeError(f"tensor {t.shape} does not have {mat.shape[1]} channels")
    h, w = t.shape[-2:]
    flat = t.reshape(*t.shape[:-3], mat.shape[1], h * w)
    out = np.matmul(mat.astype(t.dtype, copy=False), flat)
    return out.reshape(*t.shape[:-3], mat.shape[0], h, w)
