"""Desk-scale Darcy flow data: coefficient fields, FD solver, dataset files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import PointSet

DATA_MAGIC = 0x44415243  # "DARC"
DATA_VERSION = 1
_HEADER = struct.Struct("<IIIIQ")

A_LOW, A_HIGH = 3.0, 12.0
CUTOFF = 8
SPECTRAL_DECAY = 2.0  # amplitude ~ (1 + |k|^2)^(-decay/2)


class SolverError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class DarcySample:
    n: int
    a: np.ndarray
    f: np.ndarray
    u: np.ndarray

    def grid_coords(self) -> np.ndarray:
        return grid_coords(self.n)


def grid_coords(n: int) -> np.ndarray:
    """Node coordinates (x, y) in row-major order; x varies along columns."""
    t = np.linspace(0.0, 1.0, n)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def sample_coefficient_field(n: int, rng_seed) -> np.ndarray:
    """Thresholded smooth Gaussian random field with values in {3, 12}."""
    if n < 8:
        raise ValueError(f"grid extent must be ≥ 8, got {n}")
    rng = np.random.default_rng(rng_seed)
    k = np.fft.fftfreq(n, d=1.0 / n)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    kk = np.sqrt(kx ** 2 + ky ** 2)
    amp = (1.0 + kk ** 2) ** (-SPECTRAL_DECAY / 2)
    amp[kk > CUTOFF] = 0.0
    amp[0, 0] = 0.0
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    field = np.real(np.fft.ifft2(amp * noise))
    return np.where(field > 0, A_HIGH, A_LOW)


def assemble_operator(a: np.ndarray) -> sp.csr_matrix:
    """Conservative 5-point operator on interior nodes, harmonic-mean face coefficients.

    Discretises −∇·(a∇u) with zero Dirichlet data on the boundary rows/columns.
    """
    n = a.shape[0]
    h = 1.0 / (n - 1)
    m = n - 2
    idx = np.arange(m * m).reshape(m, m)

    def face(p, q):
        return 2.0 * p * q / (p + q)

    ai = a[1:-1, 1:-1]
    east = face(ai, a[1:-1, 2:])
    west = face(ai, a[1:-1, :-2])
    north = face(ai, a[2:, 1:-1])
    south = face(ai, a[:-2, 1:-1])
    diag = (east + west + north + south) / h ** 2
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    for coef, di, dj in ((east, 0, 1), (west, 0, -1), (north, 1, 0), (south, -1, 0)):
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < m) & (nj >= 0) & (nj < m)
        rows.append(idx[ii[ok], jj[ok]])
        cols.append(idx[ni[ok], nj[ok]])
        vals.append(-coef[ok] / h ** 2)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * m, m * m))


def conjugate_gradient(A, b: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int, float]:
    """Jacobi-preconditioned CG until ‖Ax − b‖∞ / ‖b‖∞ < tol."""
    x = np.zeros_like(b)
    bnorm = np.abs(b).max()
    if bnorm == 0:
        return x, 0, 0.0
    inv_diag = 1.0 / A.diagonal()
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    rel = 1.0
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.abs(r).max() / bnorm
        if rel < tol:
            # confirm against the true residual, drifted recurrences can lie
            rel = np.abs(b - A @ x).max() / bnorm
            if rel < tol:
                return x, it, rel
            r = b - A @ x
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iter} iterations (relative residual {rel:.3e})")


def solve_darcy(a: np.ndarray, f: np.ndarray, n: int | None = None, tol: float = 1e-10,
                max_iter: int | None = None) -> np.ndarray:
    """Solve −∇·(a∇u) = f on the unit square with u = 0 on the boundary."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0] if n is None else n
    if a.shape != (n, n) or np.shape(f) != (n, n):
        raise ValueError("a and f must be n×n")
    if not (a > 0).all():
        raise ValueError("coefficient must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    A = assemble_operator(a)
    b = np.asarray(f, dtype=np.float64)[1:-1, 1:-1].ravel()
    max_iter = max_iter or 20 * (n - 2) ** 2 + 100
    x, _, _ = conjugate_gradient(A, b, tol, max_iter)
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = x.reshape(n - 2, n - 2)
    return u


def discrete_residual(a: np.ndarray, f: np.ndarray, u: np.ndarray) -> float:
    A = assemble_operator(a)
    b = f[1:-1, 1:-1].ravel()
    return float(np.abs(A @ u[1:-1, 1:-1].ravel() - b).max() / max(np.abs(b).max(), 1e-300))


def _sample_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(k)])


def make_sample(n: int, seed: int, k: int, tol: float = 1e-10) -> DarcySample:
    a = sample_coefficient_field(n, _sample_seed(seed, k))
    f = np.ones((n, n))
    u = solve_darcy(a, f, n, tol)
    return DarcySample(n=n, a=a, f=f, u=u)


def gen_dataset(count: int, n: int, seed: int, path=None, n_test: int = 0, tol: float = 1e-10) -> list[DarcySample]:
    """Generate ``count`` samples; optionally write them to ``path``.

    A JSON sidecar (``<path>.json``) records the generator settings and
    train/test split (the last ``n_test`` samples are the test split).
    """
    if count < 1:
        raise ValueError("count must be ≥ 1")
    samples = [make_sample(n, seed, k, tol) for k in range(count)]
    if path is not None:
        write_dataset(path, samples, seed, n_test=n_test)
    return samples


def write_dataset(path, samples: list[DarcySample], seed: int, n_test: int = 0) -> None:
    path = Path(path)
    n = samples[0].n
    parts = [_HEADER.pack(DATA_MAGIC, DATA_VERSION, len(samples), n, int(seed))]
    for s in samples:
        parts.append(np.ascontiguousarray(s.a, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.u, dtype="<f8").tobytes())
    try:
        path.write_bytes(b"".join(parts))
        meta = {
            "count": len(samples), "n": n, "seed": int(seed), "n_test": int(n_test),
            "n_train": len(samples) - int(n_test), "forcing": 1.0,
            "coefficient_values": [A_LOW, A_HIGH], "cutoff_wavenumber": CUTOFF,
            "spectral_decay": SPECTRAL_DECAY, "version": DATA_VERSION,
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise OSError(f"writing dataset {path}: {exc}") from exc


def load_dataset(path) -> tuple[list[DarcySample], dict]:
    """Read a dataset file; returns (samples, header dict incl. sidecar fields)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"reading dataset {path}: {exc}") from exc
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, count, n, seed = _HEADER.unpack_from(buf, 0)
    if magic != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic:#x}")
    if version != DATA_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    need = _HEADER.size + count * 2 * n * n * 8
    if len(buf) != need:
        raise DatasetFormatError(f"{path}: expected {need} bytes, found {len(buf)}")
    off = _HEADER.size
    samples = []
    for _ in range(count):
        a = np.frombuffer(buf, "<f8", n * n, off).reshape(n, n).astype(np.float64)
        off += n * n * 8
        u = np.frombuffer(buf, "<f8", n * n, off).reshape(n, n).astype(np.float64)
        off += n * n * 8
        samples.append(DarcySample(n=n, a=a, f=np.ones((n, n)), u=u))
    header = {"count": count, "n": n, "seed": seed, "version": version, "n_test": 0}
    side = Path(str(path) + ".json")
    if side.exists():
        header.update(json.loads(side.read_text()))
    return samples, header


def split_dataset(samples, header, n_test: int | None = None):
    k = header.get("n_test", 0) if n_test is None else n_test
    if k <= 0 or k >= len(samples):
        raise ValueError(f"cannot hold out {k} test samples from {len(samples)}")
    return samples[:-k], samples[-k:]


def bilinear(field: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a grid field (row = y, col = x) at points in [0,1]²."""
    n = field.shape[0]
    g = np.clip(np.asarray(pts, dtype=np.float64), 0.0, 1.0) * (n - 1)
    j0 = np.minimum(np.floor(g[:, 0]).astype(int), n - 2)
    i0 = np.minimum(np.floor(g[:, 1]).astype(int), n - 2)
    tx = g[:, 0] - j0
    ty = g[:, 1] - i0
    return ((1 - tx) * (1 - ty) * field[i0, j0] + tx * (1 - ty) * field[i0, j0 + 1]
            + (1 - tx) * ty * field[i0 + 1, j0] + tx * ty * field[i0 + 1, j0 + 1])


@dataclass
class Normalizer:
    """Per-channel z-scores for the coefficient (input) and solution (target)."""

    a_mean: float
    a_std: float
    u_mean: float
    u_std: float

    @classmethod
    def fit(cls, samples: list[DarcySample]) -> "Normalizer":
        a = np.concatenate([s.a.ravel() for s in samples])
        u = np.concatenate([s.u.ravel() for s in samples])
        return cls(float(a.mean()), float(a.std()) or 1.0, float(u.mean()), float(u.std()) or 1.0)

    def denorm_u(self, values: np.ndarray) -> np.ndarray:
        return values * self.u_std + self.u_mean

    def to_dict(self) -> dict:
        return dict(a_mean=self.a_mean, a_std=self.a_std, u_mean=self.u_mean, u_std=self.u_std)


def scatter_to_pointset(sample: DarcySample, mode: str = "full", m: int = 0, rng_seed=0,
                        norm: Normalizer | None = None) -> PointSet:
    """Turn a sample into nodes: ``full`` grid nodes or ``m`` scattered off-grid points.

    The static and initial dynamic channel is ``a``; the target is ``u``;
    both are z-scored with ``norm`` when given.
    """
    if mode == "full":
        coords = grid_coords(sample.n)
        a = sample.a.ravel()
        u = sample.u.ravel()
    elif mode == "scatter":
        if m < 1:
            raise ValueError("scatter mode needs m ≥ 1")
        coords = np.random.default_rng(rng_seed).uniform(0.0, 1.0, size=(m, 2))
        a = bilinear(sample.a, coords)
        u = bilinear(sample.u, coords)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if norm is not None:
        a = (a - norm.a_mean) / norm.a_std
        u = (u - norm.u_mean) / norm.u_std
    return PointSet(coords=coords, static_feats=a[:, None], dynamic_feats=a[:, None].copy(), targets=u[:, None])
