"""Crank-Nicolson solver for the contour degradation equation

    du/dt = div(alpha grad u) - beta u     on the image,
    grad u . n = 0                         on its border,

used to turn clean contour masks into low-integrity probability maps.

The spatial operator is a 5-point finite-difference stencil with
face-averaged diffusion coefficients; border faces carry no flux, which is
what a mirrored ghost cell gives.  With ``conservative=False`` the
coefficient multiplies the plain Laplacian instead (``alpha * lap u``), which
is the literal non-divergence form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .perturb import DegradeConfig, gen_fields, slice_rng
from .raster import DEFAULT_SPACING, BinaryMask, DimensionMismatchError, Field2D

DEFAULT_TOL = 1e-10
DEFAULT_MAXITER = 2000


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""


def _neumann_laplacian(alpha: np.ndarray, spacing: float, conservative: bool) -> sp.csr_matrix:
    h, w = alpha.shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    a = alpha.ravel()
    inv_h2 = 1.0 / (spacing * spacing)

    # interior faces only: border faces are zero-flux
    p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    if conservative:
        c = 0.5 * (a[p] + a[q]) * inv_h2
        rows = np.concatenate([p, q, p, q])
        cols = np.concatenate([q, p, p, q])
        vals = np.concatenate([c, c, -c, -c])
    else:
        rows = np.concatenate([p, q, p, q])
        cols = np.concatenate([q, p, p, q])
        vals = np.concatenate([a[p], a[q], -a[p], -a[q]]) * inv_h2
    lap = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    lap.sum_duplicates()
    return lap


@dataclass
class PdeSystem:
    """Implicit/explicit Crank-Nicolson operators for one time step."""

    implicit: sp.csr_matrix
    explicit: sp.csr_matrix
    shape: Tuple[int, int]
    spacing: float
    dt: float
    symmetric: bool = True
    tol: float = DEFAULT_TOL
    maxiter: int = DEFAULT_MAXITER
    _inv_diag: Optional[np.ndarray] = field(default=None, repr=False)
    diagonal: bool = False
    _lu: Optional[object] = field(default=None, repr=False)


def build_system(
    alpha: Field2D,
    beta: Field2D,
    dt: float,
    conservative: bool = True,
    tol: float = DEFAULT_TOL,
    maxiter: int = DEFAULT_MAXITER,
) -> PdeSystem:
    if alpha.shape != beta.shape:
        raise DimensionMismatchError(f"alpha {alpha.shape} and beta {beta.shape} differ")
    if not math.isclose(alpha.spacing, beta.spacing):
        raise DimensionMismatchError(f"alpha spacing {alpha.spacing} != beta spacing {beta.spacing}")
    if alpha.values.min() < 0 or beta.values.min() < 0:
        raise ValueError("alpha and beta must be non-negative")
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")

    n = alpha.values.size
    lap = _neumann_laplacian(alpha.values, alpha.spacing, conservative)
    # M = -lap + diag(beta) is positive semi-definite in the conservative form
    m = (-lap + sp.diags(beta.values.ravel())).tocsr()
    eye = sp.identity(n, format="csr")
    implicit = (eye + (0.5 * dt) * m).tocsr()
    explicit = (eye - (0.5 * dt) * m).tocsr()
    implicit.eliminate_zeros()
    explicit.eliminate_zeros()
    system = PdeSystem(implicit, explicit, alpha.shape, alpha.spacing, dt, conservative, tol, maxiter)
    system._inv_diag = 1.0 / implicit.diagonal()
    system.diagonal = bool(
        implicit.nnz == n
        and np.array_equal(implicit.indptr, np.arange(n + 1))
        and np.array_equal(implicit.indices, np.arange(n))
    )
    return system


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    # numpy's pairwise sum keeps a fixed reduction order, unlike threaded BLAS
    return float(np.sum(a * b))


def pcg(A, b: np.ndarray, x0: np.ndarray, inv_diag: np.ndarray, tol: float, maxiter: int) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradient for SPD ``A``.

    Stops once ``||b - A x|| <= tol * ||b||``.
    """
    bnorm = math.sqrt(_dot(b, b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = x0.copy()
    r = b - A @ x
    z = inv_diag * r
    d = z.copy()
    rz = _dot(r, z)
    for _ in range(maxiter + 1):
        if math.sqrt(_dot(r, r)) <= tol * bnorm:
            return x
        Ad = A @ d
        step = rz / _dot(d, Ad)
        x += step * d
        r -= step * Ad
        z = inv_diag * r
        rz_new = _dot(r, z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise SolverError(f"CG did not reach relative residual {tol} in {maxiter} iterations")


def _solve(system: PdeSystem, rhs: np.ndarray, guess: np.ndarray) -> np.ndarray:
    A = system.implicit
    if system.diagonal:
        # purely diagonal operator (alpha == 0): CG converges in one step
        return rhs * system._inv_diag
    if system.symmetric:
        return pcg(A, rhs, guess, system._inv_diag, system.tol, system.maxiter)
    if system._lu is None:
        system._lu = spla.splu(A.tocsc())
    return system._lu.solve(rhs)


def step(u: Field2D, system: PdeSystem) -> Field2D:
    """Advance ``u`` by one Crank-Nicolson step (no clamping)."""
    if u.shape != system.shape:
        raise DimensionMismatchError(f"field {u.shape} does not match system {system.shape}")
    x = u.values.ravel()
    nxt = _solve(system, system.explicit @ x, x)
    return Field2D(nxt.reshape(system.shape), u.spacing)


def _step_schedule(T: float, dt: float):
    n_full = int(math.floor(T / dt + 1e-9))
    rem = T - n_full * dt
    if rem > 1e-9 * T:
        return n_full, rem
    return n_full, 0.0


def degrade(
    u0: Field2D,
    alpha: Field2D,
    beta: Field2D,
    T: float,
    dt: float,
    clamp: bool = True,
    conservative: bool = True,
    tol: float = DEFAULT_TOL,
) -> Field2D:
    """Integrate from ``u0`` up to time ``T``.

    ``ceil(T / dt)`` steps are taken; when ``T`` is not a multiple of ``dt``
    the last step is shortened to land exactly on ``T``.  With ``clamp`` the
    result is clipped to [0, 1] and tagged as a probability map.
    """
    if u0.shape != alpha.shape:
        raise DimensionMismatchError(f"u0 {u0.shape} and alpha {alpha.shape} differ")
    if not 0 < dt <= T:
        raise ValueError(f"need 0 < dt <= T, got dt={dt}, T={T}")
    n_full, rem = _step_schedule(T, dt)
    u = u0
    if n_full:
        system = build_system(alpha, beta, dt, conservative, tol)
        for _ in range(n_full):
            u = step(u, system)
    if rem:
        u = step(u, build_system(alpha, beta, rem, conservative, tol))
    if clamp:
        return Field2D(np.clip(u.values, 0.0, 1.0), u0.spacing, "probability")
    return u


def simulate_training_pair(
    gt_mask: BinaryMask,
    config: DegradeConfig,
    slice_index: int = 0,
    rep: int = 0,
    spacing: float = DEFAULT_SPACING,
) -> Tuple[Field2D, BinaryMask]:
    """Degraded probability map and its clean target for one corpus entry."""
    rng = slice_rng(config.seed, slice_index, rep)
    alpha, beta = gen_fields(config, rng, gt_mask.shape, spacing)
    u0 = Field2D.from_mask(gt_mask, spacing)
    degraded = degrade(u0, alpha, beta, config.T, config.dt, conservative=config.conservative)
    return degraded, gt_mask
