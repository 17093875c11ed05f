"""Dense and Krylov eigensolvers for real and complex symmetric matrices.

Every routine returns a :class:`Spectrum` whose eigenvalues are sorted by
descending real part.  Real symmetric input always yields spectra with
exactly zero imaginary parts.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DefectiveMatrix, LanczosBreakdown, NonConvergence, ValidationError

SYMMETRY_RTOL = 1e-10
DEFECTIVE_CONDITION = 1e8
TIE_TOL = 1e-12
MAX_LANCZOS_RESTARTS = 3


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    orientation_reference: Optional[np.ndarray] = None
    near_defective: bool = False
    condition: float = 1.0
    dim: int = field(default=0)

    def __post_init__(self):
        if self.dim == 0:
            object.__setattr__(self, "dim", self.eigenvectors.shape[0])

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def is_partial(self) -> bool:
        return self.k < self.dim

    @property
    def is_real(self) -> bool:
        return not (np.any(self.eigenvalues.imag) or np.any(self.eigenvectors.imag))

    @property
    def top(self) -> complex:
        return complex(self.eigenvalues[0])

    def reconstruct(self) -> np.ndarray:
        """Return U diag(lambda) U^-1 (U^T in the orthonormal real case)."""
        U = self.eigenvectors
        if self.is_real:
            return (U.real * self.eigenvalues.real) @ U.real.T
        return (U * self.eigenvalues) @ np.linalg.inv(U)


def _check_square(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] == 0:
        raise ValidationError(f"expected a non-empty square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError("matrix has non-finite entries")
    return M


def check_symmetric(M: np.ndarray, rtol: float = SYMMETRY_RTOL) -> None:
    scale = np.max(np.abs(M))
    asym = np.max(np.abs(M - M.T))
    if asym > rtol * max(scale, np.finfo(float).tiny):
        raise ValidationError(
            f"matrix is not symmetric: max|M - M^T| = {asym:.3e} exceeds {rtol:g} * {scale:.3e}"
        )


def descending_order(values: np.ndarray) -> np.ndarray:
    """Indices sorting ``values`` by descending real part.

    Real parts closer than ``TIE_TOL`` tie; ties break by descending
    imaginary part and then by original index.
    """
    values = np.asarray(values, dtype=complex)

    def cmp(i, j):
        a, b = values[i], values[j]
        if abs(a.real - b.real) >= TIE_TOL:
            return -1 if a.real > b.real else 1
        if abs(a.imag - b.imag) >= TIE_TOL:
            return -1 if a.imag > b.imag else 1
        return -1 if i < j else (1 if i > j else 0)

    return np.array(sorted(range(len(values)), key=functools.cmp_to_key(cmp)), dtype=int)


def sym_eigh(H: np.ndarray, orientation_reference: Optional[np.ndarray] = None) -> Spectrum:
    """Full spectrum of a real symmetric matrix (LAPACK ``syevd``)."""
    H = _check_square(H)
    if np.iscomplexobj(H):
        if np.any(H.imag):
            raise ValidationError("sym_eigh requires a real matrix; use complex_eig")
        H = H.real
    H = np.asarray(H, dtype=float)
    check_symmetric(H)
    try:
        w, V = np.linalg.eigh(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise NonConvergence(f"eigh failed to converge on a {H.shape[0]}x{H.shape[0]} matrix") from exc
    order = descending_order(w)
    spec = Spectrum(
        eigenvalues=w[order].astype(complex),
        eigenvectors=V[:, order].astype(complex),
    )
    if orientation_reference is not None:
        spec = orient_spectrum(spec, orientation_reference)
    return spec


def _bilinear_normalize(V: np.ndarray) -> np.ndarray:
    # complex symmetric matrices have u_i^T u_j = 0 for distinct eigenvalues,
    # so scaling each column to u^T u = 1 makes V^-1 = V^T
    out = V.copy()
    for i in range(V.shape[1]):
        u = V[:, i]
        q = u @ u
        if abs(q) > 1e-8 * np.vdot(u, u).real:
            out[:, i] = u / np.sqrt(q)
        else:
            out[:, i] = u / np.linalg.norm(u)
    return out


def complex_eig(
    H: np.ndarray,
    orientation_reference: Optional[np.ndarray] = None,
    strict: bool = False,
) -> Spectrum:
    """Right eigenpairs of a complex symmetric (not Hermitian) matrix.

    Columns are scaled so that ``u^T u = 1`` where possible.  When the
    eigenvector matrix has condition number above ``DEFECTIVE_CONDITION``
    the result carries ``near_defective=True``; with ``strict=True`` a
    :class:`DefectiveMatrix` is raised instead.
    """
    H = _check_square(H)
    if not np.iscomplexobj(H) or not np.any(H.imag):
        return sym_eigh(np.real(H), orientation_reference)
    H = np.asarray(H, dtype=complex)
    check_symmetric(H)
    try:
        w, V = np.linalg.eig(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise NonConvergence(f"eig failed to converge on a {H.shape[0]}x{H.shape[0]} matrix") from exc
    order = descending_order(w)
    w, V = w[order], _bilinear_normalize(V[:, order])
    cond = float(np.linalg.cond(V))
    near_defective = not np.isfinite(cond) or cond > DEFECTIVE_CONDITION
    if near_defective and strict:
        raise DefectiveMatrix(
            f"eigenvector matrix condition {cond:.3e} exceeds {DEFECTIVE_CONDITION:g}", condition=cond
        )
    spec = Spectrum(eigenvalues=w, eigenvectors=V, near_defective=near_defective, condition=cond)
    if orientation_reference is not None:
        spec = orient_spectrum(spec, orientation_reference)
    return spec


def orient_spectrum(s: Spectrum, g: np.ndarray) -> Spectrum:
    """Flip eigenvector signs so that ``Re[g^T u_i] >= 0`` for every column.

    When ``g^T u_i`` has (numerically) zero real part the column is
    oriented so its first nonzero entry has positive real part.
    """
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        raise ValidationError("orientation reference must be finite")
    U = s.eigenvectors.copy()
    dots = g @ U
    gnorm = np.linalg.norm(g)
    for i in range(U.shape[1]):
        u = U[:, i]
        tol = 1e-12 * gnorm * np.linalg.norm(u)
        r = dots[i].real
        if abs(r) > tol:
            flip = r < 0
        else:
            nz = np.flatnonzero(np.abs(u) > 1e-12 * np.linalg.norm(u))
            lead = u[nz[0]] if len(nz) else 1.0
            flip = (lead.real < 0) or (lead.real == 0 and lead.imag < 0)
        if flip:
            U[:, i] = -u
    return replace(s, eigenvectors=U, orientation_reference=g.copy())


def lanczos_topk(
    hvp: Callable[[np.ndarray], np.ndarray],
    D: int,
    k: int,
    iters: Optional[int] = None,
    seed: int = 0,
    tol: float = 1e-10,
) -> Spectrum:
    """Top-``k`` eigenpairs of a symmetric operator by Lanczos iteration.

    Uses full reorthogonalisation.  ``iters`` (default ``min(D, 4k + 20)``)
    is the initial Krylov dimension; if the residual bound of any wanted
    Ritz pair is still above ``tol * ||T||`` the iteration is extended, up
    to ``D`` vectors.  A breakdown restarts from a fresh seeded vector
    orthogonal to the current basis, at most three times.
    """
    if not (1 <= k <= D):
        raise ValidationError(f"need 1 <= k <= D, got k={k}, D={D}")
    if iters is None:
        iters = min(D, 4 * k + 20)
    if not (k <= iters <= D):
        raise ValidationError(f"need k <= iters <= D, got k={k}, iters={iters}, D={D}")

    rng = np.random.default_rng(seed)
    Q = np.zeros((D, D))
    alpha = np.zeros(D)
    beta = np.zeros(D)
    restarts = 0

    def fresh(j):
        nonlocal restarts
        while True:
            v = rng.standard_normal(D)
            if j:
                v -= Q[:, :j] @ (Q[:, :j].T @ v)
                v -= Q[:, :j] @ (Q[:, :j].T @ v)
            n = np.linalg.norm(v)
            if n > 1e-8:
                return v / n
            restarts += 1
            if restarts > MAX_LANCZOS_RESTARTS:
                raise LanczosBreakdown(f"Lanczos broke down {restarts} times (D={D}, step {j})")

    Q[:, 0] = fresh(0)
    target = iters
    j = 0
    while True:
        w = np.asarray(hvp(Q[:, j]), dtype=float)
        alpha[j] = Q[:, j] @ w
        w = w - alpha[j] * Q[:, j] - (beta[j - 1] * Q[:, j - 1] if j else 0.0)
        w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        b = np.linalg.norm(w)
        m = j + 1
        if m >= target:
            T = np.diag(alpha[:m]) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
            theta, Y = np.linalg.eigh(T)
            order = np.argsort(theta)[::-1][:k]
            scale = max(np.max(np.abs(theta)), 1e-300)
            resid = b * np.abs(Y[-1, order])
            if m == D or np.all(resid <= tol * scale):
                break
            target = min(D, m + max(k, 10))
        scale_w = max(np.abs(alpha[: j + 1]).max(), 1e-300)
        if b <= 1e-10 * scale_w:
            beta[j] = 0.0
            restarts += 1
            if restarts > MAX_LANCZOS_RESTARTS:
                if m < k:
                    raise LanczosBreakdown(f"Lanczos broke down {restarts} times (D={D}, step {m})")
                # the basis spans a union of invariant subspaces, so its Ritz pairs are exact
                T = np.diag(alpha[:m]) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
                theta, Y = np.linalg.eigh(T)
                order = np.argsort(theta)[::-1][:k]
                break
            Q[:, m] = fresh(m)
        else:
            beta[j] = b
            Q[:, m] = w / b
        j = m

    vals = theta[order]
    vecs = Q[:, :m] @ Y[:, order]
    vecs /= np.linalg.norm(vecs, axis=0)
    return Spectrum(eigenvalues=vals.astype(complex), eigenvectors=vecs.astype(complex), dim=D)
