"""Dense linear algebra helpers.

Matrices are plain 2-D numpy arrays (row-major, float32 or float64). The SVD
here is a one-sided Jacobi routine; ``svd_oracle`` is an unrelated
eigen-decomposition path kept around purely to cross-check it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

ORACLE_MAX_DIM = 64
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x p
    sigma: np.ndarray  # p, non-increasing
    v: np.ndarray  # n x p

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; one owner per stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(m, dtype=None) -> np.ndarray:
    a = np.asarray(m, dtype=dtype)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def kaiming_uniform(rng: np.random.Generator, rows: int, cols: int, fan_in: int,
                    dtype=np.float64) -> np.ndarray:
    """Samples from the open interval (-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = 1.0 / np.sqrt(fan_in)
    out = rng.uniform(-bound, bound, size=(rows, cols))
    # uniform() is half-open; redraw the (astronomically rare) exact lower bound
    hit = out <= -bound
    while hit.any():
        out[hit] = rng.uniform(-bound, bound, size=int(hit.sum()))
        hit = out <= -bound
    out = out.astype(dtype, copy=False)
    if dtype == np.float32:
        # rounding to single precision can land on the bound
        b32 = np.float32(bound)
        np.clip(out, np.nextafter(-b32, np.float32(0)), np.nextafter(b32, np.float32(0)), out=out)
    return out


def _check_finite(m: np.ndarray) -> None:
    if m.size == 0:
        raise ShapeError("empty matrix")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains NaN or Inf")


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        ps, qs = [], []
        for i in range(k // 2):
            p, q = players[i], players[k - 1 - i]
            if p >= 0 and q >= 0:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns not in ``keep`` by an orthonormal completion.

    Each new column is the standard basis vector with the largest residual
    after projecting out the current basis (first index on ties), so the
    result is deterministic and the residual never vanishes.
    """
    m, p = u.shape
    out = u.copy()
    basis = out[:, keep]
    for j in np.flatnonzero(~keep):
        resid = np.eye(m)
        for _ in range(2):
            resid -= basis @ (basis.T @ resid)
        norms = np.einsum("ij,ij->j", resid, resid)
        cand = resid[:, int(np.argmax(norms))]
        cand = cand / np.linalg.norm(cand)
        out[:, j] = cand
        basis = np.column_stack([basis, cand])
    return out


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    idx = np.argmax(np.abs(u), axis=0)  # first index wins ties
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0


def _one_sided_jacobi(a: np.ndarray, max_sweeps: int = 80) -> SvdResult:
    m, n = a.shape  # m >= n
    g = a.astype(np.float64, copy=True)
    # power-of-two rescale keeps the Gram products in range and is exact
    peak = float(np.abs(g).max()) if g.size else 0.0
    scale = 2.0 ** -np.frexp(peak)[1] if peak > 0 else 1.0
    g *= scale
    v = np.eye(n)
    tol = np.sqrt(m) * _EPS
    # columns this small are roundoff; rotating them against each other never settles
    tiny = (_EPS * np.linalg.norm(g)) ** 2
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        rotated = 0
        for ps, qs in rounds:
            gp, gq = g[:, ps], g[:, qs]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > tiny)
            if not active.any():
                continue
            rotated += int(active.sum())
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            vp, vq = v[:, ps], v[:, qs]
            g[:, ps] = c * gp - s * gq
            g[:, qs] = s * gp + c * gq
            v[:, ps] = c * vp - s * vq
            v[:, qs] = s * vp + c * vq
        if rotated == 0:
            break
    else:
        raise NumericError("one-sided Jacobi did not converge")

    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]
    keep = sigma * sigma > tiny
    u = np.zeros_like(g)
    u[:, keep] = g[:, keep] / sigma[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
    _fix_signs(u, v)
    return SvdResult(u=u, sigma=sigma / scale, v=v)


def svd(m: np.ndarray) -> SvdResult:
    """Thin SVD, always computed in double precision.

    Singular values come back non-increasing; in every left singular vector
    the largest-magnitude entry is non-negative.
    """
    a = as_matrix(m)
    _check_finite(a)
    if a.shape[0] >= a.shape[1]:
        return _one_sided_jacobi(a)
    r = _one_sided_jacobi(a.T)
    # for the transpose, roles swap; redo the sign rule on the new left factor
    u, v = r.v.copy(), r.u.copy()
    _fix_signs(u, v)
    return SvdResult(u=u, sigma=r.sigma, v=v)


def _jacobi_eigh(s: np.ndarray, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided Jacobi eigen-decomposition of a symmetric matrix.

    Rotations on disjoint index pairs are applied together (their 2x2
    blocks do not interact), cycling pairs by the circle method.
    """
    a = np.array(s, dtype=np.float64)
    n = a.shape[0]
    vecs = np.eye(n)
    ring = list(range(n + n % 2))
    m = len(ring)
    schedule = []
    for _ in range(m - 1):
        pairs = [(ring[i], ring[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(x), max(x)) for x in pairs if max(x) < n]
        schedule.append((np.array([x[0] for x in pairs], dtype=np.intp),
                         np.array([x[1] for x in pairs], dtype=np.intp)))
        ring = ring[:1] + ring[-1:] + ring[1:-1]
    for _ in range(max_sweeps):
        rotated = 0
        for p, q in schedule:
            if p.size == 0:
                continue
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            live = (apq != 0.0) & (np.abs(apq) > _EPS * np.sqrt(np.abs(app * aqq)))
            if not live.any():
                continue
            rotated += int(live.sum())
            p, q = p[live], q[live]
            apq, app, aqq = apq[live], app[live], aqq[live]
            with np.errstate(over="ignore"):  # theta -> inf gives t = 0, the right limit
                theta = (aqq - app) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c
            col_p = a[:, p].copy()
            col_q = a[:, q]
            a[:, p] = c * col_p - sn * col_q
            a[:, q] = sn * col_p + c * col_q
            row_p = a[p, :].copy()
            row_q = a[q, :]
            a[p, :] = c[:, None] * row_p - sn[:, None] * row_q
            a[q, :] = sn[:, None] * row_p + c[:, None] * row_q
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp = vecs[:, p].copy()
            vq = vecs[:, q]
            vecs[:, p] = c * vp - sn * vq
            vecs[:, q] = sn * vp + c * vq
        if rotated == 0:
            break
    else:
        raise NumericError("Jacobi eigen-decomposition did not converge")
    return np.diag(a).copy(), vecs


def svd_oracle(m: np.ndarray) -> SvdResult:
    """Reference SVD from the eigen-decomposition of the smaller Gram matrix.

    Slow and loses relative accuracy on tiny singular values; only meant as
    an independent check for ``svd`` on matrices with min dimension <= 64.
    """
    a = as_matrix(m).astype(np.float64)
    _check_finite(a)
    rows, cols = a.shape
    if min(rows, cols) > ORACLE_MAX_DIM:
        raise ValueError(f"svd_oracle is capped at min dimension {ORACLE_MAX_DIM}")
    wide = rows < cols
    work = a.T if wide else a
    evals, evecs = _jacobi_eigh(work.T @ work)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    right = evecs[:, order]
    sigma = np.sqrt(evals)
    left = work @ right
    keep = sigma > 1e-7 * sigma[0] if sigma[0] > 0 else np.zeros_like(sigma, dtype=bool)
    left[:, keep] /= sigma[keep]
    # orthonormal completion via QR of [kept | identity]
    if not keep.all():
        q, _ = np.linalg.qr(np.hstack([left[:, keep], np.eye(left.shape[0])]))
        n_keep = int(keep.sum())
        fill = q[:, n_keep:n_keep + int((~keep).sum())]
        left[:, ~keep] = fill
    if wide:
        left, right = right, left
    idx = np.argmax(np.abs(left), axis=0)
    flip = left[idx, np.arange(left.shape[1])] < 0
    left[:, flip] *= -1.0
    right[:, flip] *= -1.0
    return SvdResult(u=left, sigma=sigma, v=right)


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-8) -> int:
    """Count of singular values strictly above ``rel_tol * sigma_1``."""
    s = svd(m).sigma
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
