"""Spectral comparison of weight-update matrices.

phi(a, b, i, j) = ||U_a[:, :i]^T U_b[:, :j]||_F^2 / min(i, j) measures how
much the top-i left singular subspace of ``a`` overlaps the top-j subspace
of ``b``; it is 1 for nested subspaces and 0 for orthogonal ones.

Singular-value histograms bin -log10(sigma) with a separate bucket for
numerically-zero values (sigma <= 1e-8 * sigma_1).
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .numlin import as_matrix, svd

ZERO_REL_TOL = 1e-8
HIST_BINS = 40
HIST_RANGE = (-2.0, 8.0)


@dataclass
class SimilarityGrid:
    values: np.ndarray  # values[i-1, j-1] = phi(a, b, i, j)
    labels: tuple = ("a", "b", "")

    @property
    def max_rank(self) -> int:
        return self.values.shape[0]

    def phi(self, i: int, j: int) -> float:
        return float(self.values[i - 1, j - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("i,j,phi\n")
        n, m = self.values.shape
        for i in range(n):
            for j in range(m):
                buf.write(f"{i + 1},{j + 1},{self.values[i, j]:.12g}\n")
        return buf.getvalue()


@dataclass
class SpectrumHistogram:
    edges: np.ndarray  # bins + 1 edges over -log10(sigma)
    counts: np.ndarray  # (bins,) for "mean", (layers, bins) for "per-layer"
    zero_count: np.ndarray | float
    aggregation: str = "mean"
    n_matrices: int = 1

    def total(self) -> float:
        return float(np.sum(self.counts) + np.sum(self.zero_count))

    def to_csv(self, layer: int | None = None) -> str:
        counts, zero = self.counts, self.zero_count
        if self.aggregation == "per-layer":
            if layer is None:
                raise ValueError("per-layer histogram: choose a layer")
            counts, zero = counts[layer], zero[layer]
        buf = io.StringIO()
        buf.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], counts):
            buf.write(f"{lo:.12g},{hi:.12g},{_num(c)}\n")
        buf.write(f"zero_count,,{_num(zero)}\n")
        return buf.getvalue()


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else f"{x:.12g}"


def _left_vectors(m: np.ndarray, side: str) -> np.ndarray:
    r = svd(m)
    if side == "left":
        return r.u
    if side == "right":
        return r.v
    raise ValueError("side must be 'left' or 'right'")


def _check_rank(k: int, m: np.ndarray, which: str) -> None:
    if k < 1 or k > min(m.shape):
        raise ValueError(f"{which}={k} outside [1, {min(m.shape)}] for a {m.shape[0]}x{m.shape[1]} matrix")


def subspace_similarity(dw_a, dw_b, i: int, j: int, side: str = "left") -> float:
    a, b = as_matrix(dw_a, np.float64), as_matrix(dw_b, np.float64)
    _check_rank(i, a, "i")
    _check_rank(j, b, "j")
    ua, ub = _left_vectors(a, side), _left_vectors(b, side)
    if ua.shape[0] != ub.shape[0]:
        raise ShapeError("singular vectors live in spaces of different dimension")
    overlap = ua[:, :i].T @ ub[:, :j]
    return float(np.sum(overlap * overlap) / min(i, j))


def similarity_grid(dw_a, dw_b, max_rank: int = 30, side: str = "left", labels=("a", "b", "")) -> SimilarityGrid:
    """phi over i, j in [1, max_rank], from a single SVD of each matrix."""
    a, b = as_matrix(dw_a, np.float64), as_matrix(dw_b, np.float64)
    _check_rank(max_rank, a, "max_rank")
    _check_rank(max_rank, b, "max_rank")
    ua, ub = _left_vectors(a, side), _left_vectors(b, side)
    if ua.shape[0] != ub.shape[0]:
        raise ShapeError("singular vectors live in spaces of different dimension")
    sq = (ua[:, :max_rank].T @ ub[:, :max_rank]) ** 2
    cum = sq.cumsum(axis=0).cumsum(axis=1)
    k = np.arange(1, max_rank + 1)
    return SimilarityGrid(cum / np.minimum.outer(k, k), tuple(labels))


def spectrum_counts(dw, bins: int = HIST_BINS, value_range=HIST_RANGE):
    """(counts, zero_count, edges) for one matrix.

    Values outside ``value_range`` are clamped into the end bins so every
    singular value is accounted for.
    """
    s = svd(as_matrix(dw, np.float64)).sigma
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    if s[0] == 0.0:
        return np.zeros(bins, dtype=np.int64), len(s), edges
    nonzero = s[s > ZERO_REL_TOL * s[0]]
    v = np.clip(-np.log10(nonzero), value_range[0], value_range[1])
    counts, _ = np.histogram(v, bins=edges)
    return counts, len(s) - len(nonzero), edges


def sv_histogram(dw_list, bins: int = HIST_BINS, agg: str = "mean", value_range=HIST_RANGE) -> SpectrumHistogram:
    """Histogram of -log10(sigma) for the same module across layers."""
    mats = [as_matrix(m, np.float64) for m in dw_list]
    if not mats:
        raise ValueError("empty matrix list")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("all matrices must share one shape")
    if agg not in ("mean", "per-layer"):
        raise ValueError("agg must be 'mean' or 'per-layer'")
    per = [spectrum_counts(m, bins, value_range) for m in mats]
    counts = np.stack([c for c, _, _ in per])
    zeros = np.array([z for _, z, _ in per])
    edges = per[0][2]
    if agg == "mean":
        return SpectrumHistogram(edges, counts.mean(axis=0), float(zeros.mean()), "mean", len(mats))
    return SpectrumHistogram(edges, counts, zeros, "per-layer", len(mats))


def pairwise_sublora_grid(sub_deltas, max_rank: int | None = None) -> dict[tuple[int, int], SimilarityGrid]:
    """Similarity grid for every ordered pair of MultiLoRA sub-updates.

    ``sub_deltas`` is either a MultiLoRA adapter or its list of per-module
    updates (A_i @ B_i) * scaling_i.
    """
    if hasattr(sub_deltas, "scaling_list"):
        adapter = sub_deltas
        dead = [i for i, s in enumerate(adapter.scaling_list) if not np.any(s.data)]
        if dead:
            raise DegenerateInputError(f"sub-module(s) {dead} have an all-zero scaling vector")
        from .adapters import sublora_deltas

        deltas = sublora_deltas(adapter)
        default_rank = adapter.rank
    else:
        deltas = [as_matrix(d, np.float64) for d in sub_deltas]
        dead = [i for i, d in enumerate(deltas) if not np.any(d)]
        if dead:
            raise DegenerateInputError(f"sub-module(s) {dead} have an all-zero update")
        default_rank = min(deltas[0].shape)
    if len(deltas) < 2:
        raise ValueError("need at least two sub-modules to compare")
    k = default_rank if max_rank is None else max_rank
    return {
        (i, j): similarity_grid(deltas[i], deltas[j], k, labels=(f"sub{i}", f"sub{j}", ""))
        for i in range(len(deltas))
        for j in range(len(deltas))
    }


def grid_mean(grid: SimilarityGrid) -> float:
    return float(np.mean(grid.values))


def spectrum_summary(dw) -> dict:
    """Scalars used for the qualitative comparisons in the repro report."""
    s = svd(as_matrix(dw, np.float64)).sigma
    if s[0] == 0.0:
        return {"numerical_rank": 0, "top1_energy": 0.0, "effective_rank": 0.0}
    nz = s[s > ZERO_REL_TOL * s[0]]
    energy = nz ** 2 / np.sum(nz ** 2)
    entropy = -np.sum(energy * np.log(energy))
    return {
        "numerical_rank": int(len(nz)),
        "top1_energy": float(energy[0]),
        "effective_rank": float(np.exp(entropy)),
    }
