import numpy as np
import pytest

from multilora.adapters import MultiLoraAdapter, attach_multilora, sublora_deltas
from multilora.autodiff import Param
from multilora.errors import DegenerateInputError
from multilora.numlin import make_rng, svd_oracle
from multilora.spectral import (SimilarityGrid, pairwise_sublora_grid, similarity_grid, spectrum_summary,
                                subspace_similarity, sv_histogram)


def oracle_phi(a, b, i, j):
    ua, ub = svd_oracle(a).u, svd_oracle(b).u
    return np.linalg.norm(ua[:, :i].T @ ub[:, :j]) ** 2 / min(i, j)


def test_self_similarity_is_one(rng):
    m = rng.normal(size=(12, 9))
    for i in range(1, 10):
        assert subspace_similarity(m, m, i, i) == pytest.approx(1.0, abs=1e-9)


def test_orthogonal_directions():
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[0, 0] = 1.0
    b[1, 1] = 1.0
    assert subspace_similarity(a, b, 1, 1) == 0.0


def test_random_pair_matches_oracle(rng):
    a, b = rng.normal(size=(10, 8)), rng.normal(size=(10, 6))
    assert subspace_similarity(a, b, 3, 5) == pytest.approx(oracle_phi(a, b, 3, 5), abs=1e-8)


def test_rank_arguments(rng):
    m = rng.normal(size=(5, 4))
    with pytest.raises(ValueError):
        subspace_similarity(m, m, 5, 1)
    with pytest.raises(ValueError):
        subspace_similarity(m, m, 1, 0)
    with pytest.raises(ValueError):
        similarity_grid(m, m, max_rank=30)


def test_grid_matches_pointwise(rng):
    a, b = rng.normal(size=(10, 8)), rng.normal(size=(10, 7))
    g = similarity_grid(a, b, 6)
    assert g.values.shape == (6, 6)
    for i in (1, 3, 6):
        for j in (2, 6):
            assert g.phi(i, j) == pytest.approx(subspace_similarity(a, b, i, j), abs=1e-12)


def test_grid_properties(rng):
    a, b = rng.normal(size=(40, 35)), rng.normal(size=(40, 32))
    g = similarity_grid(a, a)
    np.testing.assert_allclose(np.diag(g.values), 1.0, atol=1e-9)
    ab, ba = similarity_grid(a, b), similarity_grid(b, a)
    assert np.all(ab.values >= -1e-9) and np.all(ab.values <= 1 + 1e-9)
    np.testing.assert_allclose(np.diag(ab.values), np.diag(ba.values), atol=1e-10)
    np.testing.assert_allclose(ab.values, ba.values.T, atol=1e-10)


def test_right_vectors_flag(rng):
    a = rng.normal(size=(6, 9))
    left = similarity_grid(a, a.copy(), 3)
    right = similarity_grid(a, a.copy(), 3, side="right")
    np.testing.assert_allclose(np.diag(right.values), 1.0, atol=1e-9)
    assert left.values.shape == right.values.shape
    with pytest.raises(ValueError):
        similarity_grid(a, a, 3, side="up")


def test_grid_csv():
    g = SimilarityGrid(np.array([[1.0, 0.5], [1 / 3, 0.25]]))
    assert g.to_csv() == "i,j,phi\n1,1,1\n1,2,0.5\n2,1,0.333333333333\n2,2,0.25\n"


# -- histograms -------------------------------------------------------------------------


def test_histogram_analytic_spectrum():
    h = sv_histogram([np.diag([10.0, 1.0, 0.1])])
    assert h.zero_count == 0
    assert h.counts.sum() == 3
    edges = h.edges
    for v in (-1.0, 0.0, 1.0):
        k = np.searchsorted(edges, v, side="right") - 1
        assert h.counts[k] == 1
    assert h.edges[0] == -2.0 and h.edges[-1] == 8.0 and len(h.counts) == 40


def test_histogram_zero_bucket_and_conservation(rng):
    m = rng.normal(size=(12, 3)) @ rng.normal(size=(3, 9))
    h = sv_histogram([m])
    assert h.zero_count == 9 - 3
    assert h.counts.sum() + h.zero_count == 9
    z = sv_histogram([np.zeros((4, 5))])
    assert z.zero_count == 4 and z.counts.sum() == 0


def test_histogram_clamps_out_of_range():
    # -log10 values -3 and 10 fall outside [-2, 8] and land in the end bins
    h = sv_histogram([np.diag([1e3, 1.0])])
    assert h.counts[0] == 1 and h.counts.sum() == 2
    h = sv_histogram([np.diag([1e-3, 1e-10])])
    assert h.counts[-1] == 1 and h.zero_count == 0
    # below 1e-8 * sigma_1 counts as zero, not as a binned value
    h = sv_histogram([np.diag([1.0, 5e-9])])
    assert h.zero_count == 1 and h.counts.sum() == 1


def test_histogram_aggregation(rng):
    m = rng.normal(size=(8, 6))
    single = sv_histogram([m])
    double = sv_histogram([m, m.copy()], agg="mean")
    np.testing.assert_array_equal(single.counts, double.counts)
    per = sv_histogram([m, rng.normal(size=(8, 6)) @ np.diag([1, 1, 1, 0, 0, 0.0])], agg="per-layer")
    assert per.counts.shape == (2, 40)
    assert list(per.zero_count) == [0, 3]
    assert per.total() == 12
    mean = sv_histogram([m, m * 0], agg="mean")
    assert mean.counts.sum() + mean.zero_count == 6


def test_histogram_errors(rng):
    with pytest.raises(ValueError):
        sv_histogram([])
    with pytest.raises(ValueError):
        sv_histogram([rng.normal(size=(3, 3)), rng.normal(size=(3, 4))])
    with pytest.raises(ValueError):
        sv_histogram([rng.normal(size=(3, 3))], agg="median")


def test_histogram_csv():
    h = sv_histogram([np.diag([1.0, 0.0])])
    lines = h.to_csv().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert lines[1] == "-2,-1.75,0"
    assert lines[9] == "0,0.25,1"
    assert lines[-1] == "zero_count,,1"
    assert len(lines) == 42
    per = sv_histogram([np.eye(2), np.eye(2)], agg="per-layer")
    with pytest.raises(ValueError):
        per.to_csv()
    assert per.to_csv(1).splitlines()[-1] == "zero_count,,0"


def test_lora_like_zero_count(rng):
    d_in, d_out, r = 20, 16, 3
    dw = rng.normal(size=(d_in, r)) @ rng.normal(size=(r, d_out))
    assert sv_histogram([dw]).zero_count >= d_out - r


# -- pairwise ----------------------------------------------------------------------------


def trained_like_multilora(rng, n=3, r=3):
    m = MultiLoraAdapter(
        [Param(rng.normal(size=(10, r)), f"a{i}") for i in range(n)],
        [Param(rng.normal(size=(r, 8)), f"b{i}") for i in range(n)],
        [Param(rng.normal(size=8), f"s{i}") for i in range(n)],
    )
    return m


def test_pairwise_grids(rng):
    ad_ = trained_like_multilora(rng)
    grids = pairwise_sublora_grid(ad_, 3)
    assert sorted(grids) == [(i, j) for i in range(3) for j in range(3)]
    for i in range(3):
        np.testing.assert_allclose(np.diag(grids[i, i].values), 1.0, atol=1e-9)
    for k in range(1, 4):
        assert grids[0, 2].phi(k, k) == pytest.approx(grids[2, 0].phi(k, k), abs=1e-10)
    subs = sublora_deltas(ad_)
    for (i, j), g in grids.items():
        for a in (1, 3):
            for b in (2, 3):
                assert g.phi(a, b) == pytest.approx(oracle_phi(subs[i], subs[j], a, b), abs=1e-8)


def test_pairwise_degenerate(rng):
    ad_ = trained_like_multilora(rng)
    ad_.scaling_list[1].data[:] = 0.0
    with pytest.raises(DegenerateInputError):
        pairwise_sublora_grid(ad_, 2)
    with pytest.raises(ValueError):
        pairwise_sublora_grid(trained_like_multilora(rng, n=1), 2)


def test_pairwise_from_matrices(rng):
    mats = [rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5)) for _ in range(2)]
    grids = pairwise_sublora_grid(mats, 2)
    assert grids[0, 1].values.shape == (2, 2)
    with pytest.raises(DegenerateInputError):
        pairwise_sublora_grid([mats[0], np.zeros((6, 5))], 2)


def test_spectrum_summary():
    s = spectrum_summary(np.diag([1.0, 1.0, 0.0]))
    assert s["numerical_rank"] == 2
    assert s["effective_rank"] == pytest.approx(2.0)
    assert s["top1_energy"] == pytest.approx(0.5)
    assert spectrum_summary(np.zeros((2, 2)))["numerical_rank"] == 0
