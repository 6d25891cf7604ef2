import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointcra import _kernels
from pointcra.geomcore import (
    GeometryError,
    NeighborhoodIndex,
    PointCloud,
    ball_query,
    farthest_point_sample,
    group,
    knn,
    read_cloud,
    scatter_back,
    write_cloud,
)


def xs(*vals):
    return np.array([[v, 0.0, 0.0] for v in vals])


# brute-force oracles, written without the kernels' loops

def oracle_knn(q, r, k):
    d = np.sqrt(((q[:, None, :] - r[None, :, :]) ** 2).sum(-1))
    rows = []
    for row in d:
        order = sorted(range(len(row)), key=lambda j: (row[j], j))
        order = order[:k] + [order[0]] * max(0, k - len(order))
        rows.append(order)
    return np.array(rows)


def oracle_ball(q, r, radius, k):
    rows = []
    for p in q:
        d = np.sqrt(((r - p) ** 2).sum(-1))
        inside = [j for j in range(len(r)) if d[j] <= radius][:k]
        if not inside:
            inside = [min(range(len(r)), key=lambda j: (d[j], j))]
        rows.append(inside + [inside[-1]] * (k - len(inside)))
    return np.array(rows)


def oracle_fps(p, m, seed):
    chosen = [seed]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(len(p)):
            d = min(((p[i] - p[j]) ** 2).sum() for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


class TestFPS:
    def test_single_point(self):
        assert farthest_point_sample(xs(0.0), 1, 0).tolist() == [0]

    def test_four_points_tie_goes_low(self):
        assert farthest_point_sample(xs(0, 10, 1, 9), 3, 0).tolist() == [0, 1, 2]

    def test_full_selection_is_permutation(self):
        p = np.random.default_rng(0).normal(size=(17, 3))
        assert sorted(farthest_point_sample(p, 17, 5).tolist()) == list(range(17))

    def test_errors(self):
        p = xs(0, 1)
        with pytest.raises(GeometryError):
            farthest_point_sample(p, 3, 0)
        with pytest.raises(GeometryError):
            farthest_point_sample(p, 1, 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 10_000))
    def test_permutation_covariant(self, n, seed):
        rng = np.random.default_rng(seed)
        p = rng.normal(size=(n, 3))
        perm = rng.permutation(n)
        s = int(rng.integers(n))
        m = int(rng.integers(1, n + 1))
        base = farthest_point_sample(p, m, s)
        # perm maps new index -> old index
        moved = farthest_point_sample(p[perm], m, int(np.flatnonzero(perm == s)[0]))
        assert perm[moved].tolist() == base.tolist()


class TestKNN:
    def test_self_query(self):
        p = np.random.default_rng(1).normal(size=(9, 3))
        assert knn(p, p, 1).neighbors[:, 0].tolist() == list(range(9))

    def test_line_example(self):
        nb = knn(xs(1.4), xs(0, 1, 2, 5), 2)
        assert set(nb.neighbors[0].tolist()) == {1, 2}

    def test_padding_repeats_nearest(self):
        nb = knn(xs(0.1), xs(0, 1), 3)
        assert nb.neighbors[0].tolist() == [0, 1, 0]

    def test_empty_reference(self):
        with pytest.raises(GeometryError):
            knn(xs(0.0), np.zeros((0, 3)), 1)

    def test_distances_are_euclidean(self):
        nb = knn(xs(0.0), xs(3, -4), 2)
        assert np.allclose(nb.distances[0], [3.0, 4.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 10), st.integers(0, 10_000))
    def test_rows_sorted_like_brute_force(self, n, k, seed):
        rng = np.random.default_rng(seed)
        r, q = rng.normal(size=(n, 3)), rng.normal(size=(5, 3))
        nb = knn(q, r, k)
        assert (np.diff(nb.distances, axis=1)[:, : min(k, n) - 1] >= 0).all()
        assert np.array_equal(nb.neighbors, oracle_knn(q, r, k))


class TestBallQuery:
    def test_line_example(self):
        nb = ball_query(xs(0.0), xs(0, 1, 2, 5), 1.5, 4)
        assert nb.neighbors[0].tolist() == [0, 1, 1, 1]

    def test_isolated_query_gets_nearest(self):
        nb = ball_query(xs(100.0), xs(0, 1, 2, 5), 1.0, 3)
        assert nb.neighbors[0].tolist() == [3, 3, 3]

    def test_huge_radius_is_index_order(self):
        r = np.random.default_rng(2).normal(size=(10, 3))
        nb = ball_query(r[:3], r, 1e6, 4)
        assert (nb.neighbors == np.arange(4)).all()

    def test_errors(self):
        with pytest.raises(GeometryError):
            ball_query(xs(0.0), np.zeros((0, 3)), 1.0, 2)
        with pytest.raises(GeometryError):
            ball_query(xs(0.0), xs(0.0), 0.0, 2)


class TestGroup:
    def test_self_neighbor_offset_is_zero(self):
        cloud = PointCloud(xs(0, 1, 2), np.arange(3.0))
        rel, feat = group(cloud, knn(cloud.positions, cloud.positions, 1))
        assert (rel == 0).all()
        assert feat[:, 0, 0].tolist() == [0.0, 1.0, 2.0]

    def test_against_elementwise_gather(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.normal(size=(8, 3)), rng.normal(size=(8, 4)))
        index = knn(cloud.positions, cloud.positions, 3)
        rel, feat = group(cloud, index)
        for i in range(8):
            for j in range(3):
                src = index.neighbors[i, j]
                assert np.array_equal(feat[i, j], cloud.features[src])
                assert np.array_equal(rel[i, j], cloud.positions[i] - cloud.positions[src])

    def test_scatter_back_is_lossless(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.normal(size=(12, 3)), rng.normal(size=(12, 2)))
        index = knn(cloud.positions, cloud.positions, 4)
        _, feat = group(cloud, index)
        back = scatter_back(feat, index, 12)
        touched = np.unique(index.neighbors)
        assert np.array_equal(back[touched], cloud.features[touched])

    def test_bad_index(self):
        cloud = PointCloud(xs(0, 1), np.zeros(2))
        bad = NeighborhoodIndex(np.array([0]), np.array([[5]]))
        with pytest.raises(GeometryError):
            group(cloud, bad)


class TestPointCloud:
    def test_rejects_mismatched_rows(self):
        with pytest.raises(GeometryError):
            PointCloud(xs(0, 1), np.zeros(3))

    def test_rejects_nonfinite(self):
        with pytest.raises(GeometryError):
            PointCloud(xs(0, np.nan), np.zeros(2))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), rng.integers(0, 3, 6))
        write_cloud(tmp_path / "c.txt", cloud)
        back = read_cloud(tmp_path / "c.txt")
        assert np.array_equal(back.positions, cloud.positions)
        assert np.array_equal(back.features, cloud.features)
        assert np.array_equal(back.labels, cloud.labels)

    def test_round_trip_unlabeled_no_features(self, tmp_path):
        cloud = PointCloud(xs(0.5, 1.5), np.zeros((2, 0)))
        write_cloud(tmp_path / "c.txt", cloud)
        back = read_cloud(tmp_path / "c.txt")
        assert back.labels is None and back.num_channels == 0

    @pytest.mark.parametrize(
        "text",
        ["", "#pts 2 dims 0 labeled 0\n0 0 0\n", "#points 1 dims 0 labeled 0\n0 0 0\n", "#pts 1 dims 1 labeled 0\n0 0 0\n"],
    )
    def test_malformed_files(self, tmp_path, text):
        path = tmp_path / "bad.txt"
        path.write_text(text)
        with pytest.raises(GeometryError):
            read_cloud(path)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba missing")
class TestKernelPaths:
    """The numba and numpy kernels must agree exactly."""

    def test_all_kernels_match(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(1, 60))
            r = rng.normal(size=(n, 3))
            q = rng.normal(size=(7, 3))
            k = int(rng.integers(1, 9))
            m = int(rng.integers(1, n + 1))
            s = int(rng.integers(n))
            assert np.array_equal(_kernels.fps_nb(r, m, s), _kernels.fps_np(r, m, s))
            i_nb, d_nb = _kernels.knn_nb(q, r, k)
            i_np, d_np = _kernels.knn_np(q, r, k)
            assert np.array_equal(i_nb, i_np) and np.array_equal(d_nb, d_np)
            assert np.array_equal(_kernels.ball_query_nb(q, r, 0.8, k), _kernels.ball_query_np(q, r, 0.8, k))
            idx = rng.integers(0, 5, 30)
            vals = rng.normal(size=(30, 2))
            a = _kernels.scatter_add_nb(np.zeros((5, 2)), idx, vals)
            b = _kernels.scatter_add_np(np.zeros((5, 2)), idx, vals)
            assert np.allclose(a, b, rtol=0, atol=1e-12)
