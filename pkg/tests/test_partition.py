import numpy as np
import pytest
from scipy.sparse.csgraph import floyd_warshall

from core.errors import ConfigError, DataError, ParseError
from core.geometry import AABB, CLASS_NAMES, PointCloud, SyntheticSpec, normalize_unit_sphere, sample_synthetic
from core.partition import (build_adjacency, ground_truth, hop_distances, read_hop_csv, scaled_aabb, voxelize,
                            write_hop_csv)


def _random_cloud(rng, n=512):
    kind = rng.integers(3)
    if kind == 0:
        return PointCloud(rng.random((n, 3)))
    if kind == 1:
        # a few tight blobs leave gaps between occupied parts
        centers = rng.random((rng.integers(1, 6), 3))
        pick = rng.integers(len(centers), size=n)
        return PointCloud(centers[pick] + 0.03 * rng.normal(size=(n, 3)))
    spec = SyntheticSpec(class_id=int(rng.integers(len(CLASS_NAMES))), n_points=n, seed=int(rng.integers(1 << 30)))
    return normalize_unit_sphere(sample_synthetic(spec))


def _oracle_hops(adjacency, delta):
    graph = adjacency.astype(float)
    np.fill_diagonal(graph, 0.0)
    dist = floyd_warshall(graph, directed=False, unweighted=True)
    return np.minimum(dist, delta)


def test_voxelize_flat_index():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]])
    part = voxelize(PointCloud(pts), 3)
    np.testing.assert_array_equal(part.assignment, [0, 26, 9, 3, 1])
    assert part.n_parts == 27
    assert part.occupancy().sum() == len(pts)
    assert part.nonempty_mask.sum() == 5


def test_voxelize_uses_tight_cube_of_longest_axis():
    # x spans 2, y and z span nothing: cube side 2 centred on the box
    pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    part = voxelize(PointCloud(pts), 2)
    # y, z sit at the cube centre and fall in the upper half
    np.testing.assert_array_equal(part.assignment, [0 * 4 + 1 * 2 + 1, 1 * 4 + 1 * 2 + 1])


def test_voxelize_degenerate_and_bad_split():
    part = voxelize(PointCloud(np.zeros((6, 3))), 3)
    np.testing.assert_array_equal(part.assignment, 0)
    assert part.nonempty_mask.sum() == 1
    with pytest.raises(ConfigError):
        voxelize(PointCloud(np.zeros((6, 3))), 1)


def test_parts_partition_the_points():
    cloud = PointCloud(np.random.default_rng(0).random((300, 3)))
    part = voxelize(cloud, 3)
    merged = np.sort(np.concatenate(part.part_lists))
    np.testing.assert_array_equal(merged, np.arange(300))


def test_scaled_aabb():
    box = scaled_aabb(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]), 1.2)
    np.testing.assert_allclose(box.min_corner, -0.1)
    np.testing.assert_allclose(box.max_corner, 1.1)
    single = scaled_aabb(np.array([[0.3, 0.4, 0.5]]), 1.2)
    np.testing.assert_array_equal(single.min_corner, single.max_corner)
    with pytest.raises(ConfigError):
        scaled_aabb(np.zeros((2, 3)), 0.9)


def test_adjacency_matches_interval_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        v = int(rng.integers(1, 28))
        lo = rng.random((v, 3))
        hi = lo + rng.random((v, 3)) * 0.4
        boxes = [AABB(a, b) for a, b in zip(lo, hi)]
        nonempty = rng.random(v) > 0.2
        adj = build_adjacency(boxes, nonempty)
        for i in range(v):
            for j in range(v):
                overlap = all(lo[i, d] <= hi[j, d] and lo[j, d] <= hi[i, d] for d in range(3))
                expected = nonempty[i] and nonempty[j] and (overlap or i == j)
                assert adj[i, j] == expected


def test_hops_match_floyd_warshall_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        cloud = _random_cloud(rng)
        part = voxelize(cloud, 3)
        boxes = [scaled_aabb(cloud.points[idx], 1.2) for idx in part.part_lists]
        adj = build_adjacency(boxes, part.nonempty_mask)
        hop = hop_distances(adj, 4)
        oracle = _oracle_hops(adj, 4)
        valid = hop.valid_mask
        np.testing.assert_array_equal(hop.D[valid], oracle[valid])


def test_hop_truncation_on_a_path():
    n = 6
    adj = np.eye(n, dtype=bool)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = True
    hop = hop_distances(adj, 4)
    assert hop.D[0, 3] == 3
    assert hop.D[0, 5] == 4
    assert hop.D[2, 2] == 0
    np.testing.assert_array_equal(hop.D, hop.D.T)


def test_disconnected_parts_get_delta():
    adj = np.eye(3, dtype=bool)
    hop = hop_distances(adj, 3)
    assert hop.D[0, 1] == 3
    assert hop.valid_mask.all()


def test_asymmetric_adjacency_rejected():
    adj = np.eye(3, dtype=bool)
    adj[0, 1] = True
    with pytest.raises(DataError):
        hop_distances(adj, 4)


def test_ground_truth_dense_cube():
    cloud = PointCloud(np.random.default_rng(2).random((4000, 3)))
    part, hop = ground_truth(cloud, 3, 1.2)
    assert part.nonempty_mask.all()
    assert hop.D.shape == (27, 27)
    assert set(np.unique(hop.D)) <= set(range(5))
    np.testing.assert_array_equal(np.diag(hop.D), 0)


def test_ground_truth_degenerate_cloud():
    part, hop = ground_truth(PointCloud(np.ones((10, 3))), 3)
    assert hop.valid_mask.sum() == 1
    assert hop.valid_mask[0, 0] and hop.D[0, 0] == 0


def test_hop_csv_round_trip(tmp_path):
    cloud = normalize_unit_sphere(sample_synthetic(SyntheticSpec(class_id=6, n_points=300, seed=3)))
    _, hop = ground_truth(cloud, 3)
    path = tmp_path / "hops.csv"
    write_hop_csv(hop, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "27,3,4"
    assert len(lines) == 28
    back = read_hop_csv(path)
    np.testing.assert_array_equal(back.valid_mask, hop.valid_mask)
    np.testing.assert_array_equal(back.D, hop.D)


def test_hop_csv_marks_invalid_pairs(tmp_path):
    _, hop = ground_truth(PointCloud(np.ones((10, 3))), 2)
    path = tmp_path / "hops.csv"
    write_hop_csv(hop, path)
    rows = [list(map(int, line.split(","))) for line in path.read_text().splitlines()[1:]]
    assert rows[0][0] == 0
    assert rows[0][1] == -1 and rows[1][1] == -1


def test_hop_csv_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("2,2,3\n0,1\n")
    with pytest.raises(ParseError):
        read_hop_csv(path)


def test_path_graph_without_self_loops():
    adj = np.zeros((3, 3), dtype=bool)
    adj[0, 1] = adj[1, 0] = adj[1, 2] = adj[2, 1] = True
    hop = hop_distances(adj, 4)
    assert hop.valid_mask.all()
    assert hop.D[0, 2] == 2
    np.testing.assert_array_equal(np.diag(hop.D), 0)
    np.testing.assert_array_equal(hop.D, hop_distances(adj | np.eye(3, dtype=bool), 4).D)


def test_isolated_node_without_self_loop_is_empty():
    adj = np.zeros((3, 3), dtype=bool)
    adj[0, 1] = adj[1, 0] = True
    hop = hop_distances(adj, 3)
    assert not hop.valid_mask[2].any() and not hop.valid_mask[:, 2].any()
    assert hop.D[0, 1] == 1


def test_non_square_adjacency_rejected():
    with pytest.raises(DataError):
        hop_distances(np.ones((2, 3), dtype=bool), 3)


def test_empty_part_box_has_zero_volume():
    box = scaled_aabb(np.zeros((0, 3)), 1.2)
    assert box.volume == 0.0
    assert scaled_aabb(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]), 1.2).volume == pytest.approx(1.2 * 2.4 * 1.2)


def test_point_order_does_not_change_ground_truth():
    rng = np.random.default_rng(21)
    for _ in range(50):
        cloud = _random_cloud(rng, n=256)
        perm = rng.permutation(len(cloud))
        part, hop = ground_truth(cloud, 3)
        part_p, hop_p = ground_truth(PointCloud(cloud.points[perm]), 3)
        np.testing.assert_array_equal(part.nonempty_mask, part_p.nonempty_mask)
        np.testing.assert_array_equal(hop.valid_mask, hop_p.valid_mask)
        np.testing.assert_array_equal(hop.D, hop_p.D)


def test_larger_scale_factor_only_adds_edges():
    rng = np.random.default_rng(22)
    for _ in range(50):
        cloud = _random_cloud(rng, n=256)
        part = voxelize(cloud, 3)
        previous = None
        for factor in (1.0, 1.2, 1.5, 2.0):
            boxes = [scaled_aabb(cloud.points[idx], factor) for idx in part.part_lists]
            adj = build_adjacency(boxes, part.nonempty_mask)
            if previous is not None:
                assert np.all(adj[previous])
            previous = adj
