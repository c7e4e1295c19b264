import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpt import autodiff as ad
from bpt.pointops import (
    EmbedConfig,
    NeighborEmbedding,
    PointCloud,
    StageConfig,
    farthest_point_sampling,
    knn_group,
    knn_indices,
    normalize,
    plan_sampling,
    stack_plans,
)


def fps_oracle(pts, m, seed=0):
    chosen = [seed]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for j in range(len(pts)):
            d = min(sum((pts[j][t] - pts[c][t]) ** 2 for t in range(3)) for c in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return chosen


def knn_oracle(pts, c, k):
    d = [sum((pts[j][t] - pts[c][t]) ** 2 for t in range(3)) for j in range(len(pts))]
    return sorted(range(len(pts)), key=lambda j: (j != c, d[j], j))[:k]


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), features=np.zeros((2, 4)))


def test_normalize_unit_radius():
    rng = np.random.default_rng(0)
    pc = normalize(PointCloud(rng.normal(size=(50, 3)) * 7 + 3))
    assert pc.normalized
    assert np.allclose(pc.points.mean(axis=0), 0, atol=1e-12)
    assert np.isclose(np.linalg.norm(pc.points, axis=1).max(), 1.0)


@given(st.integers(2, 100), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_normalize_is_idempotent(n, seed):
    once = normalize(np.random.default_rng(seed).normal(size=(n, 3)) * 5 + 2)
    assert np.abs(normalize(once) - once).max() <= 1e-12


def test_normalize_degenerate_cloud_is_only_centred():
    pts = normalize(np.full((5, 3), 2.5))
    assert np.array_equal(pts, np.zeros((5, 3)))


def test_fps_small_example():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0], [2, 0, 0]])
    assert list(farthest_point_sampling(pts, 3)) == [0, 2, 3]


def test_fps_ties_go_to_lowest_index():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]])
    assert farthest_point_sampling(pts, 2)[1] == 1


def test_fps_errors():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        farthest_point_sampling(pts, 5)
    with pytest.raises(ValueError):
        farthest_point_sampling(pts, 0)
    with pytest.raises(ValueError):
        farthest_point_sampling(pts, 2, seed_index=4)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1), st.data())
@settings(max_examples=150, deadline=None)
def test_fps_matches_oracle(n, seed, data):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    m = data.draw(st.integers(1, n))
    s = data.draw(st.integers(0, n - 1))
    assert list(farthest_point_sampling(pts, m, s)) == fps_oracle(pts.tolist(), m, s)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1), st.data())
@settings(max_examples=150, deadline=None)
def test_knn_matches_oracle(n, seed, data):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    k = data.draw(st.integers(1, n))
    centers = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=5))
    got = knn_indices(pts, centers, k)
    for row, c in zip(got, centers):
        assert list(row) == knn_oracle(pts.tolist(), c, k)


def test_knn_duplicate_points_center_first():
    pts = np.zeros((5, 3))
    assert list(knn_indices(pts, [3], 5)[0]) == [3, 0, 1, 2, 4]


def test_knn_group_relative_features():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(20, 3))
    feats = rng.normal(size=(20, 4))
    g = knn_group(PointCloud(pts, feats), [0, 5], 3)
    assert g.relative_features.shape == (2, 3, 8)
    assert np.allclose(g.relative_features[:, 0, 4:], 0)  # the centre minus itself
    j = g.neighbor_indices[1, 2]
    assert np.allclose(g.relative_features[1, 2], np.concatenate([feats[j], feats[j] - feats[5]]))
    assert np.allclose(g.centers, pts[[0, 5]])


def test_stage_sizes_and_config_roundtrip():
    cfg = EmbedConfig()
    assert cfg.stage_sizes(1024) == [(512, 32), (256, 32)]
    assert cfg.out_dim == 256
    small = EmbedConfig((8,), (StageConfig(0.5, 4, 16),))
    assert EmbedConfig.from_dict(small.to_dict()) == small


def test_plan_depends_only_on_coordinates():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(32, 3))
    cfg = EmbedConfig((8,), (StageConfig(0.5, 4, 16), StageConfig(0.25, 4, 16)))
    plans = plan_sampling(pts, cfg)
    assert [p.center_indices.shape for p in plans] == [(16,), (8,)]
    assert plans[1].neighbor_indices.max() < 16
    again = plan_sampling(pts.copy(), cfg)
    assert all(np.array_equal(a.neighbor_indices, b.neighbor_indices) for a, b in zip(plans, again))


def test_embedding_shapes_and_gradient_flow():
    rng = np.random.default_rng(3)
    cfg = EmbedConfig((8, 8), (StageConfig(0.5, 4, 16), StageConfig(0.25, 4, 12)))
    emb = NeighborEmbedding(cfg, np.random.default_rng(0))
    pts = rng.normal(size=(3, 32, 3))
    plans = stack_plans([plan_sampling(p, cfg) for p in pts])
    out = emb(pts, plans)
    assert out.shape == (3, 8, 12)
    ad.backward(ad.sum_(out))
    assert all(p.grad is not None for p in emb.parameters())
    names = [n for n, _ in emb.named_parameters()]
    assert any(n.startswith("stage_modules.") for n in names)
