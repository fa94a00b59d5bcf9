import itertools
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from triadnet.errors import DomainError, SizeError
from triadnet.netcore import (
    EARTH_RADIUS_KM,
    BipartiteGraph,
    NodeCovariates,
    asinh,
    build_proximity,
    common_support,
    common_support_matrix,
    distance_matrix,
    expected_triads_uniform,
    haversine_distance,
    nearest_rank_quantile,
    network_stats,
    quantile_bins,
    read_distance_csv,
    shared_partner_count,
    triad_count,
    triangles,
)


def cosine_law_km(p1, p2):
    # independent oracle: spherical law of cosines
    la1, lo1, la2, lo2 = map(math.radians, (*p1, *p2))
    c = math.sin(la1) * math.sin(la2) + math.cos(la1) * math.cos(la2) * math.cos(lo2 - lo1)
    return EARTH_RADIUS_KM * math.acos(max(-1.0, min(1.0, c)))


def three_seller_distances():
    # pairs (0,1)=2, (0,2)=5, (1,2)=9
    return np.array([[0, 2, 5], [2, 0, 9], [5, 9, 0]], dtype=float)


# -- haversine ---------------------------------------------------------------

def test_haversine_bogota_medellin():
    d = haversine_distance((4.711, -74.072), (6.244, -75.581))
    # frozen from the law-of-cosines oracle below
    assert d == pytest.approx(238.65, abs=0.5)
    assert d == pytest.approx(cosine_law_km((4.711, -74.072), (6.244, -75.581)), abs=1e-6)


def test_haversine_identity_and_antipode():
    assert haversine_distance((12.3, 45.6), (12.3, 45.6)) == 0.0
    assert haversine_distance((0, 0), (0, 180)) == pytest.approx(math.pi * 6371.0088, rel=1e-12)
    assert haversine_distance((0, 0), (0, 180)) == pytest.approx(20015.1, abs=0.1)


def test_haversine_rejects_out_of_range():
    with pytest.raises(DomainError):
        haversine_distance((91, 0), (0, 0))
    with pytest.raises(DomainError):
        haversine_distance((0, 0), (0, 181))


coords = st.tuples(st.floats(-89.9, 89.9), st.floats(-179.9, 179.9))


@given(coords, coords)
def test_haversine_symmetric_nonnegative(p, q):
    d1 = haversine_distance(p, q)
    assert d1 >= 0
    assert d1 == pytest.approx(haversine_distance(q, p), abs=1e-9)
    assert d1 <= math.pi * EARTH_RADIUS_KM + 1e-6


def test_distance_matrix_matches_pairwise():
    lat = np.array([4.7, 6.2, 3.4, 10.9])
    lon = np.array([-74.1, -75.6, -76.5, -74.8])
    d = distance_matrix(lat, lon)
    for i, j in itertools.combinations(range(4), 2):
        assert d[i, j] == pytest.approx(haversine_distance((lat[i], lon[i]), (lat[j], lon[j])), abs=1e-9)
    assert np.all(np.diag(d) == 0)
    assert np.array_equal(d, d.T)


# -- proximity ---------------------------------------------------------------

def test_continuous_rank_three_sellers():
    p = build_proximity(three_seller_distances())
    assert p.proximity[0, 1] == 1.0  # smallest distance
    assert p.proximity[0, 2] == 0.5
    assert p.proximity[1, 2] == 0.0  # largest distance
    assert np.all(np.diag(p.proximity) == 0)


def test_quantile_threshold_three_sellers():
    assert nearest_rank_quantile([2, 5, 9], 50) == 5
    p = build_proximity(three_seller_distances(), "quantile", 50)
    assert [p.proximity[0, 1], p.proximity[0, 2], p.proximity[1, 2]] == [1, 1, 0]


def test_equal_distances_give_equal_proximity():
    d = np.full((4, 4), 3.0)
    np.fill_diagonal(d, 0)
    r = build_proximity(d).proximity
    off = r[~np.eye(4, dtype=bool)]
    assert np.all(off == off[0])


def test_proximity_errors():
    with pytest.raises(SizeError):
        build_proximity(np.zeros((1, 1)))
    with pytest.raises(DomainError):
        build_proximity(np.array([[0, 1], [2, 0]]))


def _random_distances(rng, n):
    pts = rng.random((n, 2)) * 100
    return np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(0, 10_000), st.floats(0.01, 50.0))
def test_continuous_rank_invariant_to_monotone_rescaling(n, seed, scale):
    d = _random_distances(np.random.default_rng(seed), n)
    a = build_proximity(d).proximity
    b = build_proximity(scale * d**1.5).proximity
    assert np.allclose(a, b)
    assert a.min() >= 0 and a.max() <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(0, 10_000), st.floats(1, 99))
def test_quantile_mode_binary(n, seed, q):
    r = build_proximity(_random_distances(np.random.default_rng(seed), n), "quantile", q).proximity
    assert set(np.unique(r)) <= {0.0, 1.0}


# -- common support ----------------------------------------------------------

def test_common_support_two_sellers():
    r = np.array([[0, 1.0], [1.0, 0]])
    y = np.array([[0], [1]])
    assert common_support(y, r, 0)[0] == 1.0


def test_common_support_hand_example():
    # i = 0 with third sellers r = {1, 0.5}, links y = {1, 0}: (1*1 + 0.5*0)/2
    r = np.array([[0, 1, 0.5], [1, 0, 0], [0.5, 0, 0]])
    y = np.array([[0], [1], [0]])
    assert common_support(y, r, 0)[0] == pytest.approx(0.5)


def test_common_support_zero_column():
    r = build_proximity(three_seller_distances())
    assert np.all(common_support_matrix(np.zeros((3, 4)), r) == 0)


def test_common_support_shape_error():
    r = build_proximity(three_seller_distances())
    with pytest.raises(SizeError):
        common_support_matrix(np.zeros((4, 2)), r)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(1, 7), st.integers(0, 10_000))
def test_common_support_matches_double_loop(ns, nb, seed):
    rng = np.random.default_rng(seed)
    r = build_proximity(_random_distances(rng, ns)).proximity
    y = rng.random((ns, nb)) < 0.4
    S = common_support_matrix(y, r)
    for i in range(ns):
        for j in range(nb):
            naive = sum(r[k, i] * y[k, j] for k in range(ns) if k != i) / (ns - 1)
            assert S[i, j] == pytest.approx(naive, abs=1e-12)
        assert np.allclose(common_support(y, r, i), S[i])
    assert S.min() >= 0 and S.max() <= 1


# -- shared partners and triads ----------------------------------------------

def _sym(edges, n):
    a = np.zeros((n, n), dtype=int)
    for u, v in edges:
        a[u, v] = a[v, u] = 1
    return a


def test_shared_partner_triangle():
    a = _sym([(0, 1), (1, 2), (0, 2)], 3)
    assert shared_partner_count(a, 0, 1) == 1.0


def test_shared_partner_none():
    a = _sym([(0, 2), (1, 3)], 4)
    assert shared_partner_count(a, 0, 1) == 0.0


def test_shared_partner_five_nodes():
    # third nodes 2, 3, 4: 2 and 3 link to both 0 and 1, 4 links only to 0
    a = _sym([(0, 2), (1, 2), (0, 3), (1, 3), (0, 4)], 5)
    assert shared_partner_count(a, 0, 1) == pytest.approx(2 / 3)


def test_shared_partner_needs_third_nodes():
    with pytest.raises(SizeError):
        shared_partner_count(np.ones((2, 2)), 0, 1)


def brute_triads(a):
    n = a.shape[0]
    return sum(a[i, j] * a[k, i] * a[k, j] for i in range(n) for j in range(n) for k in range(n)
               if len({i, j, k}) == 3)


def brute_triangles(a):
    return sum(1 for i, j, k in itertools.combinations(range(a.shape[0]), 3) if a[i, j] and a[j, k] and a[i, k])


def test_triads_small_graphs():
    assert triad_count(np.zeros((5, 5))) == 0
    tri = _sym([(0, 1), (1, 2), (0, 2)], 3)
    assert triad_count(tri) == 6 == brute_triads(tri)
    k4 = 1 - np.eye(4, dtype=int)
    assert triad_count(k4) == 24 == brute_triads(k4)
    assert triangles(k4) == 4


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 25), st.floats(0.05, 0.9), st.integers(0, 10_000))
def test_triad_count_six_times_triangles(n, p, seed):
    rng = np.random.default_rng(seed)
    a = np.triu(rng.random((n, n)) < p, 1)
    a = (a | a.T).astype(int)
    assert triad_count(a) == 6 * brute_triangles(a)


def test_expected_triads_closed_form():
    assert expected_triads_uniform(10, 0) == 0
    n = 7
    assert expected_triads_uniform(n, n * (n - 1) // 2) == pytest.approx(n * (n - 1) * (n - 2) / 6)
    assert expected_triads_uniform(10, 10) == pytest.approx(1.3169, abs=1e-4)
    with pytest.raises(DomainError):
        expected_triads_uniform(2, 1)


def test_expected_triads_matches_independent_link_graphs():
    # the closed form is exact for independent links at the plug-in probability
    n, L, draws = 10, 10, 20_000
    p = L / (n * (n - 1) / 2)
    rng = np.random.default_rng(1)
    iu = np.triu_indices(n, 1)
    tot = 0
    for _ in range(draws):
        a = np.zeros((n, n), dtype=np.int64)
        on = rng.random(iu[0].size) < p
        a[iu[0][on], iu[1][on]] = 1
        a = a + a.T
        tot += np.trace(a @ a @ a) // 6
    se = 1.6 / math.sqrt(draws)  # triangle count sd is about 1.6 here
    assert abs(tot / draws - expected_triads_uniform(n, L)) < 4 * se


def test_fixed_link_count_mean_is_hypergeometric():
    # with L fixed the mean is C(n,3) * falling(L,3) / falling(M,3), below the plug-in value
    n, L, draws = 10, 10, 20_000
    M = n * (n - 1) // 2
    exact = math.comb(n, 3) * L * (L - 1) * (L - 2) / (M * (M - 1) * (M - 2))
    assert exact == pytest.approx(1.01480, abs=1e-5)
    rng = np.random.default_rng(2)
    iu = np.triu_indices(n, 1)
    tot = 0
    for _ in range(draws):
        a = np.zeros((n, n), dtype=np.int64)
        e = rng.choice(M, L, replace=False)
        a[iu[0][e], iu[1][e]] = 1
        a = a + a.T
        tot += np.trace(a @ a @ a) // 6
    assert abs(tot / draws - exact) < 4 * 1.4 / math.sqrt(draws)
    assert expected_triads_uniform(n, L) > exact


# -- asinh -------------------------------------------------------------------

def test_asinh_values():
    assert asinh(0.0) == 0.0
    assert asinh(1.0) == pytest.approx(0.881373587019543, abs=1e-12)


@given(st.floats(-1e6, 1e6))
def test_asinh_odd_and_matches_numpy(x):
    assert asinh(-x) == -asinh(x)
    assert asinh(x) == pytest.approx(np.arcsinh(x), rel=1e-12)


# -- graph, stats, serialization ---------------------------------------------

def fixture_graph():
    # 3 sellers x 3 buyers over two years
    v0 = np.array([[100, 0, 250], [0, 300, 0], [120, 0, 0]], dtype=float)
    v1 = np.array([[110, 0, 0], [0, 310, 400], [0, 0, 0]], dtype=float)
    return BipartiteGraph(["a", "b", "c"], ["x", "y", "z"], [2017, 2018], np.stack([v0, v1]))


def test_network_stats_hand_tally():
    st_ = network_stats(fixture_graph())
    py = st_.per_year.set_index("year")
    assert py.loc[2017, "active_links"] == 4
    assert py.loc[2018, "active_links"] == 3
    assert py.loc[2017, "density"] == pytest.approx(4 / 9)
    assert py.loc[2018, "new_links"] == 1  # (b, z)
    assert py.loc[2018, "discontinued_links"] == 2  # (a, z) and (c, x)
    assert py.loc[2018, "active_sellers"] == 2
    assert py.loc[2018, "sales_per_seller"] == pytest.approx(820 / 2)
    # buyer x: 2 sellers in 2017, 1 in 2018; y: 1, 1; z: 1, 1
    assert st_.buyer_level["sellers_per_buyer"] == pytest.approx((1.5 + 1 + 1) / 3)
    assert st_.density == pytest.approx((4 / 9 + 3 / 9) / 2)


def test_network_stats_single_link():
    g = BipartiteGraph.from_adjacency(np.ones((1, 1)))
    assert network_stats(g).density == 1.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6))))
def test_degree_sums_and_continuity(adj):
    g = BipartiteGraph.from_adjacency(adj)
    s = network_stats(g)
    for t, y in enumerate(g.years):
        assert s.outdegree[y].sum() == s.indegree[y].sum() == adj[t].sum()
        assert 0 <= s.per_year["density"].iloc[t] <= 1
        if t:
            continued = (adj[t] & adj[t - 1]).sum()
            assert s.per_year["new_links"].iloc[t] + continued == adj[t].sum()


def test_graph_roundtrips(tmp_path):
    g = fixture_graph()
    g.to_csv(tmp_path / "g.csv")
    h = BipartiteGraph.read_csv(tmp_path / "g.csv")
    assert np.array_equal(g.values, h.values) and g.sellers == h.sellers
    g.save_cache(tmp_path / "g.npz")
    k = BipartiteGraph.load_cache(tmp_path / "g.npz")
    assert np.array_equal(g.values, k.values) and g.years == k.years


def test_from_frame_sums_duplicates():
    df = pd.DataFrame({"year": [1, 1], "seller_id": ["s", "s"], "buyer_id": ["b", "b"], "value_usd": [5.0, 7.0]})
    assert BipartiteGraph.from_frame(df).values[0, 0, 0] == 12.0


def test_graph_rejects_negative_values():
    with pytest.raises(DomainError):
        BipartiteGraph(["a"], ["b"], [0], -np.ones((1, 1, 1)))
    with pytest.raises(SizeError):
        BipartiteGraph(["a"], ["b"], [0, 1], np.ones((1, 1, 1)))


def test_proximity_csv_roundtrip(tmp_path):
    p = build_proximity(three_seller_distances())
    p.to_csv(tmp_path / "d.csv", ["s0", "s1", "s2"])
    d = read_distance_csv(tmp_path / "d.csv", ["s0", "s1", "s2"])
    assert np.array_equal(d, three_seller_distances())


def test_covariates_from_graph():
    cov = NodeCovariates.from_graph(fixture_graph())
    xs, xb = cov.at(2017)
    assert list(xs) == [350, 300, 120]
    assert list(xb) == [220, 300, 250]


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)), st.integers(1, 12))
def test_quantile_bins_cover_range(x, q):
    b = quantile_bins(x, q)
    assert b.min() >= 0 and b.max() < q
    # bins are monotone in x
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(b[order]) >= 0)
