import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cfsim.itemspace import (
    ConstructionError,
    DimensionError,
    FiniteMixture,
    ItemType,
    ParameterError,
    UniformCube,
    UnsupportedMeasureError,
    ball_mass,
    critical_radii,
    doubling_dimension_exact,
    gamma_distance,
    make_cluster_measure,
    make_user_cluster_measure,
    measure_from_json,
    measure_to_json,
    sample_item,
    validate_assumptions,
)
from util import equidistant_mixture


# ---------------------------------------------------------------------------
# gamma distance
# ---------------------------------------------------------------------------

def test_gamma_identity():
    x = ItemType.from_string("+-+-+-")
    assert gamma_distance(x, x) == 0.0


def test_gamma_antipodal():
    x = ItemType(8, 0b10110100)
    y = ItemType(8, 0b01001011)
    assert gamma_distance(x, y) == 1.0


def test_gamma_half():
    x = ItemType.from_signs([1, 1, -1, -1])
    y = ItemType.from_signs([1, -1, -1, 1])
    assert gamma_distance(x, y) == 0.5


def test_gamma_dimension_error():
    with pytest.raises(DimensionError):
        gamma_distance(ItemType(4, 0), ItemType(5, 0))


@given(
    st.integers(min_value=1, max_value=48),
    st.tuples(st.integers(min_value=0), st.integers(min_value=0),
              st.integers(min_value=0)),
)
def test_gamma_is_metric(n, seeds):
    masks = [(s * 0x9E3779B97F4A7C15 + 1) % (1 << n) for s in seeds]
    x, y, z = (ItemType(n, m) for m in masks)
    dxy = gamma_distance(x, y)
    assert dxy == gamma_distance(y, x)
    assert 0 <= dxy <= 1
    assert (dxy == 0) == (x.bits == y.bits)
    assert dxy <= gamma_distance(x, z) + gamma_distance(z, y) + 1e-15


def test_metric_on_generated_support_exhaustive():
    space = make_cluster_measure(K=16, n_users=160, nu=0.1, seed=7)
    types = space.measure.types
    for a, b, c in itertools.combinations(types, 3):
        assert gamma_distance(a, b) <= (
            gamma_distance(a, c) + gamma_distance(c, b) + 1e-15
        )
    for a, b in itertools.combinations(types, 2):
        assert gamma_distance(a, b) == gamma_distance(b, a) > 0


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sample_degenerate_mixture():
    t = ItemType.from_string("++--")
    m = FiniteMixture([t], [1.0])
    rng = np.random.default_rng(3)
    assert all(sample_item(m, rng) == t for _ in range(50))


def test_sample_uniform_cube_like_fraction():
    m = UniformCube(1000)
    rng = np.random.default_rng(11)
    fracs = [sample_item(m, rng).like_count() / 1000 for _ in range(10_000)]
    assert abs(np.mean(fracs) - 0.5) < 0.02


def test_sample_mixture_frequencies():
    a, b = ItemType(4, 0b0001), ItemType(4, 0b1110)
    m = FiniteMixture([a, b], [0.9, 0.1])
    rng = np.random.default_rng(5)
    hits = sum(sample_item(m, rng) == a for _ in range(10_000))
    assert abs(hits / 10_000 - 0.9) < 0.01


def test_sample_frequencies_chi_square():
    space = equidistant_mixture(8, 64)
    rng = np.random.default_rng(17)
    counts = np.zeros(8)
    index = {t: k for k, t in enumerate(space.types)}
    for _ in range(100_000):
        counts[index[sample_item(space, rng)]] += 1
    _stat, p = stats.chisquare(counts)
    assert p > 1e-3


def test_sample_deterministic_given_seed():
    m = UniformCube(64)
    draws1 = [sample_item(m, np.random.default_rng(9)).bits for _ in range(1)]
    draws2 = [sample_item(m, np.random.default_rng(9)).bits for _ in range(1)]
    assert draws1 == draws2


# ---------------------------------------------------------------------------
# exact doubling dimension
# ---------------------------------------------------------------------------

def test_dd_single_type():
    m = FiniteMixture([ItemType(8, 0b1)], [1.0])
    assert doubling_dimension_exact(m) == 0.0


def test_dd_equidistant_k_types():
    for k in (2, 4, 8, 16):
        m = equidistant_mixture(k, 64)
        assert doubling_dimension_exact(m) == pytest.approx(math.log2(k), abs=1e-12)


@pytest.mark.parametrize("w", [0.5, 0.25, 0.1, 0.03125])
def test_dd_two_types_weighted(w):
    a = ItemType(16, 0x00FF)
    b = ItemType(16, 0x0FF0)  # distance 8/16 = 0.5
    m = FiniteMixture([a, b], [w, 1.0 - w])
    assert doubling_dimension_exact(m) == pytest.approx(math.log2(1.0 / w), abs=1e-12)


def test_dd_requires_finite_support():
    with pytest.raises(UnsupportedMeasureError):
        doubling_dimension_exact(UniformCube(8))


def test_ball_mass_lower_bound_at_critical_radii():
    # mu(B(x, r)) >= r^d at every critical radius, for generated spaces
    for k, nu, depth in ((4, 0.15, 1), (8, 0.1, 1), (8, 0.1, 3)):
        space = make_cluster_measure(K=k, n_users=120, nu=nu, depth=depth, seed=3)
        d = space.d_exact
        for t, _w in space.measure.support():
            for r in critical_radii(space.measure, t):
                if r > 1:
                    continue
                assert ball_mass(space.measure, t, r) >= r ** d - 1e-9


# ---------------------------------------------------------------------------
# assumption validation
# ---------------------------------------------------------------------------

def test_validate_rejects_bad_nu():
    with pytest.raises(ParameterError):
        validate_assumptions(UniformCube(8), nu=0.3)


def test_validate_orthogonal_types_item_band():
    # two types liking disjoint 10% slices; at nu=0.04 the item fraction
    # 0.10 exceeds 2*nu
    n = 100
    a = ItemType(n, (1 << 10) - 1)
    b = ItemType(n, ((1 << 10) - 1) << 10)
    m = FiniteMixture([a, b], [0.5, 0.5])
    report = validate_assumptions(m, nu=0.04)
    assert not report.a2_item_ok


def test_validate_constructed_user_band():
    space = make_cluster_measure(K=8, n_users=160, nu=0.1, seed=1)
    report = validate_assumptions(space.measure, nu=0.1)
    assert report.a2_user_ok and report.a2_item_ok
    assert report.d_exact is not None


def test_validate_uniform_cube_flags():
    report = validate_assumptions(UniformCube(50), nu=0.2, sample_budget=500)
    assert not report.a2_user_ok
    assert not report.a2_item_ok
    assert report.d_exact is None
    assert np.all(report.per_user_like_prob == 0.5)


# ---------------------------------------------------------------------------
# generated measures
# ---------------------------------------------------------------------------

def test_cluster_measure_single_type():
    space = make_cluster_measure(K=1, n_users=100, nu=0.1, seed=2)
    report = space.report
    assert len(space.measure.types) == 1
    assert report.a2_item_ok
    assert space.d_exact == 0.0


def test_cluster_measure_flat_k4():
    space = make_cluster_measure(K=4, n_users=200, nu=0.15, seed=4)
    assert space.d_exact == pytest.approx(2.0, abs=1e-12)
    assert space.report.a2_user_ok and space.report.a2_item_ok


def test_cluster_measure_depth3():
    space = make_cluster_measure(K=8, n_users=240, nu=0.1, depth=3, seed=6)
    assert space.d_exact <= 3.0 + 1e-12
    assert space.report.a2_user_ok and space.report.a2_item_ok
    assert len(space.measure.types) == 8


def test_cluster_measure_infeasible():
    # K=2 at nu=0.1: no integer per-user like count lands in [0.2, 0.4]
    with pytest.raises(ConstructionError):
        make_cluster_measure(K=2, n_users=100, nu=0.1)


def test_user_cluster_measure_structure():
    space = make_user_cluster_measure(K=8, n_users=160, nu=0.1, seed=9)
    m = space.measure
    assert space.report.a2_user_ok  # like probability flat across users
    # same-cluster users agree on every support type; cross-cluster
    # disagreement mass is 2 * flip_total / K
    arrs = np.stack([t.to_array() for t in m.types])
    w = m.weights
    cluster = np.repeat(np.arange(8), 20)
    u_same, v_same = 0, 1          # both in cluster 0
    u_cross, v_cross = 0, 21       # clusters 0 and 1
    assert cluster[u_same] == cluster[v_same]
    assert cluster[u_cross] != cluster[v_cross]
    disagree_same = float(w @ (arrs[:, u_same] != arrs[:, v_same]))
    disagree_cross = float(w @ (arrs[:, u_cross] != arrs[:, v_cross]))
    assert disagree_same == 0.0
    expected = 2 * space.params["flip_weight"] / 8
    assert disagree_cross == pytest.approx(expected, rel=1e-9)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_measure_json_round_trip():
    space = make_cluster_measure(K=4, n_users=40, nu=0.15, seed=8)
    doc = measure_to_json(space.measure)
    back = measure_from_json(doc)
    assert isinstance(back, FiniteMixture)
    assert [t.bits for t in back.types] == [t.bits for t in space.measure.types]
    assert np.allclose(back.weights, space.measure.weights)
    assert measure_to_json(back) == doc


def test_bitstring_order_is_user_index():
    t = ItemType(5, 0b00001)  # only user 0 likes
    assert t.to_string() == "+----"
    assert measure_to_json(FiniteMixture([t], [1.0]))["types"] == ["+----"]


def test_uniform_cube_round_trip():
    doc = measure_to_json(UniformCube(33))
    back = measure_from_json(doc)
    assert isinstance(back, UniformCube) and back.n_users == 33
