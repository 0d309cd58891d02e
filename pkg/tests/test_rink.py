import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from puckloc.rink import (
    FIVE_ZONES,
    THREE_ZONES,
    DomainError,
    HeatmapPoint,
    RinkPoint,
    ZonePartition,
    heatmap_to_rink,
    make_scaling_transform,
    rink_to_heatmap,
    zone_indices,
    zone_of,
    zone_partition,
)

from . import oracles

T64 = make_scaling_transform(64, 64)


@pytest.mark.parametrize(
    "w,h,sx,sy",
    [(64, 64, 0.32, 64 / 85), (200, 85, 1.0, 1.0), (128, 128, 0.64, 128 / 85)],
)
def test_scale_factors(w, h, sx, sy):
    t = make_scaling_transform(w, h)
    assert t.sx == pytest.approx(sx, abs=1e-12)
    assert t.sy == pytest.approx(sy, abs=1e-12)
    np.testing.assert_allclose(t.matrix, np.diag([sx, sy, 1.0]), atol=1e-12)


def test_scale_factor_decimals():
    assert round(T64.sy, 6) == 0.752941
    assert round(make_scaling_transform(128, 128).sy, 6) == 1.505882


@pytest.mark.parametrize("w,h", [(0, 64), (64, -1), (2.5, 64)])
def test_bad_dimensions(w, h):
    with pytest.raises(ValueError):
        make_scaling_transform(w, h)


@pytest.mark.parametrize(
    "p,q",
    [((0, 0), (0, 0)), ((100, 42.5), (32, 32)), ((150, 20), (48, 1280 / 85))],
)
def test_forward_examples(p, q):
    out = rink_to_heatmap(T64, RinkPoint(*p))
    assert out.u == pytest.approx(q[0], abs=1e-12)
    assert out.v == pytest.approx(q[1], abs=1e-12)
    exact = oracles.tau(64, 64, *p)
    assert out.u == pytest.approx(float(exact[0]), abs=1e-12)
    assert out.v == pytest.approx(float(exact[1]), abs=1e-12)


@pytest.mark.parametrize(
    "q,p,tol",
    [((32, 32), (100, 42.5), 1e-12), ((64, 64), (200, 85), 1e-12), ((48, 15.0588235294117647), (150, 20), 1e-9)],
)
def test_inverse_examples(q, p, tol):
    out = heatmap_to_rink(T64, HeatmapPoint(*q))
    assert out.x == pytest.approx(p[0], abs=tol)
    assert out.y == pytest.approx(p[1], abs=tol)


def test_forward_rejects_off_rink():
    with pytest.raises(DomainError):
        rink_to_heatmap(T64, (201.0, 10.0))
    with pytest.raises(DomainError):
        RinkPoint(-0.1, 3.0)


def test_inverse_rejects_outside_grid():
    with pytest.raises(DomainError):
        heatmap_to_rink(T64, HeatmapPoint(64.5, 10))
    with pytest.raises(DomainError):
        heatmap_to_rink(T64, HeatmapPoint(3, -1))


def test_round_trip_1000_points():
    rng = np.random.default_rng(11)
    xs = rng.uniform(0, 200, 1000)
    ys = rng.uniform(0, 85, 1000)
    worst = 0.0
    for x, y in zip(xs, ys):
        back = heatmap_to_rink(T64, rink_to_heatmap(T64, RinkPoint(x, y)))
        worst = max(worst, abs(back.x - x), abs(back.y - y))
    assert worst < 1e-9


@given(
    st.floats(0, 200, allow_nan=False),
    st.floats(0, 85, allow_nan=False),
    st.integers(1, 512),
    st.integers(1, 512),
)
def test_round_trip_any_grid(x, y, w, h):
    t = make_scaling_transform(w, h)
    back = heatmap_to_rink(t, rink_to_heatmap(t, RinkPoint(x, y)))
    assert abs(back.x - x) < 1e-9 and abs(back.y - y) < 1e-9


@pytest.mark.parametrize(
    "p,zp,label",
    [((10, 40), THREE_ZONES, "defensive"), ((100, 40), THREE_ZONES, "neutral"), ((190, 40), FIVE_ZONES, "offensive-deep")],
)
def test_zone_examples(p, zp, label):
    assert zone_of(RinkPoint(*p), zp) == label


@pytest.mark.parametrize("zp", [THREE_ZONES, FIVE_ZONES])
def test_cut_points_go_to_higher_zone(zp):
    for k, c in enumerate(zp.cut_xs):
        assert zone_of(RinkPoint(c, 10), zp) == zp.labels[k + 1]
        assert zone_of(RinkPoint(np.nextafter(c, 0), 10), zp) == zp.labels[k]


@pytest.mark.parametrize("zp", [THREE_ZONES, FIVE_ZONES])
def test_vectorised_zones_match_oracle(zp):
    xs = np.concatenate([np.linspace(0, 200, 801), zp.cut_xs])
    got = zone_indices(xs, zp)
    want = [zp.labels.index(oracles.zone_of(x, zp.cut_xs, zp.labels)) for x in xs]
    assert got.tolist() == want


def test_partitions_cover_rink():
    for zp in (THREE_ZONES, FIVE_ZONES):
        iv = zp.intervals()
        assert iv[0][0] == 0 and iv[-1][1] == 200
        assert all(a[1] == b[0] for a, b in zip(iv, iv[1:]))
    assert zone_partition(3) is THREE_ZONES and zone_partition(5) is FIVE_ZONES
    assert not THREE_ZONES.mirrored and FIVE_ZONES.mirrored


@pytest.mark.parametrize(
    "cuts,labels",
    [((125, 75), ("a", "b", "c")), ((0, 75), ("a", "b", "c")), ((75,), ("a", "b", "c")), ((75,), ("a", "a"))],
)
def test_invalid_partitions(cuts, labels):
    with pytest.raises(ValueError):
        ZonePartition(cuts, labels)
    with pytest.raises(ValueError):
        zone_partition(4)
