import csv
import math

import numpy as np
import pytest

from levelrec.context_graph import (
    EARTH_RADIUS_M,
    build_graph,
    project_to_meters,
    sigmoid,
)
from levelrec.dataset import Event
from levelrec.errors import MissingCoordinates, UnknownNode

SIG0 = 0.5
SIG1 = 0.7310585786300049


def grid_coords(n):
    # POIs spaced ~1.1km apart on a lat line
    return {f"p{i}": (40.0 + 0.01 * i, 116.0) for i in range(n)}


def test_sigmoid_values():
    assert sigmoid(0.0) == pytest.approx(SIG0, abs=1e-15)
    assert sigmoid(1.0) == pytest.approx(SIG1, abs=1e-15)
    assert sigmoid(-1.0) == pytest.approx(1 - SIG1, abs=1e-15)


def test_projection_scale():
    coords = np.array([[40.0, 116.0], [41.0, 116.0], [40.0, 117.0]])
    xy = project_to_meters(coords, ref_lat_deg=40.0)
    one_deg = math.pi / 180.0 * EARTH_RADIUS_M
    assert xy[1, 1] - xy[0, 1] == pytest.approx(one_deg, rel=1e-9)
    assert xy[2, 0] - xy[0, 0] == pytest.approx(one_deg * math.cos(math.radians(40.0)),
                                                rel=1e-9)


def test_cosearch_window_counting():
    ids = tuple(f"p{i}" for i in range(3))
    searches = [
        Event("u1", "p0", 0),
        Event("u1", "p1", 100),       # within dt1 of p0
        Event("u1", "p2", 5000),      # outside dt1=1800 of both
        Event("u2", "p0", 0),         # different user: no pairing with u1
    ]
    g = build_graph(searches, [], grid_coords(3), 1, ids, dt1=1800, dt2=1800)
    assert g.cosearch_count(0, 1) == 1
    assert g.cosearch_count(1, 0) == 1      # symmetric
    assert g.cosearch_count(0, 2) == 0
    assert g.cosearch_count(1, 2) == 0


def test_covisit_is_ordered_and_skips_simultaneous():
    ids = tuple(f"p{i}" for i in range(3))
    checkins = [
        Event("u1", "p0", 0),
        Event("u1", "p1", 600),       # p0 -> p1
        Event("u1", "p2", 600),       # p1,p2 simultaneous: no direction
        Event("u1", "p0", 3000),      # gap from p1/p2 at 600 exceeds dt2=1800? no: 2400 > 1800
    ]
    g = build_graph([], checkins, grid_coords(3), 1, ids, dt1=1800, dt2=1800)
    assert g.covisit_count(0, 1) == 1
    assert g.covisit_count(1, 0) == 0
    assert g.covisit_count(1, 2) == 0
    assert g.covisit_count(2, 0) == 0
    assert g.covisit_count(0, 2) == 1      # 0@0 -> 2@600


def test_same_poi_pairs_ignored():
    ids = ("p0", "p1")
    evs = [Event("u1", "p0", 0), Event("u1", "p0", 60)]
    g = build_graph(evs, evs, grid_coords(2), 1, ids)
    assert g.cosearch == {} and g.covisit == {}


def test_factor_values():
    ids = tuple(f"p{i}" for i in range(2))
    searches = [Event("u1", "p0", 0), Event("u1", "p1", 10)]
    g = build_graph(searches, [], grid_coords(2), 1, ids)
    f_q, f_v, f_d = g.factors(0, 1)
    assert f_q == pytest.approx(SIG1, abs=1e-12)        # one co-search
    assert f_v == pytest.approx(SIG0, abs=1e-12)        # no co-visit
    dist = g.distance_m(0, 1)
    assert dist == pytest.approx(0.01 * math.pi / 180 * EARTH_RADIUS_M, rel=1e-9)
    assert f_d == pytest.approx(float(sigmoid(1.0 / dist)), abs=1e-12)


def test_distance_factor_floors_at_one_meter():
    coords = {"p0": (40.0, 116.0), "p1": (40.0, 116.0)}   # same spot
    g = build_graph([], [], coords, 1, ("p0", "p1"))
    _, _, f_d = g.factors(0, 1)
    assert f_d == pytest.approx(SIG1, abs=1e-12)          # sigma(1/max(0,1))


def test_factors_by_id_and_unknown():
    ids = ("p0", "p1")
    g = build_graph([], [], grid_coords(2), 1, ids)
    assert g.factors_by_id("p0", "p1") == g.factors(0, 1)
    with pytest.raises(UnknownNode):
        g.factors_by_id("p0", "nope")


def test_missing_coordinates():
    with pytest.raises(MissingCoordinates):
        build_graph([], [], {"p0": (40.0, 116.0)}, 1, ("p0", "p1"))


def test_factor_product_vector_matches_scalar(rng):
    n = 12
    ids = tuple(f"p{i}" for i in range(n))
    coords = {f"p{i}": (40.0 + 0.002 * int(rng.integers(0, 50)),
                        116.0 + 0.002 * int(rng.integers(0, 50)))
              for i in range(n)}
    searches = [Event(f"u{int(rng.integers(4))}", f"p{int(rng.integers(n))}",
                      int(rng.integers(0, 20000))) for _ in range(120)]
    checkins = [Event(f"u{int(rng.integers(4))}", f"p{int(rng.integers(n))}",
                      int(rng.integers(0, 20000))) for _ in range(120)]
    g = build_graph(searches, checkins, coords, 1, ids)
    for j in range(n):
        vec = g.factor_product_vector(j)
        for i in range(n):
            assert vec[i] == pytest.approx(g.factor_product(i, j), abs=1e-12)


def brute_pairs(events, dt, ordered):
    """O(n^2) reference for window-pair counting."""
    by_user = {}
    for ev in events:
        by_user.setdefault(ev.user_id, []).append(ev)
    counts = {}
    for evs in by_user.values():
        evs = sorted(evs, key=lambda e: (e.timestamp, e.poi_id))
        for a in range(len(evs)):
            for b in range(len(evs)):
                if a == b or evs[a].poi_id == evs[b].poi_id:
                    continue
                gap = evs[b].timestamp - evs[a].timestamp
                if ordered:
                    if 0 < gap <= dt:
                        key = (evs[a].poi_id, evs[b].poi_id)
                        counts[key] = counts.get(key, 0) + 1
                else:
                    if 0 <= gap <= dt and (gap > 0 or
                                           (gap == 0 and (evs[a].poi_id, a) < (evs[b].poi_id, b))):
                        key = tuple(sorted((evs[a].poi_id, evs[b].poi_id)))
                        counts[key] = counts.get(key, 0) + 1
    return counts


def test_window_counting_against_brute_force(rng):
    n = 8
    ids = tuple(f"p{i}" for i in range(n))
    coords = grid_coords(n)
    for trial in range(10):
        searches = [Event(f"u{int(rng.integers(3))}", f"p{int(rng.integers(n))}",
                          int(rng.integers(0, 5000))) for _ in range(60)]
        checkins = [Event(f"u{int(rng.integers(3))}", f"p{int(rng.integers(n))}",
                          int(rng.integers(0, 5000))) for _ in range(60)]
        g = build_graph(searches, checkins, coords, 1, ids, dt1=900, dt2=700)
        want_q = brute_pairs(searches, 900, ordered=False)
        got_q = {(ids[i], ids[j]): c for (i, j), c in g.cosearch.items()}
        assert got_q == want_q
        want_v = brute_pairs(checkins, 700, ordered=True)
        got_v = {(ids[i], ids[j]): c for (i, j), c in g.covisit.items()}
        assert got_v == want_v


def test_graph_csv_export(tmp_path):
    ids = ("p0", "p1", "p2")
    searches = [Event("u1", "p0", 0), Event("u1", "p1", 10)]
    checkins = [Event("u2", "p2", 0), Event("u2", "p0", 30)]
    g = build_graph(searches, checkins, grid_coords(3), 2, ids)
    path = tmp_path / "graph.csv"
    from levelrec.context_graph import save_graph_csv

    save_graph_csv(g, path)
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    keys = {(r["poi_i"], r["poi_j"]) for r in rows}
    # cosearch pairs appear in both orientations, covisit in its direction
    assert ("p0", "p1") in keys and ("p1", "p0") in keys
    assert ("p2", "p0") in keys
    row01 = next(r for r in rows if (r["poi_i"], r["poi_j"]) == ("p0", "p1"))
    assert float(row01["f_q"]) == pytest.approx(SIG1, abs=1e-12)
    assert all(r["level"] == "2" for r in rows)
