import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermo_billiards.errors import InvalidState, NoCollisionWithinCap
from thermo_billiards.geometry import (
    BilliardTable,
    BoundaryPoint,
    Disk,
    Overlap,
    SelfOverlap,
    boundary_point_frame,
    next_collision,
    probe_horizon,
    reference_table,
    sample_boundary,
    single_disk_table,
    validate_table,
    wrap,
)
from thermo_billiards.rng import RngStream

TOL = 1e-9


def test_overlap_reported():
    d = 0.2 + 0.2 - 0.01
    t = BilliardTable((Disk((0.3, 0.5), 0.2), Disk((0.3 + d, 0.5), 0.2)))
    rep = validate_table(t)
    assert any(isinstance(v, Overlap) and (v.i, v.j) == (0, 1) for v in rep.violations)
    assert "Overlap(0,1)" in str(rep)


def test_self_overlap_reported():
    rep = validate_table(BilliardTable((Disk((0.5, 0.5), 0.6),)))
    assert SelfOverlap(0) in rep.violations


def test_three_disk_table_is_valid_geometry():
    t = BilliardTable((Disk((0.25, 0.25), 0.22), Disk((0.75, 0.25), 0.22), Disk((0.5, 0.75), 0.22)))
    assert validate_table(t).ok


def test_reference_table_valid(table):
    assert validate_table(table).ok


def test_overlap_across_the_seam():
    t = BilliardTable((Disk((0.05, 0.5), 0.1), Disk((0.95, 0.5), 0.1)))
    assert not validate_table(t).ok


def test_head_on_hit(disk_table):
    hit = next_collision(disk_table, (0.0, 0.5), (1.0, 0.0))
    assert hit.point.disk_id == 0
    assert abs(hit.point.theta - math.pi) < TOL
    assert abs(hit.flight_length - 0.25) < TOL
    assert abs(hit.incoming_angle) < TOL


def test_wrapping_hit(disk_table):
    hit = next_collision(disk_table, (0.0, 0.5), (-1.0, 0.0))
    assert abs(hit.point.theta % (2 * math.pi)) < TOL or abs(hit.point.theta - 2 * math.pi) < TOL
    assert abs(hit.flight_length - 0.25) < TOL
    assert abs(hit.incoming_angle) < TOL


def test_open_corridor_raises():
    t = single_disk_table(0.25, sigma_cap=3.0)
    with pytest.raises(NoCollisionWithinCap):
        next_collision(t, (0.0, 0.0), (1.0, 0.0))


def test_inside_disk_rejected(disk_table):
    with pytest.raises(InvalidState):
        next_collision(disk_table, (0.5, 0.5), (1.0, 0.0))


def test_non_unit_direction_rejected(disk_table):
    with pytest.raises(InvalidState):
        next_collision(disk_table, (0.0, 0.5), (2.0, 0.0))


@pytest.mark.parametrize(
    "theta, pos, normal, tangent",
    [
        (math.pi, (0.25, 0.5), (-1.0, 0.0), (0.0, -1.0)),
        (0.0, (0.75, 0.5), (1.0, 0.0), (0.0, 1.0)),
        (math.pi / 2, (0.5, 0.75), (0.0, 1.0), (-1.0, 0.0)),
    ],
)
def test_boundary_frame(disk_table, theta, pos, normal, tangent):
    p, n, t = boundary_point_frame(disk_table, BoundaryPoint(0, theta))
    assert np.allclose(p, pos, atol=TOL, rtol=0)
    assert np.allclose(n, normal, atol=TOL, rtol=0)
    assert np.allclose(t, tangent, atol=TOL, rtol=0)


def test_frame_bad_disk(disk_table):
    with pytest.raises(InvalidState):
        boundary_point_frame(disk_table, BoundaryPoint(3, 0.0))


def test_wrap():
    assert wrap((1.25, -0.25)) == (0.25, 0.75)
    assert wrap((-1e-18, 0.0))[0] < 1.0


def _random_departures(table, n, seed):
    rng = RngStream(seed, 1)
    ids, thetas = sample_boundary(table, rng, n)
    phis = (rng.uniforms(n) - 0.5) * math.pi * 0.98
    for i, th, ph in zip(ids, thetas, phis):
        pt = BoundaryPoint(int(i), float(th))
        pos, n_, t_ = boundary_point_frame(table, pt)
        d = (math.cos(ph) * n_[0] + math.sin(ph) * t_[0], math.cos(ph) * n_[1] + math.sin(ph) * t_[1])
        yield pt, pos, d


def _torus_close(a, b, tol):
    return all(abs((x - y + 0.5) % 1.0 - 0.5) <= tol for x, y in zip(a, b))


def test_hits_lie_on_circles(table):
    for pt, pos, d in _random_departures(table, 2000, 3):
        hit = next_collision(table, pos, d, skip_source=pt)
        p, _, _ = boundary_point_frame(table, hit.point)
        q = (pos[0] + hit.flight_length * d[0], pos[1] + hit.flight_length * d[1])
        assert _torus_close(p, wrap(q), TOL)
        assert abs(hit.incoming_angle) < math.pi / 2


def test_reciprocity(table):
    for pt, pos, d in _random_departures(table, 10_000, 4):
        hit = next_collision(table, pos, d, skip_source=pt)
        there, _, _ = boundary_point_frame(table, hit.point)
        back = next_collision(table, there, (-d[0], -d[1]), skip_source=hit.point)
        assert back.point.disk_id == pt.disk_id
        p, _, _ = boundary_point_frame(table, back.point)
        assert _torus_close(p, pos, TOL)
        assert abs(back.flight_length - hit.flight_length) < TOL


def test_translation_invariance(table):
    rng = RngStream(11, 0)
    shifts = np.floor((rng.uniforms(2 * 10_000) - 0.5) * 20).reshape(-1, 2)
    for (pt, pos, d), (kx, ky) in zip(_random_departures(table, 10_000, 5), shifts):
        a = next_collision(table, pos, d, skip_source=pt)
        moved = wrap((pos[0] + kx, pos[1] + ky))
        b = next_collision(table, moved, d, skip_source=pt)
        assert b.flight_length == a.flight_length or abs(b.flight_length - a.flight_length) < TOL
        assert b.point.disk_id == a.point.disk_id


@settings(max_examples=50, deadline=None)
@given(x=st.floats(0, 1, exclude_max=True), y=st.floats(0, 1, exclude_max=True),
       a=st.floats(0, 2 * math.pi))
def test_free_points_hit_within_cap(x, y, a):
    t = reference_table()
    dx, dy = t.cx - x, t.cy - y
    dx, dy = (dx + 0.5) % 1 - 0.5, (dy + 0.5) % 1 - 0.5
    if np.any(np.hypot(dx, dy) < t.radii + 1e-6):
        return
    hit = next_collision(t, (x, y), (math.cos(a), math.sin(a)))
    assert 0 < hit.flight_length <= t.sigma_cap


def test_probe_reference_table(table):
    h = probe_horizon(table, 100_000, RngStream(1, 0))
    assert h.violations == 0
    assert 0 < h.sigma_min_hat <= h.sigma_max_hat <= table.sigma_cap


def test_probe_single_disk_finds_corridors():
    h = probe_horizon(single_disk_table(0.25, sigma_cap=10.0), 10_000, RngStream(1, 0))
    assert h.violations > 0


def test_probe_single_ray(table):
    h = probe_horizon(table, 1, RngStream(2, 0))
    assert h.sigma_min_hat == h.sigma_max_hat


def test_corridor_width_matches_escape_geometry():
    # a disk of radius R leaves horizontal/vertical corridors of width 1 - 2R;
    # rays escape only when nearly aligned with them
    r = 0.45
    h = probe_horizon(single_disk_table(r, sigma_cap=10.0), 20_000, RngStream(3, 0))
    wide = probe_horizon(single_disk_table(0.2, sigma_cap=10.0), 20_000, RngStream(3, 0))
    assert 0 < h.violations < wide.violations
