#!/usr/bin/env python3
"""Test script for the geometry module.

Containment and penetration are checked against brute-force point sampling
that does not share code with the module under test.
"""

import logging
import math
import sys

import numpy as np
import pytest

from peginsert.errors import InvalidShape, NonConvexShape, NonPositiveClearance, UnknownShape
from peginsert.geometry import (
    CrossSection,
    PlanarPose,
    area,
    bottom_face_contact_samples,
    contains,
    equilateral_triangle,
    gap_proportion,
    get_shape,
    hole_for_clearance,
    hole_for_gap_proportion,
    load_shape_catalogue,
    overlap_depth,
    penetration,
    points_inside,
    wrap_angle,
)

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)
logger = logging.getLogger("test_geometry")

BAND = 0.05


def _peg_boundary(peg, pose, spacing=0.02):
    """World points along the peg outline, at most `spacing` mm apart."""
    if peg.is_circle:
        count = int(math.ceil(2 * math.pi * peg.radius / spacing))
        phis = np.linspace(0.0, 2 * math.pi, count, endpoint=False)
        local = peg.radius * np.stack([np.cos(phis), np.sin(phis)], axis=1)
        return pose.apply(local)
    corners = peg.vertices
    chunks = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        count = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)))
        t = np.linspace(0.0, 1.0, count, endpoint=False)[:, None]
        chunks.append(a + t * (b - a))
    return pose.apply(np.concatenate(chunks))


def _peg_interior(peg, pose, count, rng):
    """Uniform random world points inside the peg (rejection sampling)."""
    reach = peg.bounding_radius
    found = []
    while sum(len(c) for c in found) < count:
        candidates = rng.uniform(-reach, reach, size=(4 * count, 2))
        if peg.is_circle:
            keep = np.linalg.norm(candidates, axis=1) <= peg.radius
        else:
            corners = peg.vertices
            edges = np.roll(corners, -1, axis=0) - corners
            rel = candidates[:, None, :] - corners[None, :, :]
            cross = edges[None, :, 0] * rel[..., 1] - edges[None, :, 1] * rel[..., 0]
            keep = np.all(cross >= 0, axis=1)
        found.append(candidates[keep])
    return pose.apply(np.concatenate(found)[:count])


def _outside_distance(hole, hole_pose, points):
    """Brute-force distance of world points outside the hole (0 inside)."""
    if hole.is_circle:
        centre = np.array([hole_pose.x, hole_pose.y])
        return np.maximum(np.linalg.norm(points - centre, axis=1) - hole.radius, 0.0)
    corners = hole_pose.apply(hole.vertices)
    edges = np.roll(corners, -1, axis=0) - corners
    rel = points[:, None, :] - corners[None, :, :]
    cross = edges[None, :, 0] * rel[..., 1] - edges[None, :, 1] * rel[..., 0]
    inside = np.all(cross >= 0, axis=1)
    t = np.clip((rel * edges[None]).sum(axis=2) / (edges**2).sum(axis=1), 0.0, 1.0)
    closest = corners[None] + t[..., None] * edges[None]
    distance = np.linalg.norm(points[:, None, :] - closest, axis=2).min(axis=1)
    distance[inside] = 0.0
    return distance


def _random_convex(rng, radius):
    count = int(rng.integers(3, 9))
    phis = np.sort(rng.uniform(0, 2 * math.pi, count))
    return CrossSection.polygon(radius * np.stack([np.cos(phis), np.sin(phis)], axis=1), "random")


def test_polygon_normalization():
    """Clockwise input is reversed and the centroid moved to the origin."""
    clockwise = [(10, 10), (10, 30), (40, 30), (40, 10)]
    square = CrossSection.polygon(clockwise, "rect")
    logger.info(f"Normalized rectangle: {square.vertices.tolist()}")

    assert square.area == pytest.approx(600.0)
    assert square.perimeter == pytest.approx(100.0)
    np.testing.assert_allclose(square.vertices.mean(axis=0), [0.0, 0.0], atol=1e-12)
    edges = np.roll(square.vertices, -1, axis=0) - square.vertices
    turns = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
    assert np.all(turns > 0)


def test_polygon_rejects_bad_outlines():
    with pytest.raises(NonConvexShape):
        CrossSection.polygon([(0, 0), (10, 0), (3, 3), (0, 10)])
    with pytest.raises(NonConvexShape):
        star = [(math.cos(a), math.sin(a)) for a in np.radians([90, 234, 18, 162, 306])]
        CrossSection.polygon(star)
    with pytest.raises(InvalidShape):
        CrossSection.polygon([(0, 0), (1, 1), (2, 2)])
    with pytest.raises(InvalidShape):
        CrossSection.circle(0.0)


def test_collinear_vertices_dropped():
    shape = CrossSection.polygon([(0, 0), (5, 0), (10, 0), (10, 10), (0, 10)])
    assert len(shape.vertices) == 4


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert PlanarPose(0, 0, 7.0).yaw == pytest.approx(7.0 - 2 * math.pi)


def test_contains_identity():
    triangle = equilateral_triangle(30.0)
    pose = PlanarPose(3.0, -2.0, 0.4)
    assert contains(triangle, pose, triangle, pose)
    assert overlap_depth(triangle, pose, triangle, pose) == 0.0


def test_concentric_circles():
    """Concentric circle containment follows r_hole - r_peg exactly."""
    peg = CrossSection.circle(10.0)
    hole = CrossSection.circle(12.0)
    for yaw in np.linspace(-3.0, 3.0, 7):
        assert contains(hole, PlanarPose(), peg, PlanarPose(0, 0, yaw))
    assert contains(hole, PlanarPose(), peg, PlanarPose(2.0, 0.0))
    assert not contains(hole, PlanarPose(), peg, PlanarPose(2.001, 0.0))

    depth = overlap_depth(hole, PlanarPose(), peg, PlanarPose(3.0, 0.0))
    logger.info(f"Circle overlap at 3 mm offset: {depth}")
    assert depth == pytest.approx(1.0, abs=1e-12)

    result = penetration(hole, PlanarPose(), peg, PlanarPose(0.0, 3.0))
    np.testing.assert_allclose(result.direction, [0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(result.point, [0.0, 13.0], atol=1e-12)


def test_triangle_symmetric_yaw():
    """The clearance hole accepts the peg at the 120 degree symmetry but not at 60."""
    peg = get_shape("tr")
    hole = hole_for_clearance(peg, 4.0)
    assert peg.symmetry_order == 3
    assert contains(hole, PlanarPose(), peg, PlanarPose(0, 0, math.radians(120)))
    assert not contains(hole, PlanarPose(), peg, PlanarPose(0, 0, math.radians(60)))

    rng = np.random.default_rng(3)
    peg_pose = PlanarPose(0, 0, math.radians(30))
    boundary = _peg_boundary(peg, peg_pose)
    oracle = _outside_distance(hole, PlanarPose(), boundary).max()
    logger.info(f"30 degree oracle exit: {oracle:.4f} mm")
    assert contains(hole, PlanarPose(), peg, peg_pose) == (oracle == 0.0)
    interior = _peg_interior(peg, peg_pose, 20000, rng)
    assert np.all(points_inside(hole, PlanarPose(), interior)) == (
        _outside_distance(hole, PlanarPose(), interior).max() == 0.0
    )


def test_overlap_depth_matches_sampling():
    """Rotated triangle in a tight hole: depth agrees with dense boundary sampling."""
    peg = get_shape("tr")
    hole = hole_for_clearance(peg, 0.5)
    peg_pose = PlanarPose(0.2, -0.1, math.radians(10))
    depth = overlap_depth(hole, PlanarPose(), peg, peg_pose)
    oracle = _outside_distance(hole, PlanarPose(), _peg_boundary(peg, peg_pose, 0.005)).max()
    logger.info(f"Rotated triangle depth {depth:.4f} mm, oracle {oracle:.4f} mm")
    assert depth > 0
    assert depth == pytest.approx(oracle, abs=0.05)


def test_penetration_direction_restores_containment():
    peg = get_shape("tr")
    hole = hole_for_clearance(peg, 1.0)
    peg_pose = PlanarPose(2.5, 0.0, 0.0)
    result = penetration(hole, PlanarPose(), peg, peg_pose)
    assert result.depth > 0
    assert np.linalg.norm(result.direction) == pytest.approx(1.0)
    shift = (result.depth + 1e-6) * result.direction
    moved = PlanarPose(peg_pose.x + shift[0], peg_pose.y + shift[1], peg_pose.yaw)
    assert overlap_depth(hole, PlanarPose(), peg, moved) < result.depth


def test_rigid_transform_invariance():
    rng = np.random.default_rng(11)
    peg = get_shape("trm")
    hole = hole_for_clearance(peg, 1.5)
    for _ in range(50):
        peg_pose = PlanarPose(*rng.uniform(-2, 2, 2), rng.uniform(-0.3, 0.3))
        frame = PlanarPose(*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi))
        moved_hole = PlanarPose(frame.x, frame.y, frame.yaw)
        moved_peg_xy = frame.apply([[peg_pose.x, peg_pose.y]])[0]
        moved_peg = PlanarPose(moved_peg_xy[0], moved_peg_xy[1], peg_pose.yaw + frame.yaw)
        assert contains(hole, PlanarPose(), peg, peg_pose) == contains(hole, moved_hole, peg, moved_peg)
        assert overlap_depth(hole, PlanarPose(), peg, peg_pose) == pytest.approx(
            overlap_depth(hole, moved_hole, peg, moved_peg), abs=1e-9
        )


def test_monte_carlo_oracle():
    """contains/overlap_depth agree with point sampling outside the boundary band."""
    rng = np.random.default_rng(2024)
    catalogue = load_shape_catalogue()
    names = sorted(catalogue)
    checked = 0
    for trial in range(150):
        if trial % 3 == 0:
            peg = _random_convex(rng, rng.uniform(5, 15))
        else:
            peg = catalogue[names[trial % len(names)]]
        if trial % 4 == 0:
            hole = CrossSection.circle(peg.bounding_radius + rng.uniform(0.2, 3.0))
        else:
            hole = hole_for_clearance(peg, rng.uniform(0.2, 3.0))
        hole_pose = PlanarPose(*rng.uniform(-20, 20, 2), rng.uniform(-math.pi, math.pi))
        offset = hole_pose.apply([rng.uniform(-3, 3, 2)])[0]
        peg_pose = PlanarPose(offset[0], offset[1], hole_pose.yaw + rng.uniform(-0.4, 0.4))

        boundary = _peg_boundary(peg, peg_pose)
        interior = _peg_interior(peg, peg_pose, 2000, rng)
        oracle_depth = max(
            _outside_distance(hole, hole_pose, boundary).max(),
            _outside_distance(hole, hole_pose, interior).max(),
        )
        depth = overlap_depth(hole, hole_pose, peg, peg_pose)
        inside = contains(hole, hole_pose, peg, peg_pose)

        if oracle_depth > BAND:
            assert not inside, f"trial {trial}: sampled exit {oracle_depth:.3f} mm but contained"
            assert depth == pytest.approx(oracle_depth, abs=BAND)
        elif oracle_depth == 0.0:
            assert depth <= BAND, f"trial {trial}: no sampled exit but depth {depth:.3f} mm"
        if inside:
            assert depth == 0.0
        if depth > 0:
            assert not inside
        checked += 1
    logger.info(f"Checked {checked} randomized configurations")
    assert checked == 150


def test_gap_proportion():
    peg = CrossSection.circle(10.0)
    hole = CrossSection.circle(10.5408)
    assert gap_proportion(peg, hole) == pytest.approx(0.1, abs=1e-4)
    assert area(peg) == pytest.approx(math.pi * 100.0)

    with pytest.raises(NonPositiveClearance):
        gap_proportion(peg, CrossSection.circle(10.0))
    with pytest.raises(NonPositiveClearance):
        hole_for_clearance(peg, 0.0)

    triangle = get_shape("tr")
    for target in (0.263, 0.078):
        scaled_hole = hole_for_gap_proportion(triangle, target)
        assert gap_proportion(triangle, scaled_hole) == pytest.approx(target, abs=1e-9)
        assert contains(scaled_hole, PlanarPose(), triangle, PlanarPose())

    dilated = hole_for_clearance(triangle, 4.0)
    logger.info(f"4 mm dilation of tr gives proportion {gap_proportion(triangle, dilated):.4f}")
    assert 0.5 < gap_proportion(triangle, dilated) < 0.52


def test_gap_proportion_scale_consistent():
    peg = get_shape("trm")
    hole = hole_for_clearance(peg, 2.0)
    for factor in (0.5, 2.0, 3.7):
        assert gap_proportion(peg.scaled(factor), hole.scaled(factor)) == pytest.approx(
            gap_proportion(peg, hole), rel=1e-9
        )


def test_contact_samples_minimal_and_identity():
    triangle = get_shape("tr")
    samples = bottom_face_contact_samples(triangle, PlanarPose(), 3)
    np.testing.assert_allclose(samples, triangle.vertices, atol=1e-12)

    local = triangle.local_contact_samples(40)
    np.testing.assert_allclose(bottom_face_contact_samples(triangle, PlanarPose(), 40), local)

    with pytest.raises(ValueError):
        bottom_face_contact_samples(triangle, PlanarPose(), 2)


@pytest.mark.parametrize("name", ["tr", "cir", "rtr", "trm", "b-trm"])
def test_contact_samples_centred(name):
    peg = get_shape(name)
    pose = PlanarPose(4.0, -7.0, 0.7)
    for n in (100, 137):
        samples = bottom_face_contact_samples(peg, pose, n)
        assert samples.shape == (n, 2)
        assert np.all(points_inside(peg, pose, samples))
        centre = samples.mean(axis=0)
        logger.info(f"{name} n={n}: sample centroid {centre}")
        np.testing.assert_allclose(centre, [pose.x, pose.y], atol=0.01)


def test_catalogue():
    catalogue = load_shape_catalogue()
    assert set(catalogue) == {"tr", "cir", "rtr", "trm", "b-rtr", "b-trm"}
    assert catalogue["cir"].is_circle
    assert len(catalogue["rtr"].vertices) == 96
    assert catalogue["b-trm"].area == pytest.approx(1.25**2 * catalogue["trm"].area)
    assert catalogue["rtr"].symmetry_order == 3
    assert catalogue["trm"].symmetry_order == 1
    with pytest.raises(UnknownShape):
        get_shape("hexagon")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
