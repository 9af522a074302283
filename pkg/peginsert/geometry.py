"""Planar cross-sections and the containment queries built on them.

Pegs and holes are convex outlines in the plate plane. A CrossSection is
stored in a local frame centred on its area centroid; a PlanarPose places it
in the world. All lengths are millimetres and all angles radians.
"""

import functools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Union

import numpy as np
import yaml

from peginsert.errors import (
    InvalidShape,
    NonConvexShape,
    NonPositiveClearance,
    UnknownShape,
)

# Set up logging
logger = logging.getLogger(__name__)

DEFAULT_CATALOGUE_FILE = Path(__file__).parent / "shapes.yaml"

# Points this close to a hole boundary count as inside
BOUNDARY_EPS = 1e-9

# Arc resolution for dilated corners: segments per 120 degrees of turn
ARC_SEGMENTS = 64

# Vertex count used when a circle has to be treated as a polygon
CIRCLE_SEGMENTS = 96

_REL_TOL = 1e-12


def wrap_angle(angle: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = math.remainder(float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


def _rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class PlanarPose:
    """Position and yaw of a cross-section in the plate plane."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return _rotation(self.yaw)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map local-frame points (N, 2) into the world."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return points @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points (N, 2) into this pose's local frame."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return (points - self.translation) @ self.rotation

    def relative_to(self, frame: "PlanarPose") -> "PlanarPose":
        """Express this pose in the local frame of another pose."""
        local = frame.inverse_apply(self.translation)[0]
        return PlanarPose(local[0], local[1], self.yaw - frame.yaw)


class ShapeKind(str, Enum):
    POLYGON = "polygon"
    CIRCLE = "circle"


def _signed_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _polygon_centroid(points: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return np.array([cx, cy])


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _clean_outline(points: np.ndarray) -> np.ndarray:
    """Drop repeated and collinear vertices from a closed outline."""
    scale = max(float(np.abs(points).max()), 1.0)
    keep = np.linalg.norm(points - np.roll(points, 1, axis=0), axis=1) > _REL_TOL * scale
    points = points[keep]

    changed = True
    while changed and len(points) >= 3:
        prev_edge = points - np.roll(points, 1, axis=0)
        next_edge = np.roll(points, -1, axis=0) - points
        turn = _cross(prev_edge, next_edge)
        lengths = np.linalg.norm(prev_edge, axis=1) * np.linalg.norm(next_edge, axis=1)
        collinear = (np.abs(turn) <= _REL_TOL * lengths) & (
            np.einsum("ij,ij->i", prev_edge, next_edge) > 0
        )
        changed = bool(collinear.any())
        if changed:
            points = points[~collinear]
    return points


@dataclass(frozen=True, eq=False)
class CrossSection:
    """Convex polygon or circle, centred on its area centroid.

    Build instances with CrossSection.polygon() or CrossSection.circle();
    both normalize the input so the stored outline is counter-clockwise and
    the centroid sits at the local origin.
    """

    kind: ShapeKind
    vertices: np.ndarray
    radius: float = 0.0
    name: str = ""

    @classmethod
    def polygon(cls, vertices, name: str = "") -> "CrossSection":
        """Build a convex polygon from vertices in either winding.

        Args:
            vertices: Sequence of (x, y) points in millimetres
            name: Catalogue name carried for logging

        Returns:
            The recentred, counter-clockwise polygon

        Raises:
            InvalidShape: If the outline has zero area
            NonConvexShape: If the outline is concave or self-intersecting
        """
        points = np.asarray(vertices, dtype=float).reshape(-1, 2)
        if len(points) < 3:
            raise InvalidShape(f"Polygon '{name}' needs at least 3 vertices")
        if not np.all(np.isfinite(points)):
            raise InvalidShape(f"Polygon '{name}' has non-finite vertices")

        points = _clean_outline(points)
        if len(points) < 3 or abs(_signed_area(points)) <= _REL_TOL:
            raise InvalidShape(f"Polygon '{name}' has zero area")
        if _signed_area(points) < 0:
            points = points[::-1].copy()

        edges = np.roll(points, -1, axis=0) - points
        next_edges = np.roll(edges, -1, axis=0)
        turn = _cross(edges, next_edges)
        if np.any(turn <= 0):
            raise NonConvexShape(f"Polygon '{name}' is not convex")
        turning = np.arctan2(turn, np.einsum("ij,ij->i", edges, next_edges)).sum()
        if turning > 2.0 * math.pi + 1e-6:
            raise NonConvexShape(f"Polygon '{name}' winds more than once")

        points = points - _polygon_centroid(points)
        points.setflags(write=False)
        return cls(ShapeKind.POLYGON, points, 0.0, name)

    @classmethod
    def circle(cls, radius: float, name: str = "") -> "CrossSection":
        if not radius > 0 or not math.isfinite(radius):
            raise InvalidShape(f"Circle '{name}' needs a positive radius, got {radius}")
        empty = np.zeros((0, 2))
        empty.setflags(write=False)
        return cls(ShapeKind.CIRCLE, empty, float(radius), name)

    @property
    def is_circle(self) -> bool:
        return self.kind is ShapeKind.CIRCLE

    @functools.cached_property
    def area(self) -> float:
        if self.is_circle:
            return math.pi * self.radius**2
        return _signed_area(self.vertices)

    @functools.cached_property
    def perimeter(self) -> float:
        if self.is_circle:
            return 2.0 * math.pi * self.radius
        edges = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.linalg.norm(edges, axis=1).sum())

    @functools.cached_property
    def bounding_radius(self) -> float:
        """Largest distance from the centroid to the outline."""
        if self.is_circle:
            return self.radius
        return float(np.linalg.norm(self.vertices, axis=1).max())

    @functools.cached_property
    def edge_normals(self) -> np.ndarray:
        """Outward unit normals, one per edge (vertex i to i+1)."""
        edges = np.roll(self.vertices, -1, axis=0) - self.vertices
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
        return normals / np.linalg.norm(normals, axis=1, keepdims=True)

    @functools.cached_property
    def edge_offsets(self) -> np.ndarray:
        """Half-plane offsets h_i so that inside means n_i . p <= h_i."""
        return np.einsum("ij,ij->i", self.edge_normals, self.vertices)

    @functools.cached_property
    def symmetry_order(self) -> int:
        """Order of the rotational symmetry group; 0 for a circle."""
        if self.is_circle:
            return 0
        n = len(self.vertices)
        tol = 1e-6 * max(self.bounding_radius, 1.0)
        for order in range(n, 1, -1):
            if n % order:
                continue
            rotated = self.vertices @ _rotation(2.0 * math.pi / order).T
            gaps = np.linalg.norm(rotated[:, None, :] - self.vertices[None, :, :], axis=2)
            if np.all(gaps.min(axis=1) <= tol):
                return order
        return 1

    def scaled(self, factor: float) -> "CrossSection":
        if not factor > 0:
            raise InvalidShape(f"Scale factor must be positive, got {factor}")
        if self.is_circle:
            return CrossSection.circle(self.radius * factor, self.name)
        return CrossSection.polygon(self.vertices * factor, self.name)

    def dilated(self, distance: float, arc_segments: int = ARC_SEGMENTS) -> "CrossSection":
        """Minkowski sum with a disc, corners rounded by polyline arcs.

        Args:
            distance: Disc radius in millimetres (>= 0)
            arc_segments: Segments per 120 degrees of corner turn

        Returns:
            The dilated outline (a circle stays a circle)
        """
        if distance < 0:
            raise InvalidShape(f"Dilation distance must be >= 0, got {distance}")
        if distance == 0:
            return self
        if self.is_circle:
            return CrossSection.circle(self.radius + distance, self.name)

        normals = self.edge_normals
        angles = np.arctan2(normals[:, 1], normals[:, 0])
        outline = []
        for i, vertex in enumerate(self.vertices):
            start = angles[i - 1]
            turn = (angles[i] - start) % (2.0 * math.pi)
            steps = max(1, math.ceil(arc_segments * turn / (2.0 * math.pi / 3.0) - 1e-9))
            phis = start + turn * np.arange(steps + 1) / steps
            outline.append(vertex + distance * np.stack([np.cos(phis), np.sin(phis)], axis=1))
        return CrossSection.polygon(np.concatenate(outline), self.name)

    def as_polygon(self, segments: int = CIRCLE_SEGMENTS) -> "CrossSection":
        """Polygon view of the shape; circles become inscribed regular polygons."""
        if not self.is_circle:
            return self
        return regular_polygon(segments, self.radius, start_angle=0.0, name=self.name)

    def world_vertices(self, pose: PlanarPose) -> np.ndarray:
        return pose.apply(self.as_polygon().vertices)

    @functools.lru_cache(maxsize=8)
    def local_contact_samples(self, n: int) -> np.ndarray:
        """Bottom-face samples in the local frame; see bottom_face_contact_samples."""
        return _contact_samples(self, n)

    def __repr__(self) -> str:
        if self.is_circle:
            return f"CrossSection(circle '{self.name}', r={self.radius:.4g})"
        return f"CrossSection(polygon '{self.name}', {len(self.vertices)} vertices)"


class Penetration(NamedTuple):
    """Deepest exit of a peg outline from its hole.

    direction is the world-frame unit vector that moves point back toward
    the hole interior; both are zero vectors when depth is 0.
    """

    depth: float
    direction: np.ndarray
    point: np.ndarray


_NO_PENETRATION = Penetration(0.0, np.zeros(2), np.zeros(2))


def _inside_local(shape: CrossSection, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
    if shape.is_circle:
        return np.linalg.norm(points, axis=1) <= shape.radius - margin + BOUNDARY_EPS
    values = points @ shape.edge_normals.T - shape.edge_offsets
    return np.all(values <= -margin + BOUNDARY_EPS, axis=1)


def points_inside(shape: CrossSection, pose: PlanarPose, points) -> np.ndarray:
    """Closed point-in-shape test.

    Args:
        shape: Cross-section to test against
        pose: World placement of the shape
        points: World points, shape (N, 2)

    Returns:
        Boolean array of length N
    """
    return _inside_local(shape, pose.inverse_apply(points))


def _nearest_on_polygon(polygon: CrossSection, points: np.ndarray):
    """Distance from points outside a convex polygon, and the closest boundary point."""
    starts = polygon.vertices
    edges = np.roll(starts, -1, axis=0) - starts
    diff = points[:, None, :] - starts[None, :, :]
    t = np.clip(np.einsum("mnk,nk->mn", diff, edges) / np.einsum("nk,nk->n", edges, edges), 0.0, 1.0)
    candidates = starts[None, :, :] + t[..., None] * edges[None, :, :]
    distances = np.linalg.norm(points[:, None, :] - candidates, axis=2)
    best = distances.argmin(axis=1)
    rows = np.arange(len(points))
    nearest = candidates[rows, best]
    distance = distances[rows, best]

    inside = _inside_local(polygon, points)
    distance[inside] = 0.0
    nearest[inside] = points[inside]
    return distance, nearest


def contains(
    hole: CrossSection, hole_pose: PlanarPose, peg: CrossSection, peg_pose: PlanarPose
) -> bool:
    """True iff every point of the placed peg lies in the placed hole (closed)."""
    rel = peg_pose.relative_to(hole_pose)
    if peg.is_circle:
        centre = np.array([[rel.x, rel.y]])
        return bool(_inside_local(hole, centre, margin=peg.radius)[0])
    return bool(np.all(_inside_local(hole, rel.apply(peg.vertices))))


def _exiting_points(hole: CrossSection, points: np.ndarray):
    """Depth, inward direction and location of the deepest exiting point (local frame)."""
    if hole.is_circle:
        norms = np.linalg.norm(points, axis=1)
        i = int(norms.argmax())
        depth = norms[i] - hole.radius
        if depth <= BOUNDARY_EPS:
            return None
        return depth, -points[i] / norms[i], points[i]

    distance, nearest = _nearest_on_polygon(hole, points)
    i = int(distance.argmax())
    depth = distance[i]
    if depth <= BOUNDARY_EPS:
        return None
    return depth, (nearest[i] - points[i]) / depth, points[i]


def penetration(
    hole: CrossSection, hole_pose: PlanarPose, peg: CrossSection, peg_pose: PlanarPose
) -> Penetration:
    """Largest distance by which the placed peg leaves the placed hole.

    Args:
        hole: Hole cross-section
        hole_pose: World placement of the hole
        peg: Peg cross-section
        peg_pose: World placement of the peg

    Returns:
        Penetration with depth in millimetres and world-frame direction/point
    """
    rel = peg_pose.relative_to(hole_pose)
    centre = np.array([rel.x, rel.y])

    if peg.is_circle:
        if hole.is_circle:
            offset = float(np.linalg.norm(centre))
            depth = offset + peg.radius - hole.radius
            if depth <= BOUNDARY_EPS:
                return _NO_PENETRATION
            outward = centre / offset if offset > 0 else np.array([1.0, 0.0])
            found = (depth, -outward, centre + peg.radius * outward)
        else:
            distance, nearest = _nearest_on_polygon(hole, centre[None, :])
            if distance[0] > 0:
                outward = (centre - nearest[0]) / distance[0]
                found = (
                    distance[0] + peg.radius,
                    -outward,
                    centre + peg.radius * outward,
                )
            else:
                outline = rel.apply(peg.as_polygon().vertices)
                found = _exiting_points(hole, outline)
    else:
        found = _exiting_points(hole, rel.apply(peg.vertices))

    if found is None:
        return _NO_PENETRATION
    depth, direction, point = found
    return Penetration(
        float(depth),
        hole_pose.rotation @ direction,
        hole_pose.apply(point)[0],
    )


def overlap_depth(
    hole: CrossSection, hole_pose: PlanarPose, peg: CrossSection, peg_pose: PlanarPose
) -> float:
    """0 when the peg is contained, else the deepest exit distance in millimetres."""
    return penetration(hole, hole_pose, peg, peg_pose).depth


def area(shape: CrossSection) -> float:
    return shape.area


def gap_proportion(peg: CrossSection, hole: CrossSection) -> float:
    """(area(hole) - area(peg)) / area(hole).

    Raises:
        NonPositiveClearance: If the peg is at least as large as the hole
    """
    peg_area, hole_area = peg.area, hole.area
    if peg_area >= hole_area:
        raise NonPositiveClearance(
            f"Peg area {peg_area:.4f} mm^2 is not smaller than hole area {hole_area:.4f} mm^2"
        )
    return (hole_area - peg_area) / hole_area


def hole_for_clearance(peg: CrossSection, clearance: float) -> CrossSection:
    """Hole with a uniform boundary clearance around the peg."""
    if not clearance > 0:
        raise NonPositiveClearance(f"Clearance must be positive, got {clearance} mm")
    hole = peg.dilated(clearance)
    return CrossSection(hole.kind, hole.vertices, hole.radius, f"{peg.name}-hole")


def hole_for_gap_proportion(peg: CrossSection, proportion: float) -> CrossSection:
    """Hole scaled from the peg so that gap_proportion(peg, hole) == proportion."""
    if not 0 < proportion < 1:
        raise NonPositiveClearance(f"Gap proportion must lie in (0, 1), got {proportion}")
    hole = peg.scaled(1.0 / math.sqrt(1.0 - proportion))
    return CrossSection(hole.kind, hole.vertices, hole.radius, f"{peg.name}-hole")


def _contact_loop(peg: CrossSection, n: int) -> np.ndarray:
    """Outer ring of sample corners: polygon vertices or a regular polygon."""
    budget = max(8, n // 8)
    if peg.is_circle:
        count = min(n, budget)
        phis = 2.0 * math.pi * np.arange(count) / count
        return peg.radius * np.stack([np.cos(phis), np.sin(phis)], axis=1)

    vertices = peg.vertices
    count = len(vertices) if len(vertices) <= budget else budget
    count = min(count, n)
    if count == len(vertices):
        return vertices
    index = (np.arange(count) * len(vertices)) // count
    return vertices[index]


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    ideal = total * weights / weights.sum()
    counts = np.floor(ideal).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(ideal - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _contact_samples(peg: CrossSection, n: int) -> np.ndarray:
    if n < 3:
        raise ValueError(f"Need at least 3 contact samples, got {n}")

    loop = _contact_loop(peg, n)
    corners = len(loop)
    per_corner = n // corners
    rings = (math.isqrt(8 * per_corner + 1) - 1) // 2
    scales = 1.0 - np.arange(rings) / rings
    counts = _largest_remainder(per_corner, scales)

    # Every ring has the loop's vertex mean; shrinking the inner rings toward
    # an anchor on the opposite side of the centroid pulls the set mean back
    # onto the centroid for asymmetric outlines.
    vertex_mean = loop.mean(axis=0)
    loop_share = corners * float(np.dot(scales, counts)) / n
    anchor = np.zeros(2)
    if np.linalg.norm(vertex_mean) > 1e-12 and loop_share < 0.9:
        candidate = -vertex_mean * loop_share / (1.0 - loop_share)
        if _inside_local(peg, candidate[None, :])[0]:
            anchor = candidate

    samples = []
    following = np.roll(loop, -1, axis=0)
    for scale, count in zip(scales, counts):
        samples.append(anchor + scale * (loop - anchor))
        for j in range(1, count):
            ring = loop + (j / count) * (following - loop)
            samples.append(anchor + scale * (ring - anchor))
    leftover = n - corners * per_corner
    if leftover:
        samples.append(np.tile(anchor, (leftover, 1)))

    result = np.concatenate(samples)
    result.setflags(write=False)
    return result


def bottom_face_contact_samples(peg: CrossSection, peg_pose: PlanarPose, n: int) -> np.ndarray:
    """Deterministic spread of points over the peg's bottom face.

    The outline corners come first, then the rest of the outer ring, then
    nested inner rings; the mean of the set is the peg centre.

    Args:
        peg: Peg cross-section
        peg_pose: World placement of the peg
        n: Number of samples (>= 3)

    Returns:
        World-frame points, shape (n, 2)

    Raises:
        ValueError: If n < 3
    """
    return peg_pose.apply(peg.local_contact_samples(int(n)))


def regular_polygon(
    sides: int, circumradius: float, start_angle: float = math.pi / 2, name: str = ""
) -> CrossSection:
    phis = start_angle + 2.0 * math.pi * np.arange(sides) / sides
    return CrossSection.polygon(circumradius * np.stack([np.cos(phis), np.sin(phis)], axis=1), name)


def equilateral_triangle(side: float, name: str = "tr") -> CrossSection:
    return regular_polygon(3, side / math.sqrt(3.0), name=name)


def truncated_triangle(side: float, cut: float, name: str = "trm") -> CrossSection:
    """Equilateral triangle with its top corner cut off.

    The cut runs between the points that lie `cut` mm from the top corner
    along both adjacent edges.
    """
    if not 0 < cut < side:
        raise InvalidShape(f"Cut must lie in (0, {side}), got {cut}")
    top, left, right = equilateral_triangle(side).vertices
    to_left = (left - top) / side
    to_right = (right - top) / side
    return CrossSection.polygon(
        [top + cut * to_left, left, right, top + cut * to_right], name
    )


def reuleaux_triangle(width: float, segments: int = CIRCLE_SEGMENTS, name: str = "rtr") -> CrossSection:
    """Constant-width curved triangle as a polygon with `segments` vertices."""
    corners = equilateral_triangle(width).vertices
    per_arc = max(2, segments // 3)
    outline = []
    # Arc opposite corner k runs from corner k+1 to corner k+2, centred on k
    for k in range(3):
        centre = corners[k]
        begin = corners[(k + 1) % 3] - centre
        start = math.atan2(begin[1], begin[0])
        phis = start + (math.pi / 3.0) * np.arange(per_arc) / per_arc
        outline.append(centre + width * np.stack([np.cos(phis), np.sin(phis)], axis=1))
    return CrossSection.polygon(np.concatenate(outline), name)


def build_shape(name: str, entry: Dict) -> CrossSection:
    """Build one catalogue entry.

    Args:
        name: Catalogue key
        entry: Mapping with a kind and its parameters

    Returns:
        The finished cross-section, scale applied

    Raises:
        InvalidShape: For an unknown kind or bad parameters
    """
    kind = entry.get("kind")
    try:
        if kind == "triangle":
            shape = equilateral_triangle(float(entry["side"]), name)
        elif kind == "truncated_triangle":
            shape = truncated_triangle(float(entry["side"]), float(entry["cut"]), name)
        elif kind == "reuleaux":
            shape = reuleaux_triangle(
                float(entry["width"]), int(entry.get("segments", CIRCLE_SEGMENTS)), name
            )
        elif kind == "regular":
            shape = regular_polygon(int(entry["sides"]), float(entry["circumradius"]), name=name)
        elif kind == "circle":
            shape = CrossSection.circle(float(entry["radius"]), name)
        elif kind == "polygon":
            shape = CrossSection.polygon(entry["vertices"], name)
        else:
            raise InvalidShape(f"Shape '{name}' has unknown kind '{kind}'")
    except KeyError as e:
        raise InvalidShape(f"Shape '{name}' is missing parameter {e}") from e

    scale = float(entry.get("scale", 1.0))
    if scale != 1.0:
        shape = shape.scaled(scale)
    logger.debug(f"Built shape {shape!r}, area {shape.area:.2f} mm^2")
    return shape


def load_shape_catalogue(path: Optional[Union[str, Path]] = None) -> Dict[str, CrossSection]:
    """Load named cross-sections from a catalogue file.

    Args:
        path: YAML catalogue; the packaged shapes.yaml when omitted

    Returns:
        Mapping of shape name to CrossSection
    """
    path = Path(path) if path else DEFAULT_CATALOGUE_FILE
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    entries = data.get("shapes", data)
    catalogue = {str(name): build_shape(str(name), entry) for name, entry in entries.items()}
    logger.debug(f"Loaded {len(catalogue)} shapes from {path}")
    return catalogue


@functools.lru_cache(maxsize=None)
def _packaged_catalogue() -> Dict[str, CrossSection]:
    return load_shape_catalogue()


def get_shape(name: str, catalogue: Optional[Dict[str, CrossSection]] = None) -> CrossSection:
    """Look a shape up by name in the given (or packaged) catalogue.

    Raises:
        UnknownShape: If the name is not in the catalogue
    """
    catalogue = catalogue if catalogue is not None else _packaged_catalogue()
    try:
        return catalogue[name]
    except KeyError:
        raise UnknownShape(f"Unknown shape '{name}', known: {', '.join(sorted(catalogue))}") from None
