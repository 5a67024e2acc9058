"""Plane parameterization and displacement algebra in the atlas voxel frame.

A slice's pose is fully described by the 3D coordinates of three of its
corners: top-left, top-right, bottom-right (rows of a 3x3 anchor matrix,
in that fixed order). Differences of anchor matrices form displacements,
which compose additively along a chain of planes (the chain telescopes to
the endpoint difference).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

# Below this cross-product norm the two plane edges are considered parallel.
DEGENERACY_EPS = 1e-9


@dataclass
class PlaneLocation:
    """Pose of a slice, as a 3x3 matrix of corner coordinates in voxels.

    Rows are the top-left, top-right and bottom-right corners; each row is
    an (x, y, z) triple in the atlas voxel frame.
    """

    anchors: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.anchors.shape != (3, 3):
            raise ValueError(f"anchors must be 3x3, got {self.anchors.shape}")
        if not np.all(np.isfinite(self.anchors)):
            raise ValueError("anchors must be finite")

    @property
    def top_left(self) -> np.ndarray:
        return self.anchors[0]

    @property
    def top_right(self) -> np.ndarray:
        return self.anchors[1]

    @property
    def bottom_right(self) -> np.ndarray:
        return self.anchors[2]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane edge vectors (width edge TR-TL, height edge BR-TR)."""
        return self.anchors[1] - self.anchors[0], self.anchors[2] - self.anchors[1]

    def normal(self) -> np.ndarray:
        """Unit plane normal, cross(width edge, height edge).

        Raises ValueError if the edges are (near-)parallel or zero.
        """
        e_w, e_h = self.edges()
        n = np.cross(e_w, e_h)
        norm = np.linalg.norm(n)
        if norm <= DEGENERACY_EPS:
            raise ValueError("degenerate plane: edge vectors are parallel or zero")
        return n / norm

    def to_json(self) -> list[list[float]]:
        """Rows TL, TR, BR as plain lists (JSON wire form)."""
        return [[float(v) for v in row] for row in self.anchors]

    @classmethod
    def from_json(cls, data) -> "PlaneLocation":
        return cls(np.asarray(data, dtype=np.float64))


@dataclass
class Displacement:
    """Entrywise difference of two anchor matrices, in voxels."""

    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.shape != (3, 3):
            raise ValueError(f"delta must be 3x3, got {self.delta.shape}")

    def __neg__(self) -> "Displacement":
        return Displacement(-self.delta)


@dataclass
class PoseSpec:
    """Intermediate pose form between sphere sampling and anchor matrices.

    extent is (height_px, width_px, pixel spacing in voxels).
    """

    normal: np.ndarray
    rotation: float
    center_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extent: tuple[int, int, float] = (64, 64, 1.0)

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.center_offset = np.asarray(self.center_offset, dtype=np.float64)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("normal must be unit length")
        _check_extent(self.extent)


def _check_extent(extent):
    h_px, w_px, spacing = extent
    if h_px < 2 or w_px < 2:
        raise ValueError(f"degenerate extent {h_px}x{w_px}: need at least 2 px per axis")
    if spacing <= 0:
        raise ValueError(f"pixel spacing must be positive, got {spacing}")


def displacement(loc_i: PlaneLocation, loc_k: PlaneLocation) -> Displacement:
    """Displacement from plane k to plane i: entrywise anchors_i - anchors_k."""
    return Displacement(loc_i.anchors - loc_k.anchors)


def compose(chain: list[Displacement]) -> Displacement:
    """Compose a chain of displacements by entrywise summation.

    For links derived from actual plane locations,
    (L_a - L_b) + (L_b - L_c) + ... telescopes to the endpoint difference.
    """
    if len(chain) == 0:
        raise ValueError("cannot compose an empty displacement chain")
    total = np.zeros((3, 3), dtype=np.float64)
    for d in chain:
        total += d.delta
    return Displacement(total)


def fibonacci_sphere(n: int, seed: int | None = None) -> np.ndarray:
    """n near-uniform unit vectors from the Fibonacci sphere lattice.

    Point i sits at z = 1 - 2 (i + 0.5) / n with azimuth i times the golden
    angle. With a seed, a uniformly random global rotation is applied, which
    preserves pairwise angles while decorrelating the lattice orientation
    across draws.

    Returns an (n, 3) array of unit vectors.
    """
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * GOLDEN_ANGLE
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if seed is not None:
        rot = random_rotation(np.random.default_rng(seed))
        pts = pts @ rot.T
    return pts


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn uniformly from SO(3) (normalized quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _in_plane_frame(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal (u, v) with cross(u, v) = normal."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(normal)))] = 1.0
    v = np.cross(normal, axis)
    v /= np.linalg.norm(v)
    u = np.cross(v, normal)
    return u, v


def plane_from_pose(pose: PoseSpec, center: np.ndarray) -> PlaneLocation:
    """Realize a PoseSpec as anchor corners around `center + center_offset`.

    The width edge runs along the (rotated) in-plane u axis and the height
    edge along v, chosen so that cross(width edge, height edge) equals the
    pose normal.
    """
    h_px, w_px, spacing = pose.extent
    u0, v0 = _in_plane_frame(pose.normal)
    c, s = np.cos(pose.rotation), np.sin(pose.rotation)
    u = c * u0 + s * v0
    v = -s * u0 + c * v0
    half_w = 0.5 * (w_px - 1) * spacing
    half_h = 0.5 * (h_px - 1) * spacing
    mid = np.asarray(center, dtype=np.float64) + pose.center_offset
    tl = mid - half_w * u - half_h * v
    tr = mid + half_w * u - half_h * v
    br = mid + half_w * u + half_h * v
    return PlaneLocation(np.stack([tl, tr, br]))


def sample_pose(
    directions: np.ndarray,
    rng: np.random.Generator,
    extent: tuple[int, int, float],
    center: np.ndarray,
    offset_radius: float = 0.0,
) -> PlaneLocation:
    """Draw a random plane pose and realize it as anchors.

    The normal is drawn uniformly from `directions` (rows), the in-plane
    rotation uniformly from [0, 2 pi), and the center offset uniformly from
    the ball of radius `offset_radius` around `center`.
    """
    _check_extent(extent)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    normal = directions[rng.integers(len(directions))]
    rotation = rng.uniform(0.0, 2.0 * np.pi)
    offset = np.zeros(3)
    if offset_radius > 0:
        # Rejection-free ball sampling: direction times radius ~ U^(1/3).
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        offset = d * offset_radius * rng.uniform() ** (1.0 / 3.0)
    pose = PoseSpec(normal=normal, rotation=rotation, center_offset=offset, extent=extent)
    return plane_from_pose(pose, center)


def dihedral_angle(loc_a: PlaneLocation, loc_b: PlaneLocation) -> float:
    """Acute angle between the two plane normals, in [0, pi/2] radians."""
    cos_angle = abs(float(np.dot(loc_a.normal(), loc_b.normal())))
    return float(np.arccos(min(cos_angle, 1.0)))


def anchor_distance(loc_a: PlaneLocation, loc_b: PlaneLocation) -> float:
    """Mean over the three anchors of the Euclidean corner distance, voxels."""
    return float(np.mean(np.linalg.norm(loc_a.anchors - loc_b.anchors, axis=1)))


def pixel_coeffs(extent: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric pixel coefficients (wu, wv) for the pixel-to-world map.

    For a slice of extent (H_px, W_px), pixel (row v, column u) maps to

        world(u, v) = TL + wu[v, u] * (TR - TL) + wv[v, u] * (BR - TR)

    with wu = u / (W_px - 1) and wv = v / (H_px - 1). Every consumer of
    slice geometry (volume slicing, implicit rendering, pose refinement)
    shares this map.
    """
    h_px, w_px = extent
    if h_px < 2 or w_px < 2:
        raise ValueError(f"degenerate extent {h_px}x{w_px}: need at least 2 px per axis")
    wu = np.tile(np.arange(w_px, dtype=np.float64) / (w_px - 1), (h_px, 1))
    wv = np.tile((np.arange(h_px, dtype=np.float64) / (h_px - 1))[:, None], (1, w_px))
    return wu, wv


def pixel_to_world(loc: PlaneLocation, extent: tuple[int, int]) -> np.ndarray:
    """World coordinates of every pixel center, shape (H_px, W_px, 3)."""
    wu, wv = pixel_coeffs(extent)
    tl, tr, br = loc.anchors
    return tl + wu[..., None] * (tr - tl) + wv[..., None] * (br - tr)
