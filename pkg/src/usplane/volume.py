"""Dense 3D volumes: synthetic phantoms, trilinear sampling, oblique slicing,
appearance shift simulation, and bit-exact file I/O.

The voxel-index frame of a volume is the atlas coordinate frame: a point
p = (x, y, z) addresses width, height and depth in voxels. In memory the
intensity array is laid out (depth, height, width, channel) in C order,
i.e. channel-fastest, then x, then y, then z, matching the .uvol payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom3d
from .formats import (
    BadMagicError,
    TruncatedPayloadError,
    check_element_count,
    dump_json,
    load_json,
    read_exact,
)

UVOL_MAGIC = b"UVOL1\0"
SLICE_BUNDLE_FORMAT = "USLICES1"


@dataclass
class Volume:
    """Dense intensity grid with physical voxel size.

    data has shape (D, H, W, C); dims reports (H, W, D) in voxels.
    """

    data: np.ndarray
    voxel_size_mm: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be (D, H, W[, C]), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume axes must be nonempty, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")
        self.voxel_size_mm = np.asarray(self.voxel_size_mm, dtype=np.float32)
        if self.voxel_size_mm.shape != (3,) or np.any(self.voxel_size_mm <= 0):
            raise ValueError("voxel_size_mm must be 3 positive values")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(H, W, D) in voxels."""
        d, h, w, _ = self.data.shape
        return h, w, d

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def center(self) -> np.ndarray:
        """Geometric center of the voxel grid, in voxel coordinates."""
        h, w, d = self.dims
        return np.array([(w - 1) / 2.0, (h - 1) / 2.0, (d - 1) / 2.0])


@dataclass
class SliceImage:
    """2D image with pixel spacing and (optionally) its plane location.

    provenance tags where the pixels came from: "volume" for slices sampled
    from a reference volume, "target" for (simulated) acquisitions from
    another domain.
    """

    pixels: np.ndarray
    spacing: float = 1.0
    location: geom3d.PlaneLocation | None = None
    provenance: str = "volume"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError(f"slice pixels must be 2D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("slice pixels must be finite")
        if self.spacing <= 0:
            raise ValueError(f"pixel spacing must be positive, got {self.spacing}")

    @property
    def extent(self) -> tuple[int, int]:
        return self.pixels.shape


# ---------------------------------------------------------------------------
# Synthetic phantoms


@dataclass
class Ellipsoid:
    """Solid ellipsoid indicator; coordinates in the unit cube."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float

    def render(self, xn, yn, zn):
        q = (
            ((xn - self.center[0]) / self.radii[0]) ** 2
            + ((yn - self.center[1]) / self.radii[1]) ** 2
            + ((zn - self.center[2]) / self.radii[2]) ** 2
        )
        return np.where(q <= 1.0, self.intensity, 0.0)

    def to_json(self):
        return {"kind": "ellipsoid", "center": list(self.center), "radii": list(self.radii),
                "intensity": self.intensity}


@dataclass
class ShellSet:
    """Concentric spherical shells around a common center."""

    center: tuple[float, float, float]
    radii: tuple[float, ...]
    thickness: float
    intensity: float

    def render(self, xn, yn, zn):
        r = np.sqrt(
            (xn - self.center[0]) ** 2 + (yn - self.center[1]) ** 2 + (zn - self.center[2]) ** 2
        )
        out = np.zeros_like(r)
        for radius in self.radii:
            out = np.where(np.abs(r - radius) <= self.thickness, self.intensity, out)
        return out

    def to_json(self):
        return {"kind": "shells", "center": list(self.center), "radii": list(self.radii),
                "thickness": self.thickness, "intensity": self.intensity}


@dataclass
class Sinusoid:
    """Oblique plane-wave texture field over the whole volume, in [0, amplitude]."""

    freq: tuple[float, float, float]
    phase: float
    amplitude: float

    def render(self, xn, yn, zn):
        arg = 2.0 * np.pi * (self.freq[0] * xn + self.freq[1] * yn + self.freq[2] * zn) + self.phase
        return self.amplitude * 0.5 * (1.0 + np.sin(arg))

    def to_json(self):
        return {"kind": "sinusoid", "freq": list(self.freq), "phase": self.phase,
                "amplitude": self.amplitude}


@dataclass
class Ramp:
    """Smooth intensity gradient along an oblique direction (emulates the
    systematic brightness falloff of real acquisitions; also the strongest
    symmetry breaker, since intensity encodes position directly)."""

    direction: tuple[float, float, float]
    low: float
    high: float

    def render(self, xn, yn, zn):
        d = np.asarray(self.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        proj = d[0] * xn + d[1] * yn + d[2] * zn
        # normalize projection of the unit cube onto d to [0, 1]
        lo = np.minimum(d, 0.0).sum()
        hi = np.maximum(d, 0.0).sum()
        t = (proj - lo) / (hi - lo)
        return self.low + (self.high - self.low) * t

    def to_json(self):
        return {"kind": "ramp", "direction": list(self.direction), "low": self.low,
                "high": self.high}


def primitive_from_json(data: dict):
    kind = data.get("kind")
    if kind == "ellipsoid":
        return Ellipsoid(tuple(data["center"]), tuple(data["radii"]), data["intensity"])
    if kind == "shells":
        return ShellSet(tuple(data["center"]), tuple(data["radii"]), data["thickness"],
                        data["intensity"])
    if kind == "sinusoid":
        return Sinusoid(tuple(data["freq"]), data["phase"], data["amplitude"])
    if kind == "ramp":
        return Ramp(tuple(data["direction"]), data["low"], data["high"])
    raise ValueError(f"unknown phantom primitive kind {kind!r}")


@dataclass
class PhantomSpec:
    """Seeded recipe for a synthetic volume built from simple primitives."""

    seed: int
    primitives: list = field(default_factory=list)
    noise: float = 0.0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")

    def to_json(self):
        return {"seed": self.seed, "noise": self.noise,
                "primitives": [p.to_json() for p in self.primitives]}

    @classmethod
    def from_json(cls, data: dict) -> "PhantomSpec":
        return cls(
            seed=data["seed"],
            primitives=[primitive_from_json(p) for p in data.get("primitives", [])],
            noise=data.get("noise", 0.0),
        )


def default_phantom(seed: int, noise: float = 0.0) -> PhantomSpec:
    """Asymmetric default phantom.

    A dominant oblique intensity ramp ties brightness to position (as
    acoustic falloff does in real scans), and off-center ellipsoids plus
    incommensurate oblique sinusoids leave no mirror or rotational symmetry,
    so a plane's image determines its pose.
    """
    primitives = [
        Ramp(direction=(0.55, 0.65, 0.52), low=0.05, high=0.60),
        Ellipsoid(center=(0.42, 0.56, 0.38), radii=(0.30, 0.20, 0.24), intensity=0.25),
        Ellipsoid(center=(0.66, 0.34, 0.60), radii=(0.12, 0.16, 0.09), intensity=0.20),
        Ellipsoid(center=(0.30, 0.70, 0.68), radii=(0.09, 0.07, 0.13), intensity=0.22),
        ShellSet(center=(0.55, 0.45, 0.52), radii=(0.16, 0.30), thickness=0.035, intensity=0.18),
        Sinusoid(freq=(1.3, 2.1, 0.7), phase=0.9, amplitude=0.20),
        Sinusoid(freq=(3.1, 1.2, 2.4), phase=2.2, amplitude=0.10),
    ]
    return PhantomSpec(seed=seed, primitives=primitives, noise=noise)


def gen_phantom(spec: PhantomSpec, dims: tuple[int, int, int] = (64, 64, 64)) -> Volume:
    """Render a PhantomSpec onto a (H, W, D) voxel grid.

    Primitive coordinates live in the unit cube, mapped onto the full voxel
    extent. Intensities are summed per voxel, perturbed by seeded Gaussian
    noise, and clamped to [0, 1]. Deterministic for a given seed.
    """
    h, w, d = dims
    if min(dims) < 8:
        raise ValueError(f"phantom dims must be at least 8 per axis, got {dims}")
    xn = np.arange(w, dtype=np.float64)[None, None, :] / (w - 1)
    yn = np.arange(h, dtype=np.float64)[None, :, None] / (h - 1)
    zn = np.arange(d, dtype=np.float64)[:, None, None] / (d - 1)
    vol = np.zeros((d, h, w), dtype=np.float64)
    for prim in spec.primitives:
        vol += prim.render(xn, yn, zn)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        vol += rng.normal(0.0, spec.noise, size=vol.shape)
    return Volume(np.clip(vol, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Sampling and slicing


def sample_points(v: Volume, pts: np.ndarray) -> np.ndarray:
    """Trilinear sample at (N, 3) voxel coordinates, returning (N, C).

    Standard 8-corner weighting on the voxel lattice; any coordinate outside
    [0, dim - 1] on any axis yields 0 on all channels (zero-fill).
    """
    pts = np.asarray(pts, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample coordinates must be finite")
    h, w, d = v.dims
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & (z >= 0) & (z <= d - 1)

    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    z0 = np.clip(np.floor(z).astype(np.int64), 0, max(d - 2, 0))
    x1, y1, z1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1), np.minimum(z0 + 1, d - 1)
    # Clamp fractions so out-of-range inputs cannot poison the gather below;
    # outside points are zeroed regardless.
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    fz = np.clip(z - z0, 0.0, 1.0)

    data = v.data.astype(np.float64, copy=False)
    out = np.zeros((len(pts), v.channels), dtype=np.float64)
    for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
        for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
            for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
                out += (wz * wy * wx)[:, None] * data[zi, yi, xi, :]
    out[~inside] = 0.0
    return out


def trilinear_sample(v: Volume, p) -> np.ndarray:
    """Trilinear sample at a single (x, y, z) voxel coordinate, per channel."""
    return sample_points(v, np.asarray(p, dtype=np.float64)[None, :])[0]


def extract_slice(v: Volume, loc: geom3d.PlaneLocation, extent: tuple[int, int]) -> SliceImage:
    """Resample the volume on the pixel grid of a plane.

    Pixel (row v, col u) takes the trilinear sample at the shared
    pixel-to-world map of `loc`; the result carries `loc` as its location.
    """
    if v.channels != 1:
        raise ValueError("slice extraction expects a single-channel volume")
    loc.normal()  # rejects degenerate planes
    grid = geom3d.pixel_to_world(loc, extent)
    vals = sample_points(v, grid.reshape(-1, 3))[:, 0]
    h_px, w_px = extent
    spacing = float(np.linalg.norm(loc.anchors[1] - loc.anchors[0]) / (w_px - 1))
    return SliceImage(
        pixels=vals.reshape(h_px, w_px).astype(np.float32),
        spacing=spacing,
        location=loc,
    )


# ---------------------------------------------------------------------------
# Domain shift and sweeps


@dataclass
class DomainShiftSpec:
    """Appearance-only acquisition shift: gamma, speckle, noise, gain."""

    gamma: float = 1.0
    speckle_sigma: float = 0.0
    additive_sigma: float = 0.0
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.speckle_sigma < 0 or self.additive_sigma < 0:
            raise ValueError("noise sigmas must be nonnegative")

    def to_json(self):
        return {"gamma": self.gamma, "speckle_sigma": self.speckle_sigma,
                "additive_sigma": self.additive_sigma, "scale": self.scale, "seed": self.seed}

    @classmethod
    def from_json(cls, data: dict) -> "DomainShiftSpec":
        return cls(**data)


def apply_domain_shift(img: SliceImage, spec: DomainShiftSpec) -> SliceImage:
    """scale * img**gamma * (1 + speckle) + additive noise, clamped to [0, 1].

    Appearance only: the plane location is carried over unchanged (the
    geometry of an acquisition does not depend on the machine's look).
    Deterministic for a given spec seed.
    """
    rng = np.random.default_rng(spec.seed)
    out = img.pixels.astype(np.float64)
    if spec.gamma != 1.0:
        out = out ** spec.gamma
    out = spec.scale * out
    if spec.speckle_sigma > 0:
        out = out * (1.0 + rng.normal(0.0, spec.speckle_sigma, size=out.shape))
    if spec.additive_sigma > 0:
        out = out + rng.normal(0.0, spec.additive_sigma, size=out.shape)
    return SliceImage(
        pixels=np.clip(out, 0.0, 1.0).astype(np.float32),
        spacing=img.spacing,
        location=img.location,
        provenance="target",
    )


def simulate_sweep(
    v: Volume,
    n_frames: int,
    rng: np.random.Generator,
    smoothness: float,
    extent: tuple[int, int] = (64, 64),
    spacing: float | None = None,
    offset_radius: float | None = None,
) -> list[SliceImage]:
    """Smooth random-walk sequence of slices through the volume.

    Anchors drift with momentum; the walk speed wanders within a band below
    `smoothness`, like a freehand acquisition, and each frame-to-frame step
    is rescaled so the consecutive anchor_distance never exceeds
    `smoothness`. smoothness = 0 repeats the first frame. Deterministic
    under generator replay.
    """
    if n_frames < 2:
        raise ValueError("a sweep needs at least 2 frames")
    h, w, d = v.dims
    if spacing is None:
        spacing = (min(h, w, d) - 1) / (max(extent) - 1)
    if offset_radius is None:
        offset_radius = 0.1 * min(h, w, d)
    wander_radius = 0.2 * min(h, w, d)

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    loc = geom3d.sample_pose(
        direction[None, :], rng, (extent[0], extent[1], spacing), v.center(), offset_radius
    )
    anchors = loc.anchors.copy()
    frames = [extract_slice(v, geom3d.PlaneLocation(anchors.copy()), extent)]
    velocity = rng.normal(size=(3, 3))
    for _ in range(n_frames - 1):
        velocity = 0.8 * velocity + 0.2 * rng.normal(size=(3, 3))
        step_len = float(np.mean(np.linalg.norm(velocity, axis=1)))
        target = rng.uniform(0.2, 0.95) * smoothness
        step = velocity * (target / step_len) if step_len > 0 else np.zeros((3, 3))
        anchors = anchors + step
        # Steer the walk back toward the volume so frames keep content;
        # flipping the velocity keeps the per-step bound intact.
        drift = anchors.mean(axis=0) - v.center()
        if np.linalg.norm(drift) > wander_radius:
            velocity -= 2.0 * (velocity @ drift)[:, None] * drift / np.dot(drift, drift)
        frames.append(extract_slice(v, geom3d.PlaneLocation(anchors.copy()), extent))
    return frames


# ---------------------------------------------------------------------------
# File formats


def write_volume(v: Volume, path) -> None:
    """Write a .uvol file: magic, u32 H W D C, f32 voxel size, f32 payload."""
    h, w, d = v.dims
    with open(path, "wb") as f:
        f.write(UVOL_MAGIC)
        f.write(struct.pack("<4I", h, w, d, v.channels))
        f.write(np.asarray(v.voxel_size_mm, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    """Read a .uvol file written by write_volume; round-trip is bitwise exact."""
    with open(path, "rb") as f:
        magic = f.read(len(UVOL_MAGIC))
        if magic != UVOL_MAGIC:
            raise BadMagicError(f"bad magic: expected {UVOL_MAGIC!r}, got {magic!r}")
        h, w, d, c = struct.unpack("<4I", read_exact(f, 16, "dimension header"))
        check_element_count(h * w * d * max(c, 1), "volume header")
        voxel_size = np.frombuffer(read_exact(f, 12, "voxel size"), dtype="<f4").copy()
        payload = read_exact(f, h * w * d * c * 4, "voxel payload")
        extra = f.read(1)
        if extra:
            raise TruncatedPayloadError("payload size mismatch: trailing bytes after voxel data")
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w, c).copy()
    return Volume(data, voxel_size)


def _bundle_paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".f32"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".f32")


def write_slice_bundle(stem, slices: list[SliceImage]) -> None:
    """Write a slice bundle: <stem>.json sidecar + <stem>.f32 pixel blob.

    The sidecar stores extent, spacing, anchors (or null), provenance and
    the element offset of each image in the row-major little-endian blob.
    """
    json_path, blob_path = _bundle_paths(stem)
    records = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for s in slices:
            records.append(
                {
                    "extent": list(s.extent),
                    "spacing": float(s.spacing),
                    "anchors": s.location.to_json() if s.location is not None else None,
                    "provenance": s.provenance,
                    "offset": offset,
                }
            )
            blob.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())
            offset += s.pixels.size
    dump_json(json_path, {"format": SLICE_BUNDLE_FORMAT, "count": len(slices), "slices": records})


def read_slice_bundle(stem) -> list[SliceImage]:
    """Read a slice bundle written by write_slice_bundle (bitwise round-trip)."""
    json_path, blob_path = _bundle_paths(stem)
    manifest = load_json(json_path, SLICE_BUNDLE_FORMAT)
    blob = np.fromfile(blob_path, dtype="<f4")
    slices = []
    for rec in manifest["slices"]:
        h_px, w_px = rec["extent"]
        check_element_count(rec["offset"] + h_px * w_px, "slice bundle record")
        if rec["offset"] + h_px * w_px > blob.size:
            raise TruncatedPayloadError(
                f"truncated payload: bundle blob has {blob.size} elements, "
                f"record needs up to {rec['offset'] + h_px * w_px}"
            )
        pixels = blob[rec["offset"]: rec["offset"] + h_px * w_px].reshape(h_px, w_px).copy()
        loc = None if rec["anchors"] is None else geom3d.PlaneLocation.from_json(rec["anchors"])
        slices.append(
            SliceImage(pixels=pixels, spacing=rec["spacing"], location=loc,
                       provenance=rec.get("provenance", "volume"))
        )
    return slices
