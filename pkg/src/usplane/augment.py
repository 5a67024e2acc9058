"""Seeded slice augmentation: scaling, in-plane translation, contrast, noise.

Contrast and noise are appearance-only. Scaling and translation resample
the pixels and transform the plane location through the same pixel-to-world
map the slicer uses, so the label of a geometrically augmented view stays
exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom3d
from .volume import SliceImage


@dataclass
class AugmentSpec:
    """Ranges for one random augmentation draw."""

    scale_range: tuple[float, float] = (1.0, 1.0)
    translate_px: float = 0.0
    contrast_range: tuple[float, float] = (1.0, 1.0)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValueError(f"bad scale range {self.scale_range}")
        if self.contrast_range[0] > self.contrast_range[1]:
            raise ValueError(f"bad contrast range {self.contrast_range}")
        if self.translate_px < 0 or self.noise_sigma < 0:
            raise ValueError("translate_px and noise_sigma must be nonnegative")

    def is_identity(self) -> bool:
        return (self.scale_range == (1.0, 1.0) and self.translate_px == 0.0
                and self.contrast_range == (1.0, 1.0) and self.noise_sigma == 0.0)

    def geometry_free(self) -> "AugmentSpec":
        """Copy with scaling/translation disabled (appearance-only)."""
        return AugmentSpec((1.0, 1.0), 0.0, self.contrast_range, self.noise_sigma, self.seed)

    def to_json(self):
        return {"scale_range": list(self.scale_range), "translate_px": self.translate_px,
                "contrast_range": list(self.contrast_range), "noise_sigma": self.noise_sigma,
                "seed": self.seed}

    @classmethod
    def from_json(cls, data: dict) -> "AugmentSpec":
        data = dict(data)
        data["scale_range"] = tuple(data.get("scale_range", (1.0, 1.0)))
        data["contrast_range"] = tuple(data.get("contrast_range", (1.0, 1.0)))
        return cls(**data)


def bilinear_image(pixels: np.ndarray, uu: np.ndarray, vv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of image values at pixel coordinates (u cols, v rows).

    Coordinates outside the image are zero-filled, mirroring the volume
    sampler's out-of-bounds convention.
    """
    h, w = pixels.shape
    inside = (uu >= 0) & (uu <= w - 1) & (vv >= 0) & (vv <= h - 1)
    u0 = np.clip(np.floor(uu).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vv).astype(np.int64), 0, max(h - 2, 0))
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    fu = np.clip(uu - u0, 0.0, 1.0)
    fv = np.clip(vv - v0, 0.0, 1.0)
    data = pixels.astype(np.float64, copy=False)
    out = (
        (1 - fv) * (1 - fu) * data[v0, u0]
        + (1 - fv) * fu * data[v0, u1]
        + fv * (1 - fu) * data[v1, u0]
        + fv * fu * data[v1, u1]
    )
    return np.where(inside, out, 0.0)


def augment(img: SliceImage, spec: AugmentSpec, rng: np.random.Generator) -> SliceImage:
    """One augmented view of a slice, drawn from `rng`.

    The geometric part resamples the image at source coordinates
    (center + (p - center) * scale + translation); the location label is
    re-anchored by evaluating the original pixel-to-world map at the
    transformed corner coordinates, which keeps it exact.
    """
    scale = rng.uniform(*spec.scale_range)
    tx = rng.uniform(-spec.translate_px, spec.translate_px)
    ty = rng.uniform(-spec.translate_px, spec.translate_px)
    gain = rng.uniform(*spec.contrast_range)

    pixels = img.pixels.astype(np.float64)
    location = img.location
    spacing = img.spacing
    if scale != 1.0 or tx != 0.0 or ty != 0.0:
        h, w = img.extent
        cu, cv = (w - 1) / 2.0, (h - 1) / 2.0
        u = np.arange(w, dtype=np.float64)[None, :]
        v = np.arange(h, dtype=np.float64)[:, None]
        src_u = cu + (u - cu) * scale + tx
        src_v = cv + (v - cv) * scale + ty
        src_u, src_v = np.broadcast_arrays(src_u, src_v)
        pixels = bilinear_image(pixels, src_u, src_v)
        spacing = img.spacing * scale
        if location is not None:
            tl, tr, br = location.anchors
            corners = []
            for pu, pv in ((0, 0), (w - 1, 0), (w - 1, h - 1)):
                wu = (cu + (pu - cu) * scale + tx) / (w - 1)
                wv = (cv + (pv - cv) * scale + ty) / (h - 1)
                corners.append(tl + wu * (tr - tl) + wv * (br - tr))
            location = geom3d.PlaneLocation(np.stack(corners))

    if gain != 1.0:
        pixels = pixels * gain
    if spec.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, spec.noise_sigma, size=pixels.shape)
    if gain != 1.0 or spec.noise_sigma > 0:
        pixels = np.clip(pixels, 0.0, 1.0)

    return SliceImage(pixels=pixels.astype(np.float32), spacing=spacing,
                      location=location, provenance=img.provenance)
