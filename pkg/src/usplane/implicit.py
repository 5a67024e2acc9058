"""Coordinate-based implicit volume: a field mapping (x, y, z) to intensity.

The trainable field is a small fully-connected network over a sinusoidal
positional encoding of coordinates normalized to [-1, 1]^3. It is fitted to
located slices by minimizing the pixel-wise error at each pixel's world
coordinate, can render arbitrary planes through the shared pixel-to-world
map, and supports joint refinement of slice anchors by gradient descent
through the same map. A volume-backed trilinear field implements the same
query interface for oracle and refinement use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geom3d
from .autodiff import Tensor
from .network import load_arrays, save_arrays, _he_uniform
from .optim import AdamState, adam_step
from .volume import SliceImage, Volume


@dataclass
class FieldConfig:
    octaves: int = 6
    hidden: tuple[int, int] = (64, 64)
    bounds: tuple[int, int, int] = (64, 64, 64)  # (H, W, D) of the atlas grid

    def to_json(self):
        return {"octaves": self.octaves, "hidden": list(self.hidden),
                "bounds": list(self.bounds)}

    @classmethod
    def from_json(cls, data: dict) -> "FieldConfig":
        return cls(octaves=data["octaves"], hidden=tuple(data["hidden"]),
                   bounds=tuple(data["bounds"]))


@dataclass
class ImplicitField:
    """Positional-encoding MLP from atlas voxel coordinates to intensity."""

    cfg: FieldConfig
    tensors: dict[str, Tensor]

    @classmethod
    def init(cls, cfg: FieldConfig, seed: int, dtype=np.float32) -> "ImplicitField":
        rng = np.random.default_rng(seed)
        enc_dim = 6 * cfg.octaves
        widths = (enc_dim, *cfg.hidden, 1)
        tensors: dict[str, Tensor] = {}
        for i in range(len(widths) - 1):
            tensors[f"fc{i}.w"] = Tensor(
                _he_uniform(rng, (widths[i], widths[i + 1]), widths[i], dtype),
                requires_grad=True)
            tensors[f"fc{i}.b"] = Tensor(np.zeros(widths[i + 1], dtype=dtype), requires_grad=True)
        return cls(cfg=cfg, tensors=tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ImplicitField":
        return ImplicitField(self.cfg, {k: Tensor(t.value.copy(), requires_grad=True)
                                        for k, t in self.tensors.items()})

    def _normalize(self, points: Tensor) -> Tensor:
        h, w, d = self.cfg.bounds
        scale = np.array([2.0 / (w - 1), 2.0 / (h - 1), 2.0 / (d - 1)])
        return ad.add(ad.mul(points, scale.astype(points.dtype)), np.full(3, -1.0, points.dtype))

    def query_t(self, points: Tensor) -> Tensor:
        """Field values at (N, 3) voxel coordinates as a graph node (N,)."""
        xn = self._normalize(points)
        feats = []
        for k in range(self.cfg.octaves):
            arg = ad.mul(xn, np.asarray((2.0 ** k) * np.pi, dtype=points.dtype))
            feats.append(ad.sin(arg))
            feats.append(ad.cos(arg))
        h = ad.concat(feats, axis=1)
        n_layers = len(self.cfg.hidden) + 1
        for i in range(n_layers):
            h = ad.linear(h, self.tensors[f"fc{i}.w"], self.tensors[f"fc{i}.b"])
            if i < n_layers - 1:
                h = ad.relu(h)
        return ad.reshape(h, (h.shape[0],))


@dataclass
class TrilinearField:
    """Volume-backed field: the trilinear interpolant, differentiable in the
    query coordinates. Has no trainable parameters."""

    vol: Volume
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def query_t(self, points: Tensor) -> Tensor:
        if self.vol.channels != 1:
            raise ValueError("trilinear field expects a single-channel volume")
        pts = points.value.astype(np.float64)
        h, w, d = self.vol.dims
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & (z >= 0) & (z <= d - 1)
        x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
        y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
        z0 = np.clip(np.floor(z).astype(np.int64), 0, max(d - 2, 0))
        x1, y1, z1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1), np.minimum(z0 + 1, d - 1)
        fx = np.clip(x - x0, 0.0, 1.0)
        fy = np.clip(y - y0, 0.0, 1.0)
        fz = np.clip(z - z0, 0.0, 1.0)
        data = self.vol.data[..., 0].astype(np.float64)
        val = np.zeros(len(pts))
        gx = np.zeros(len(pts))
        gy = np.zeros(len(pts))
        gz = np.zeros(len(pts))
        for zi, wz, sz in ((z0, 1.0 - fz, -1.0), (z1, fz, 1.0)):
            for yi, wy, sy in ((y0, 1.0 - fy, -1.0), (y1, fy, 1.0)):
                for xi, wx, sx in ((x0, 1.0 - fx, -1.0), (x1, fx, 1.0)):
                    corner = data[zi, yi, xi]
                    val += wz * wy * wx * corner
                    gx += wz * wy * sx * corner
                    gy += wz * sy * wx * corner
                    gz += sz * wy * wx * corner
        val[~inside] = 0.0
        out = Tensor(val.astype(points.dtype), parents=(points,))
        if out.requires_grad:
            grad_pts = np.stack([gx, gy, gz], axis=1)
            grad_pts[~inside] = 0.0

            def backward(g):
                points._accum((grad_pts * g[:, None]).astype(points.dtype))

            out._backward = backward
        return out


def query(field_obj, points: np.ndarray) -> np.ndarray:
    """Field values at (N, 3) voxel coordinates, as a plain array."""
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ValueError("query points must be finite")
    dtype = getattr(field_obj, "dtype", np.float64)
    return field_obj.query_t(Tensor(points.astype(dtype))).value.copy()


def _slice_coords(slices: list[SliceImage]) -> tuple[np.ndarray, np.ndarray]:
    coords, targets = [], []
    for s in slices:
        if s.location is None:
            raise ValueError("implicit fitting requires located slices")
        coords.append(geom3d.pixel_to_world(s.location, s.extent).reshape(-1, 3))
        targets.append(s.pixels.astype(np.float64).ravel())
    return np.concatenate(coords), np.concatenate(targets)


def _full_loss(field_obj, coords: np.ndarray, targets: np.ndarray, chunk: int = 16384) -> float:
    total = 0.0
    for start in range(0, len(coords), chunk):
        pred = query(field_obj, coords[start: start + chunk])
        diff = pred.astype(np.float64) - targets[start: start + chunk]
        total += float(np.dot(diff, diff))
    return total / len(coords)


@dataclass
class FitResult:
    field: ImplicitField
    loss_curve: list[float]
    initial_loss: float
    final_loss: float


def fit(
    field_obj: ImplicitField,
    slices: list[SliceImage],
    iters: int = 2000,
    lr: float = 1e-3,
    batch_px: int = 4096,
    seed: int = 0,
    log_path=None,
) -> FitResult:
    """Fit the field to located slices by minibatch ADAM on pixel MSE.

    initial_loss/final_loss are full-dataset values around the run; the
    curve holds the per-iteration minibatch losses. Deterministic per seed.
    """
    if not slices:
        raise ValueError("fit needs at least one located slice")
    if not field_obj.tensors:
        raise ValueError("field has no trainable parameters")
    coords, targets = _slice_coords(slices)
    initial = _full_loss(field_obj, coords, targets)
    rng = np.random.default_rng(seed)
    opt = AdamState.init(field_obj.tensors, lr=lr)
    curve = []
    from .pipeline import JsonlLogger

    log = JsonlLogger(log_path)
    try:
        for it in range(1, iters + 1):
            idx = rng.choice(len(coords), size=min(batch_px, len(coords)), replace=False)
            pts = Tensor(coords[idx].astype(field_obj.dtype))
            pred = field_obj.query_t(pts)
            loss = ad.mse(pred, targets[idx].astype(field_obj.dtype))
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite fit loss {value} at iteration {it}")
            field_obj.zero_grad()
            loss.backward()
            adam_step(opt, field_obj.tensors)
            curve.append(value)
            log.write(step=it, loss=value, lr=opt.lr)
    finally:
        log.close()
    return FitResult(field_obj, curve, initial, _full_loss(field_obj, coords, targets))


@dataclass
class RefineResult:
    locations: list[geom3d.PlaneLocation]
    field: object
    loss_curve: list[float]


def refine_poses(
    field_obj,
    slices: list[SliceImage],
    iters: int = 150,
    lr_pose: float = 0.05,
    lr_field: float = 0.0,
    batch_px: int = 512,
    seed: int = 0,
) -> RefineResult:
    """Gradient-refine slice anchors (and optionally the field) so rendered
    intensities match the slice pixels.

    Anchors are free leaves; gradients reach them through the pixel-to-world
    map and the field query. Aborts if the loss grows to 5x its initial
    value. lr_pose = 0 leaves the anchors untouched.
    """
    if not slices:
        raise ValueError("refine_poses needs at least one located slice")
    for s in slices:
        if s.location is None:
            raise ValueError("refine_poses requires initial locations")
    dtype = getattr(field_obj, "dtype", np.float32)
    poses = {f"pose{i}": Tensor(s.location.anchors.astype(dtype), requires_grad=True)
             for i, s in enumerate(slices)}
    pose_opt = AdamState.init(poses, lr=lr_pose)
    field_opt = None
    if lr_field > 0 and field_obj.tensors:
        field_opt = AdamState.init(field_obj.tensors, lr=lr_field)

    grids = []
    for s in slices:
        wu, wv = geom3d.pixel_coeffs(s.extent)
        grids.append((wu.ravel(), wv.ravel(), s.pixels.astype(np.float64).ravel()))

    rng = np.random.default_rng(seed)
    curve = []
    initial = None
    for it in range(1, iters + 1):
        parts, targets = [], []
        for i, (wu, wv, pix) in enumerate(grids):
            idx = rng.choice(len(pix), size=min(batch_px, len(pix)), replace=False)
            anchors = poses[f"pose{i}"]
            tl, tr, br = anchors[0:1], anchors[1:2], anchors[2:3]
            cu = wu[idx][:, None].astype(dtype)
            cv = wv[idx][:, None].astype(dtype)
            coords = ad.add(tl, ad.add(ad.mul(cu, tr - tl), ad.mul(cv, br - tr)))
            parts.append(coords)
            targets.append(pix[idx])
        pred = field_obj.query_t(ad.concat(parts, axis=0))
        loss = ad.mse(pred, np.concatenate(targets).astype(dtype))
        value = loss.item()
        if initial is None:
            initial = max(value, 1e-12)
        if not np.isfinite(value) or value > 5.0 * initial:
            raise RuntimeError(
                f"pose refinement diverged at iteration {it}: loss {value} vs initial {initial}")
        for t in poses.values():
            t.zero_grad()
        if field_opt:
            field_obj.zero_grad()
        loss.backward()
        adam_step(pose_opt, poses)
        if field_opt:
            adam_step(field_opt, field_obj.tensors)
        curve.append(value)
    locations = [geom3d.PlaneLocation(poses[f"pose{i}"].value.astype(np.float64))
                 for i in range(len(slices))]
    return RefineResult(locations, field_obj, curve)


def render_plane(field_obj, loc: geom3d.PlaneLocation, extent: tuple[int, int]) -> SliceImage:
    """Evaluate the field on a plane's pixel grid (same map as the slicer)."""
    loc.normal()  # rejects degenerate planes
    grid = geom3d.pixel_to_world(loc, extent).reshape(-1, 3)
    vals = query(field_obj, grid)
    h_px, w_px = extent
    spacing = float(np.linalg.norm(loc.anchors[1] - loc.anchors[0]) / (w_px - 1))
    return SliceImage(pixels=vals.reshape(h_px, w_px).astype(np.float32),
                      spacing=spacing, location=loc, provenance="render")


def save_field(field_obj: ImplicitField, stem) -> None:
    meta = {"kind": "field", "config": field_obj.cfg.to_json()}
    save_arrays(stem, {k: t.value for k, t in field_obj.tensors.items()}, meta)


def load_field(stem) -> ImplicitField:
    arrays, meta = load_arrays(stem)
    if meta.get("kind") != "field":
        raise ValueError(f"checkpoint kind {meta.get('kind')!r} is not a field")
    cfg = FieldConfig.from_json(meta["config"])
    return ImplicitField(cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
