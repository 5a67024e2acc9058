"""Convolutional slice encoder and the location/displacement regression heads.

The encoder is a stack of stride-2 convolutions with rectifiers followed by
global average pooling, so the feature width equals the last conv channel
count. The location head maps one feature vector to a 3x3 anchor matrix;
the displacement head maps an ordered concatenated feature pair to the 3x3
anchor difference. Desk-scale by default (4 blocks, 8/16/32/64 channels),
all widths configurable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import check_element_count, dump_json, load_json, read_exact

CHECKPOINT_FORMAT = "USPLANE_CKPT1"


@dataclass
class ModelConfig:
    in_channels: int = 1
    conv_channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    head_hidden: int = 32
    kernel: int = 3
    stride: int = 2
    pad: int = 1
    # Heads emit anchor coordinates in units of this many voxels, so a
    # freshly initialized final layer only needs O(1) weights to span the
    # volume. Set it to about half the atlas extent.
    output_scale: float = 16.0

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    def to_json(self):
        return {"in_channels": self.in_channels, "conv_channels": list(self.conv_channels),
                "head_hidden": self.head_hidden, "kernel": self.kernel,
                "stride": self.stride, "pad": self.pad, "output_scale": self.output_scale}

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["conv_channels"] = tuple(data["conv_channels"])
        return cls(**data)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class ModelParams:
    """Named parameter tensors plus the architecture that owns them."""

    cfg: ModelConfig
    tensors: dict[str, Tensor]
    input_extent: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "ModelParams":
        """Seeded He-style fan-in initialization; all biases start at zero."""
        rng = np.random.default_rng(seed)
        k = cfg.kernel
        tensors: dict[str, Tensor] = {}
        c_prev = cfg.in_channels
        for i, c in enumerate(cfg.conv_channels):
            fan_in = c_prev * k * k
            tensors[f"conv{i}.w"] = Tensor(
                _he_uniform(rng, (c, c_prev, k, k), fan_in, dtype), requires_grad=True)
            tensors[f"conv{i}.b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
            c_prev = c
        feat = cfg.feature_dim
        for name, width_in in (("loc", feat), ("disp", 2 * feat)):
            tensors[f"{name}.w0"] = Tensor(
                _he_uniform(rng, (width_in, cfg.head_hidden), width_in, dtype), requires_grad=True)
            tensors[f"{name}.b0"] = Tensor(np.zeros(cfg.head_hidden, dtype=dtype), requires_grad=True)
            tensors[f"{name}.w1"] = Tensor(
                _he_uniform(rng, (cfg.head_hidden, 9), cfg.head_hidden, dtype), requires_grad=True)
            tensors[f"{name}.b1"] = Tensor(np.zeros(9, dtype=dtype), requires_grad=True)
        return cls(cfg=cfg, tensors=tensors, meta={"seed": seed, "step": 0})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def n_params(self) -> int:
        return sum(t.value.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(t.value.copy(), requires_grad=True) for k, t in self.tensors.items()}
        return ModelParams(self.cfg, tensors, self.input_extent, dict(self.meta))

    def astype(self, dtype) -> "ModelParams":
        tensors = {k: Tensor(t.value.astype(dtype), requires_grad=True)
                   for k, t in self.tensors.items()}
        return ModelParams(self.cfg, tensors, self.input_extent, dict(self.meta))

    def flat(self) -> np.ndarray:
        """All parameter values as one vector, in name order."""
        return np.concatenate([t.value.ravel() for t in self.tensors.values()])

    def from_flat_tensor(self, leaf: Tensor) -> "ModelParams":
        """Rebuild the parameter dict as tape slices of one flat leaf Tensor.

        Gradients of anything computed from the result flow back to `leaf`,
        which is what the finite-difference harness differentiates against.
        """
        tensors = {}
        start = 0
        for name, t in self.tensors.items():
            stop = start + t.value.size
            tensors[name] = ad.reshape(leaf[start:stop], t.shape)
            start = stop
        return ModelParams(self.cfg, tensors, self.input_extent, dict(self.meta))


def _stack_batch(batch, dtype) -> np.ndarray:
    """Stack slice pixels (or accept a ready array) into (B, H, W)."""
    if isinstance(batch, np.ndarray):
        images = batch
    else:
        shapes = {s.pixels.shape for s in batch}
        if len(shapes) > 1:
            raise ValueError(f"batch images must share one extent, got {sorted(shapes)}")
        images = np.stack([s.pixels for s in batch])
    if images.ndim != 3:
        raise ValueError(f"expected a (B, H, W) batch, got shape {images.shape}")
    return images.astype(dtype, copy=False)


def encode(params: ModelParams, batch) -> Tensor:
    """Feature vectors for a batch of equal-extent images, shape (B, F)."""
    cfg = params.cfg
    images = _stack_batch(batch, params.dtype)
    x = Tensor(images[:, None, :, :])
    for i in range(len(cfg.conv_channels)):
        x = ad.conv2d(x, params.tensors[f"conv{i}.w"], params.tensors[f"conv{i}.b"],
                      stride=cfg.stride, pad=cfg.pad)
        x = ad.relu(x)
    return ad.global_avg_pool(x)


def _head(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.linear(x, params.tensors[f"{prefix}.w0"], params.tensors[f"{prefix}.b0"]))
    out = ad.linear(h, params.tensors[f"{prefix}.w1"], params.tensors[f"{prefix}.b1"])
    out = ad.mul(out, np.asarray(params.cfg.output_scale, dtype=out.dtype))
    return ad.reshape(out, (out.shape[0], 3, 3))


def predict_location(params: ModelParams, feats: Tensor) -> Tensor:
    """Predicted anchor matrices (B, 3, 3), rows TL, TR, BR."""
    return _head(params, "loc", feats)


def predict_displacement(params: ModelParams, feats_i: Tensor, feats_k: Tensor) -> Tensor:
    """Predicted anchor-matrix differences (B, 3, 3) for ordered pairs (i, k)."""
    return _head(params, "disp", ad.concat([feats_i, feats_k], axis=1))


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw little-endian f32 blob in manifest order.


def save_arrays(stem, arrays: dict[str, np.ndarray], meta: dict) -> None:
    json_path, blob_path = Path(str(stem) + ".json"), Path(str(stem) + ".f32")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        **meta,
    }
    dump_json(json_path, manifest)
    with open(blob_path, "wb") as f:
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_arrays(stem) -> tuple[dict[str, np.ndarray], dict]:
    json_path, blob_path = Path(str(stem) + ".json"), Path(str(stem) + ".f32")
    manifest = load_json(json_path, CHECKPOINT_FORMAT)
    arrays = {}
    with open(blob_path, "rb") as f:
        for rec in manifest["tensors"]:
            shape = tuple(rec["shape"])
            n = int(np.prod(shape)) if shape else 1
            check_element_count(n, f"checkpoint tensor {rec['name']}")
            raw = read_exact(f, n * 4, f"tensor {rec['name']}")
            arrays[rec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        extra = f.read(1)
        if extra:
            raise ValueError("checkpoint blob has trailing bytes beyond the manifest")
    meta = {k: v for k, v in manifest.items() if k not in ("format", "tensors")}
    return arrays, meta


def save_checkpoint(params: ModelParams, stem) -> None:
    meta = {
        "kind": "model",
        "config": params.cfg.to_json(),
        "input_extent": list(params.input_extent) if params.input_extent else None,
        **params.meta,
    }
    save_arrays(stem, {k: t.value for k, t in params.tensors.items()}, meta)


def load_checkpoint(stem) -> ModelParams:
    arrays, meta = load_arrays(stem)
    if meta.get("kind") != "model":
        raise ValueError(f"checkpoint kind {meta.get('kind')!r} is not a model")
    cfg = ModelConfig.from_json(meta["config"])
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    extent = meta.get("input_extent")
    params = ModelParams(cfg, tensors, tuple(extent) if extent else None,
                         {k: v for k, v in meta.items()
                          if k not in ("kind", "config", "input_extent")})
    return params
