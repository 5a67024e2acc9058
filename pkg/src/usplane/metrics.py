"""Geometric and sequence-consistency evaluation.

Per-slice accuracy uses the anchor-coordinate Euclidean distance (ED, mean
over the three corners, in voxels) and the acute dihedral angle (DA) between
predicted and true planes. Unlabeled sweeps are scored by the rate of change
delta_c = ED of consecutive predictions / (1 - NCC of the frames), whose
mean-normalized standard deviation (NSTD) should be low for a smooth,
consistent localization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import geom3d
from .pipeline import infer
from .volume import SliceImage

DELTA_C_EPS = 1e-6


def ncc(a: SliceImage, b: SliceImage) -> float:
    """Zero-mean, unit-variance normalized cross-correlation over all pixels."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"ncc needs equal extents, got {a.pixels.shape} vs {b.pixels.shape}")
    x = a.pixels.astype(np.float64).ravel()
    y = b.pixels.astype(np.float64).ravel()
    x = x - x.mean()
    y = y - y.mean()
    sx = np.sqrt(np.mean(x * x))
    sy = np.sqrt(np.mean(y * y))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("ncc undefined for a zero-variance image")
    return float(np.mean(x * y) / (sx * sy))


def delta_c(
    pred_i: geom3d.PlaneLocation,
    pred_next: geom3d.PlaneLocation,
    img_i: SliceImage,
    img_next: SliceImage,
) -> float:
    """Predicted-plane step size normalized by frame dissimilarity."""
    c = ncc(img_i, img_next)
    if c >= 1.0 - DELTA_C_EPS:
        raise ValueError(f"degenerate frame pair: ncc = {c} leaves delta_c undefined")
    return geom3d.anchor_distance(pred_i, pred_next) / (1.0 - c)


def nstd(series) -> float:
    """Population standard deviation of the series divided by its mean."""
    series = np.asarray(series, dtype=np.float64)
    if series.size < 2:
        raise ValueError("nstd needs at least 2 values")
    mean = float(series.mean())
    if mean <= 0:
        raise ValueError(f"nstd undefined for mean {mean} <= 0")
    return float(series.std() / mean)


@dataclass
class EvalReport:
    """Per-item metrics plus the aggregates derived from them."""

    per_slice_ed: list[float] = field(default_factory=list)
    per_slice_da: list[float] = field(default_factory=list)
    sweep_delta_c: list[list[float]] = field(default_factory=list)
    sweep_nstd: list[float] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def ed_mean(self) -> float:
        return float(np.mean(self.per_slice_ed)) if self.per_slice_ed else float("nan")

    @property
    def ed_std(self) -> float:
        return float(np.std(self.per_slice_ed)) if self.per_slice_ed else float("nan")

    @property
    def da_mean(self) -> float:
        return float(np.mean(self.per_slice_da)) if self.per_slice_da else float("nan")

    @property
    def da_std(self) -> float:
        return float(np.std(self.per_slice_da)) if self.per_slice_da else float("nan")

    def to_json(self) -> dict:
        return {
            "per_slice_ed": self.per_slice_ed,
            "per_slice_da": self.per_slice_da,
            "ed_mean": self.ed_mean, "ed_std": self.ed_std,
            "da_mean": self.da_mean, "da_std": self.da_std,
            "sweep_delta_c": self.sweep_delta_c,
            "sweep_nstd": self.sweep_nstd,
            "config_echo": self.config_echo,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        return cls(
            per_slice_ed=list(data.get("per_slice_ed", [])),
            per_slice_da=list(data.get("per_slice_da", [])),
            sweep_delta_c=[list(s) for s in data.get("sweep_delta_c", [])],
            sweep_nstd=list(data.get("sweep_nstd", [])),
            config_echo=data.get("config_echo", {}),
            seed=data.get("seed"),
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["kind", "group", "index", "value"])
            for i, (ed, da) in enumerate(zip(self.per_slice_ed, self.per_slice_da)):
                writer.writerow(["ed", "", i, repr(ed)])
                writer.writerow(["da", "", i, repr(da)])
            for s, series in enumerate(self.sweep_delta_c):
                for i, v in enumerate(series):
                    writer.writerow(["delta_c", s, i, repr(v)])
            for s, v in enumerate(self.sweep_nstd):
                writer.writerow(["nstd", s, "", repr(v)])


def evaluate(
    params,
    labeled: list[SliceImage] | None = None,
    sweeps: list[list[SliceImage]] | None = None,
    predictions: list[geom3d.PlaneLocation] | None = None,
    config_echo: dict | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Score a model on located slices and/or unlabeled sweeps.

    `predictions` may override the model on the labeled set (e.g. to score
    stored predictions); sweeps are always predicted from `params`.
    """
    if not labeled and not sweeps:
        raise ValueError("evaluate needs labeled slices and/or sweeps")
    report = EvalReport(config_echo=config_echo or {}, seed=seed)
    if labeled:
        preds = predictions if predictions is not None else infer(params, labeled)
        if len(preds) != len(labeled):
            raise ValueError(f"{len(preds)} predictions for {len(labeled)} slices")
        for img, pred in zip(labeled, preds):
            if img.location is None:
                raise ValueError("labeled evaluation requires slice locations")
            report.per_slice_ed.append(geom3d.anchor_distance(pred, img.location))
            report.per_slice_da.append(geom3d.dihedral_angle(pred, img.location))
    for seq in sweeps or []:
        preds = infer(params, seq)
        series = [
            delta_c(preds[i], preds[i + 1], seq[i], seq[i + 1])
            for i in range(len(seq) - 1)
        ]
        report.sweep_delta_c.append(series)
        report.sweep_nstd.append(nstd(series))
    return report
