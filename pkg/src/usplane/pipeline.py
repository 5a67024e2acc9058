"""Training, cycle-consistency fine-tuning, and inference.

Supervised training regresses plane locations and pairwise displacements of
slices sampled from a reference volume. Fine-tuning adapts the model to
unlabeled images from another appearance domain: the displacements along a
chain source -> target_1 -> ... -> target_m -> source must compose to the
known source-to-source displacement, and that residual is the cycle loss.
A supervised term on source slices regularizes the adaptation so the
location head cannot drift into degenerate solutions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geom3d
from .augment import AugmentSpec, augment
from .network import ModelParams, encode, predict_displacement, predict_location, save_checkpoint
from .optim import AdamState, PlateauScheduler, adam_step
from .volume import SliceImage, Volume, extract_slice


def default_train_augment() -> AugmentSpec:
    return AugmentSpec(scale_range=(0.95, 1.05), translate_px=2.0,
                       contrast_range=(0.9, 1.1), noise_sigma=0.01)


def default_cycle_augment() -> AugmentSpec:
    # Appearance-only: a geometric transform of an unlabeled frame would move
    # its (unknown) plane, and the two views of a shared frame would then sit
    # on different planes, biasing the telescoped chain.
    return AugmentSpec(contrast_range=(0.85, 1.15), noise_sigma=0.02)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    w_loc: float = 1.0
    w_disp: float = 0.5
    max_steps: int = 500
    eval_every: int = 25
    plateau_patience: int = 3
    early_stop_patience: int = 12
    lr_factor: float = 0.5
    val_fraction: float = 0.1
    # Supervised training halves lr on validation plateau; unsupervised
    # fine-tuning has no labeled validation signal, so it halves at these
    # fixed step fractions instead.
    lr_halve_fractions: tuple[float, ...] = (0.6, 0.85)
    seed: int = 0
    augment: AugmentSpec | None = field(default_factory=default_train_augment)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (displacement pairs)")
        if self.w_loc < 0 or self.w_disp < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_json(self):
        out = {k: getattr(self, k) for k in (
            "batch_size", "lr", "w_loc", "w_disp", "max_steps", "eval_every",
            "plateau_patience", "early_stop_patience", "lr_factor", "val_fraction",
            "seed", "checkpoint_every")}
        out["lr_halve_fractions"] = list(self.lr_halve_fractions)
        out["augment"] = self.augment.to_json() if self.augment else None
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        aug = data.pop("augment", "unset")
        data["lr_halve_fractions"] = tuple(data.get("lr_halve_fractions", (0.6, 0.85)))
        cfg = cls(**data)
        if aug != "unset":
            cfg.augment = AugmentSpec.from_json(aug) if aug else None
        return cfg


@dataclass
class CycleConfig:
    w_cycle: float = 1.0
    cycle_len: int = 3
    mix_ratio: tuple[int, int] = (1, 1)
    augment: AugmentSpec = field(default_factory=default_cycle_augment)

    def __post_init__(self):
        if self.cycle_len < 1:
            raise ValueError("cycle_len must be at least 1")
        if self.w_cycle < 0:
            raise ValueError("w_cycle must be nonnegative")
        if min(self.mix_ratio) < 1:
            raise ValueError("mix_ratio entries must be at least 1")

    def to_json(self):
        return {"w_cycle": self.w_cycle, "cycle_len": self.cycle_len,
                "mix_ratio": list(self.mix_ratio), "augment": self.augment.to_json()}

    @classmethod
    def from_json(cls, data: dict) -> "CycleConfig":
        data = dict(data)
        aug = data.pop("augment", None)
        data["mix_ratio"] = tuple(data.get("mix_ratio", (1, 1)))
        cfg = cls(**data)
        if aug is not None:
            cfg.augment = AugmentSpec.from_json(aug)
        return cfg


@dataclass
class CycleBatch:
    """One consistency chain: two located source slices bracketing a run of
    unlabeled target frames, plus fresh augmentation sub-seeds per link."""

    source_i: SliceImage
    source_k: SliceImage
    targets: list[SliceImage]
    link_seeds: np.ndarray  # (n_links, 2), one seed per link endpoint

    @property
    def n_links(self) -> int:
        return len(self.targets) + 1


# ---------------------------------------------------------------------------
# Dataset sampling


def sample_slice_dataset(
    v: Volume,
    n: int,
    seed: int,
    extent: tuple[int, int] = (64, 64),
    spacing: float | None = None,
    offset_radius: float | None = None,
    n_directions: int = 256,
) -> list[SliceImage]:
    """n slices at random poses: normals from a seeded Fibonacci sphere,
    in-plane rotation uniform, centers offset within a ball."""
    rng = np.random.default_rng(seed)
    h, w, d = v.dims
    if spacing is None:
        spacing = (min(h, w, d) - 1) / (max(extent) - 1)
    if offset_radius is None:
        offset_radius = 0.15 * min(h, w, d)
    directions = geom3d.fibonacci_sphere(n_directions, seed=int(rng.integers(2**31)))
    out = []
    for _ in range(n):
        loc = geom3d.sample_pose(directions, rng, (extent[0], extent[1], spacing),
                                 v.center(), offset_radius)
        out.append(extract_slice(v, loc, extent))
    return out


def _batch_anchors(batch: list[SliceImage]) -> np.ndarray:
    missing = [i for i, s in enumerate(batch) if s.location is None]
    if missing:
        raise ValueError(f"slices {missing} carry no plane location")
    return np.stack([s.location.anchors for s in batch])


# ---------------------------------------------------------------------------
# Losses


def training_loss(params: ModelParams, batch: list[SliceImage], cfg: TrainConfig) -> ad.Tensor:
    """Weighted MSE of predicted locations and of adjacent-pair displacements.

    Displacement targets are anchor differences of adjacent batch entries
    (a batch of B contributes B - 1 ordered pairs).
    """
    if len(batch) < 2:
        raise ValueError("training_loss needs a batch of at least 2 slices")
    anchors = _batch_anchors(batch).astype(params.dtype)
    feats = encode(params, batch)
    loc_term = ad.mse(predict_location(params, feats), anchors)
    disp_pred = predict_displacement(params, feats[:-1], feats[1:])
    disp_term = ad.mse(disp_pred, anchors[:-1] - anchors[1:])
    return ad.add(ad.mul(loc_term, cfg.w_loc), ad.mul(disp_term, cfg.w_disp))


def build_cycle(
    source: list[SliceImage],
    targets: list[SliceImage],
    cfg: CycleConfig,
    rng: np.random.Generator,
) -> CycleBatch:
    """Draw one cycle: two random source slices, a run of cycle_len target
    frames (contiguous when the pool is a sequence), and per-link seeds."""
    if not source or not targets:
        raise ValueError("source and target pools must be nonempty")
    i, k = rng.integers(len(source)), rng.integers(len(source))
    if len(source) > 1:
        while k == i:
            k = rng.integers(len(source))
    m = cfg.cycle_len
    if len(targets) >= m:
        start = int(rng.integers(len(targets) - m + 1))
        picked = targets[start: start + m]
    else:
        picked = [targets[int(j)] for j in rng.integers(len(targets), size=m)]
    link_seeds = rng.integers(2**63, size=(m + 1, 2))
    return CycleBatch(source[int(i)], source[int(k)], list(picked), link_seeds)


def _default_link_predictor(params: ModelParams, views_a, views_b) -> ad.Tensor:
    images = []
    for a, b in zip(views_a, views_b):
        images.extend([a.pixels, b.pixels])
    feats = encode(params, np.stack(images))
    return predict_displacement(params, feats[0::2], feats[1::2])


def cycle_loss(
    params: ModelParams,
    cycle: CycleBatch,
    aug_spec: AugmentSpec,
    link_predictor=None,
) -> ad.Tensor:
    """MSE between the composed per-link displacement predictions and the
    known source-to-source displacement.

    Each link augments both of its endpoint images with its own sub-seeds,
    so a frame shared by consecutive links is seen as two different views.
    The target equals the (augmented) source_i anchors minus the (augmented)
    source_k anchors; appearance-only augmentation leaves those unchanged.
    """
    seq = [cycle.source_i] + cycle.targets + [cycle.source_k]
    views_a, views_b = [], []
    for j in range(cycle.n_links):
        views_a.append(augment(seq[j], aug_spec, np.random.default_rng(int(cycle.link_seeds[j, 0]))))
        views_b.append(augment(seq[j + 1], aug_spec, np.random.default_rng(int(cycle.link_seeds[j, 1]))))
    predictor = link_predictor or _default_link_predictor
    link_preds = predictor(params, views_a, views_b)  # (n_links, 3, 3)
    composed = ad.tsum(link_preds, axes=0)
    delta_true = views_a[0].location.anchors - views_b[-1].location.anchors
    return ad.mse(composed, delta_true.astype(params.dtype))


def finetune_loss(
    params: ModelParams,
    cycle: CycleBatch,
    source_batch: list[SliceImage],
    train_cfg: TrainConfig,
    cycle_cfg: CycleConfig,
) -> tuple[ad.Tensor, float, float]:
    """Combined fine-tuning loss w_cycle * l_c + l_t.

    Returns (loss tensor, cycle term value, supervised term value).
    """
    l_c = cycle_loss(params, cycle, cycle_cfg.augment)
    l_t = training_loss(params, source_batch, train_cfg)
    total = ad.add(ad.mul(l_c, cycle_cfg.w_cycle), l_t)
    return total, l_c.item(), l_t.item()


# ---------------------------------------------------------------------------
# Optimization loops


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list[float]
    val_curve: list[tuple[int, float]]
    events: list[dict]
    steps_run: int


class JsonlLogger:
    """Append-only JSON-lines event log; silently off when path is None."""

    def __init__(self, path=None):
        self._f = open(path, "w") if path else None
        self._t0 = time.monotonic()

    def write(self, **record):
        if self._f is not None:
            record.setdefault("wall", round(time.monotonic() - self._t0, 4))
            self._f.write(json.dumps(record) + "\n")

    def close(self):
        if self._f is not None:
            self._f.close()


def _holdout_split(dataset, fraction, rng) -> tuple[list, list]:
    n_val = int(round(len(dataset) * fraction))
    if n_val == 0:
        return list(dataset), []
    order = rng.permutation(len(dataset))
    val = [dataset[int(j)] for j in order[:n_val]]
    train = [dataset[int(j)] for j in order[n_val:]]
    return train, val


def _eval_loss(params: ModelParams, dataset: list[SliceImage], cfg: TrainConfig) -> float:
    total, count = 0.0, 0
    for start in range(0, len(dataset) - 1, cfg.batch_size):
        chunk = dataset[start: start + cfg.batch_size]
        if len(chunk) < 2:
            break
        total += training_loss(params, chunk, cfg).item() * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def _draw_batch(dataset, rng, size, aug: AugmentSpec | None):
    idx = rng.choice(len(dataset), size=size, replace=len(dataset) < size)
    batch = [dataset[int(i)] for i in idx]
    if aug is not None:
        batch = [augment(s, aug, rng) for s in batch]
    return batch

def _abort_diagnostics(step, loss_value, params) -> str:
    worst = max(params.tensors, key=lambda k: float(np.max(np.abs(params.tensors[k].value))))
    peak = float(np.max(np.abs(params.tensors[worst].value)))
    return (f"non-finite loss {loss_value} at step {step}; "
            f"largest parameter magnitude {peak:.3g} in {worst}")


def train(
    params: ModelParams,
    dataset: list[SliceImage],
    cfg: TrainConfig,
    val_dataset: list[SliceImage] | None = None,
    log_path=None,
    checkpoint_dir=None,
) -> TrainResult:
    """Supervised training with plateau lr halving and early stopping.

    All randomness (batch choice, augmentation) flows from cfg.seed, so a
    replay under single-threaded numerics reproduces the loss curve bitwise.
    """
    rng = np.random.default_rng(cfg.seed)
    if val_dataset is None and cfg.val_fraction > 0:
        dataset, val_dataset = _holdout_split(dataset, cfg.val_fraction, rng)
    if len(dataset) < 2:
        raise ValueError("training needs at least 2 located slices")
    params.input_extent = dataset[0].extent

    opt = AdamState.init(params.tensors, lr=cfg.lr)
    sched = PlateauScheduler(patience=cfg.plateau_patience,
                             early_stop_patience=cfg.early_stop_patience,
                             factor=cfg.lr_factor)
    log = JsonlLogger(log_path)
    curve, val_curve, events = [], [], []
    step = 0
    try:
        for step in range(1, cfg.max_steps + 1):
            batch = _draw_batch(dataset, rng, cfg.batch_size, cfg.augment)
            loss = training_loss(params, batch, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(_abort_diagnostics(step, value, params))
            params.zero_grad()
            loss.backward()
            adam_step(opt, params.tensors)
            curve.append(value)
            log.write(step=step, l_t=value, lr=opt.lr)

            if val_dataset and step % cfg.eval_every == 0:
                val_loss = _eval_loss(params, val_dataset, cfg)
                val_curve.append((step, val_loss))
                action = sched.update(val_loss)
                log.write(step=step, event="eval", val_l_t=val_loss, action=action)
                if action == "halve":
                    opt.lr *= cfg.lr_factor
                    events.append({"step": step, "event": "lr_halved", "lr": opt.lr})
                elif action == "stop":
                    events.append({"step": step, "event": "early_stop"})
                    break
            if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(params, f"{checkpoint_dir}/step_{step:06d}")
    finally:
        log.close()
    params.meta["step"] = params.meta.get("step", 0) + step
    if checkpoint_dir:
        save_checkpoint(params, f"{checkpoint_dir}/final")
    return TrainResult(params, curve, val_curve, events, step)


def finetune(
    params: ModelParams,
    source_dataset: list[SliceImage],
    target_images: list[SliceImage],
    train_cfg: TrainConfig,
    cycle_cfg: CycleConfig,
    log_path=None,
    checkpoint_dir=None,
    freeze_encoder: bool = False,
) -> TrainResult:
    """Unsupervised adaptation: per step, mix_ratio[0] supervised source
    batches regularize mix_ratio[1] cycle-consistency terms (Eq-style sum
    w_cycle * l_c + l_t). Target images need no locations."""
    if not target_images:
        raise ValueError("finetune needs a nonempty target image pool")
    if len(source_dataset) < 2:
        raise ValueError("finetune needs at least 2 located source slices")
    rng = np.random.default_rng(train_cfg.seed)
    trainable = {k: t for k, t in params.tensors.items()
                 if not (freeze_encoder and k.startswith("conv"))}
    opt = AdamState.init(trainable, lr=train_cfg.lr)
    log = JsonlLogger(log_path)
    curve, events = [], []
    n_src, n_cyc = cycle_cfg.mix_ratio
    halve_steps = {max(1, int(f * train_cfg.max_steps)) for f in train_cfg.lr_halve_fractions}
    step = 0
    try:
        for step in range(1, train_cfg.max_steps + 1):
            if step in halve_steps:
                opt.lr *= train_cfg.lr_factor
                events.append({"step": step, "event": "lr_halved", "lr": opt.lr})
                log.write(step=step, event="lr_halved", lr=opt.lr)
            cyc_terms, l_c_vals, l_t_vals = [], [], []
            for _ in range(n_cyc):
                cycle = build_cycle(source_dataset, target_images, cycle_cfg, rng)
                l_c = cycle_loss(params, cycle, cycle_cfg.augment)
                cyc_terms.append(l_c)
                l_c_vals.append(l_c.item())
            src_terms = []
            for _ in range(n_src):
                batch = _draw_batch(source_dataset, rng, train_cfg.batch_size, train_cfg.augment)
                l_t = training_loss(params, batch, train_cfg)
                src_terms.append(l_t)
                l_t_vals.append(l_t.item())
            mean_c = ad.mul(_sum_terms(cyc_terms), 1.0 / n_cyc)
            mean_t = ad.mul(_sum_terms(src_terms), 1.0 / n_src)
            loss = ad.add(ad.mul(mean_c, cycle_cfg.w_cycle), mean_t)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(_abort_diagnostics(step, value, params))
            params.zero_grad()
            loss.backward()
            adam_step(opt, trainable)
            curve.append(value)
            log.write(step=step, l_f=value, l_c=float(np.mean(l_c_vals)),
                      l_t=float(np.mean(l_t_vals)), lr=opt.lr)
            if checkpoint_dir and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                save_checkpoint(params, f"{checkpoint_dir}/step_{step:06d}")
    finally:
        log.close()
    params.meta["step"] = params.meta.get("step", 0) + step
    if checkpoint_dir:
        save_checkpoint(params, f"{checkpoint_dir}/final")
    return TrainResult(params, curve, [], events, step)


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def infer(params: ModelParams, images, batch_size: int = 64) -> list[geom3d.PlaneLocation]:
    """Predicted plane locations, one per image; pure in (params, image)."""
    if isinstance(images, np.ndarray):
        pixels = images
    else:
        shapes = {img.pixels.shape for img in images}
        if len(shapes) > 1:
            raise ValueError(f"inference images must share one extent, got {sorted(shapes)}")
        pixels = np.stack([img.pixels for img in images])
    if params.input_extent is not None and tuple(pixels.shape[1:]) != tuple(params.input_extent):
        raise ValueError(
            f"extent mismatch: model trained at {params.input_extent}, images are {pixels.shape[1:]}")
    out = []
    for start in range(0, len(pixels), batch_size):
        chunk = pixels[start: start + batch_size]
        preds = predict_location(params, encode(params, chunk)).value
        out.extend(geom3d.PlaneLocation(p.astype(np.float64)) for p in preds)
    return out
