"""Parallel-branch training loop, Adam, learning-rate schedule and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataio import (
    Sample,
    load_dataset,
    psnr,
    read_rten_records,
    sidecar,
    ssim,
    subset_seed,
    write_json,
    write_rten_records,
)
from .kspace import Mask, SubsetPair, apply_At, make_selection_subsets
from .model import ModelParams, init_params, magnitude, reconstruct
from .objective import LossMode, LossWeights, total_loss

log = logging.getLogger(__name__)


# -- configuration --------------------------------------------------------


@dataclasses.dataclass
class Seeds:
    mask: int = 0
    subsets: int = 1
    init1: int = 2
    init2: int = 3
    shuffle: int = 4


@dataclasses.dataclass
class Paths:
    train: str | None = None
    val: str | None = None
    out: str | None = None


@dataclasses.dataclass
class TrainConfig:
    image_size: int = 256
    accel: float = 4
    acs_full: int = 24
    acs_sel: int = 16
    K: int = 9
    channels: int = 16
    batch_size: int = 4
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-5
    max_epochs: int = 100
    loss_mode: str = "parallel"
    share_params: bool = False
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    seeds: Seeds = dataclasses.field(default_factory=Seeds)
    paths: Paths = dataclasses.field(default_factory=Paths)
    resample_subsets_per_epoch: bool = False
    # ssdu only: loss on scanned points outside the input subset instead of all scanned points
    ssdu_disjoint: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        if isinstance(self.paths, dict):
            self.paths = Paths(**self.paths)
        self.loss_mode = LossMode(self.loss_mode).value
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def mode(self) -> LossMode:
        return LossMode(self.loss_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- optimizer ------------------------------------------------------------


@dataclasses.dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState, bool]:
    """One bias-corrected Adam update. Returns (params, state, applied).

    A non-finite gradient skips the update and leaves params and state as they were.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s, skipping update", k)
            return params, state, False
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, dataclasses.replace(state, m=new_m, v=new_v, t=t), True


# -- schedule -------------------------------------------------------------


@dataclasses.dataclass
class PlateauState:
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0


def lr_at(epoch: int, plateau: PlateauState, config: TrainConfig) -> float:
    """Linear warm-up from base_lr/10 to base_lr, then plateau decay."""
    if epoch < 1:
        raise ValueError(f"epochs count from 1, got {epoch}")
    w, base = config.warmup_epochs, config.base_lr
    if epoch <= w:
        if w == 1:
            return base
        return base / 10 + (base - base / 10) * (epoch - 1) / (w - 1)
    return base * config.plateau_factor**plateau.reductions


def update_plateau(plateau: PlateauState, epoch: int, val_loss: float, config: TrainConfig) -> PlateauState:
    """Track the monitored loss; a reduction fires after ``patience`` epochs without improvement.

    Warm-up epochs only update the best value.
    """
    p = dataclasses.replace(plateau)
    if val_loss < p.best - config.plateau_min_delta:
        p.best, p.bad_epochs = val_loss, 0
    elif epoch > config.warmup_epochs:
        p.bad_epochs += 1
        if p.bad_epochs >= config.plateau_patience:
            p.reductions += 1
            p.bad_epochs = 0
    return p


# -- one step -------------------------------------------------------------


@dataclasses.dataclass
class Branches:
    """Parameters and optimizer state of both branches.

    When shared, ``params2``/``adam2`` are the same objects as branch 1.
    """

    params1: ModelParams
    params2: ModelParams
    adam1: AdamState
    adam2: AdamState
    shared: bool

    @classmethod
    def init(cls, config: TrainConfig) -> "Branches":
        p1 = init_params(config.K, config.channels, config.seeds.init1)
        a1 = AdamState.zeros_like(p1.as_dict())
        if config.share_params or not config.mode.two_branch:
            return cls(p1, p1, a1, a1, True)
        p2 = init_params(config.K, config.channels, config.seeds.init2)
        return cls(p1, p2, a1, AdamState.zeros_like(p2.as_dict()), False)


def sample_graph(sample: Sample, b: Branches, config: TrainConfig, subsets: SubsetPair | None = None):
    """Build one case's graph. Returns (graph, root, components, leaves1, leaves2)."""
    g = ad.Graph()
    subs = subsets or sample.subsets
    P1 = b.params1.lift(g)
    P2 = P1 if b.shared else b.params2.lift(g)
    mode = config.mode
    y, parent = sample.y, sample.mask
    if mode.two_branch:
        br1 = reconstruct(g.leaf(y * subs.sub1.pattern, name="y1"), subs.sub1, P1)
        br2 = reconstruct(g.leaf(y * subs.sub2.pattern, name="y2"), subs.sub2, P2)
        root, comps = total_loss(br1, br2, y, parent, config.weights, mode)
    elif mode is LossMode.SSDU:
        br1 = reconstruct(g.leaf(y * subs.sub1.pattern, name="y1"), subs.sub1, P1)
        lm = parent.pattern * (1.0 - subs.sub1.pattern) if config.ssdu_disjoint else parent
        root, comps = total_loss(br1, None, y, parent, config.weights, mode, loss_mask=lm)
    else:
        if sample.image is None:
            raise ValueError(f"supervised mode: sample {sample.id} has no ground-truth image")
        br1 = reconstruct(g.leaf(y, name="y"), parent, P1)
        root, comps = total_loss(br1, None, y, parent, config.weights, mode, ground_truth=sample.image)
    return g, root, comps, P1, P2


def _grads(P: ModelParams) -> dict[str, np.ndarray]:
    return {name: node.grad for name, node in P.named()}


def train_step(batch: Sequence[Sample], b: Branches, config: TrainConfig, lr: float, subsets=None):
    """Forward/backward over a batch (gradients averaged in sample order), then Adam.

    Returns (mean loss components, updated Branches).
    """
    n = len(batch)
    acc1: dict[str, np.ndarray] | None = None
    acc2: dict[str, np.ndarray] | None = None
    comp_sums: dict[str, float] = {}
    for i, sample in enumerate(batch):
        g, root, comps, P1, P2 = sample_graph(sample, b, config, None if subsets is None else subsets[i])
        loss = float(root.value)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss on sample {sample.id}")
        ad.backward(g, root)
        g1 = _grads(P1)
        acc1 = g1 if acc1 is None else {k: acc1[k] + g1[k] for k in acc1}
        if not b.shared:
            g2 = _grads(P2)
            acc2 = g2 if acc2 is None else {k: acc2[k] + g2[k] for k in acc2}
        comp_sums["total"] = comp_sums.get("total", 0.0) + loss
        for k, node in comps.items():
            comp_sums[k] = comp_sums.get(k, 0.0) + float(node.value)
    comps_mean = {k: v / n for k, v in comp_sums.items()}

    K, C = b.params1.K, b.params1.channels
    d1, s1, _ = adam_step(b.params1.as_dict(), {k: v / n for k, v in acc1.items()}, b.adam1, lr)
    p1 = ModelParams.from_dict(d1, K, C)
    if b.shared:
        return comps_mean, Branches(p1, p1, s1, s1, True)
    d2, s2, _ = adam_step(b.params2.as_dict(), {k: v / n for k, v in acc2.items()}, b.adam2, lr)
    return comps_mean, Branches(p1, ModelParams.from_dict(d2, K, C), s1, s2, False)


# -- evaluation -----------------------------------------------------------


def validation_loss(samples: Sequence[Sample], b: Branches, config: TrainConfig) -> float:
    """Mean training objective on held-out cases (needs no ground truth except in supervised mode)."""
    if not samples:
        return float("nan")
    return float(np.mean([float(sample_graph(s, b, config)[1].value) for s in samples]))


def reconstruct_sample(sample: Sample, params: ModelParams) -> np.ndarray:
    """Test-phase reconstruction from the full undersampled data."""
    x, _ = reconstruct(sample.y, sample.mask, params)
    return x.value


def zero_filled(sample: Sample) -> np.ndarray:
    return apply_At(sample.y, sample.mask)


def image_metrics(samples: Sequence[Sample], params: ModelParams) -> dict | None:
    if not samples or any(s.image is None for s in samples):
        return None
    ps, ss, pz = [], [], []
    can_ssim = min(samples[0].image.shape) >= 11
    for s in samples:
        rec = magnitude(reconstruct_sample(s, params))
        ps.append(psnr(s.image, rec))
        pz.append(psnr(s.image, magnitude(zero_filled(s))))
        if can_ssim:
            ss.append(ssim(s.image, rec))
    out = {"val_psnr": float(np.mean(ps)), "val_psnr_zero_filled": float(np.mean(pz))}
    if can_ssim:
        out["val_ssim"] = float(np.mean(ss))
    return out


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(path, b: Branches, step: int, epoch: int, config: TrainConfig | None = None, force=True) -> Path:
    names, arrays = [], []
    branches = [("branch1", b.params1)] if b.shared else [("branch1", b.params1), ("branch2", b.params2)]
    for prefix, params in branches:
        for name, arr in params.as_dict().items():
            names.append(f"{prefix}/{name}")
            arrays.append(np.asarray(arr, dtype=np.float64))
    path = write_rten_records(path, arrays, force)
    manifest = {
        "K": b.params1.K,
        "channels": b.params1.channels,
        "shared": b.shared,
        "names": names,
        "shapes": [list(a.shape) for a in arrays],
        "training_step": step,
        "epoch": epoch,
    }
    if config is not None:
        manifest["config"] = config.to_dict()
    write_json(sidecar(path), manifest, force)
    return path


def load_checkpoint(path) -> tuple[ModelParams, ModelParams, dict]:
    """Returns (branch1, branch2, manifest); branch2 is branch1 for shared checkpoints."""
    manifest = json.loads(sidecar(path).read_text())
    arrays = read_rten_records(path)
    if len(arrays) != len(manifest["names"]):
        raise ValueError(f"{path}: {len(arrays)} records but manifest lists {len(manifest['names'])}")
    tensors: dict[str, dict] = {"branch1": {}, "branch2": {}}
    for name, shape, arr in zip(manifest["names"], manifest["shapes"], arrays):
        if list(arr.shape) != shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, manifest says {shape}")
        prefix, pname = name.split("/", 1)
        tensors[prefix][pname] = arr
    K, C = manifest["K"], manifest["channels"]
    p1 = ModelParams.from_dict(tensors["branch1"], K, C)
    p2 = ModelParams.from_dict(tensors["branch2"], K, C) if tensors["branch2"] else p1
    return p1, p2, manifest


# -- fit ------------------------------------------------------------------


@dataclasses.dataclass
class FitResult:
    log: list[dict]
    branches: Branches
    best_checkpoint: Path | None
    last_checkpoint: Path | None


def _check_samples(samples: Sequence[Sample], config: TrainConfig, label: str):
    for s in samples:
        if s.y.shape[1:] != (config.image_size, config.image_size):
            raise ValueError(
                f"{label} sample {s.id} has size {s.y.shape[1:]}, config.image_size is {config.image_size}"
            )


def _resampled(samples, config, epoch):
    return [
        make_selection_subsets(s.mask, config.acs_sel, subset_seed(config.seeds.subsets, i, epoch))
        for i, s in enumerate(samples)
    ]


def fit_samples(
    config: TrainConfig,
    train: Sequence[Sample],
    val: Sequence[Sample] = (),
    out_dir=None,
    force: bool = True,
) -> FitResult:
    """Train on in-memory samples; writes checkpoints and metrics.jsonl when ``out_dir`` is set."""
    _check_samples(train, config, "train")
    _check_samples(val, config, "val")
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if metrics_path.exists() and not force:
            raise FileExistsError(f"{metrics_path} exists (use --force to overwrite)")
        metrics_path.write_text("")
        write_json(out / "config.json", config.to_dict(), force=True)

    b = Branches.init(config)
    shuffle_rng = np.random.default_rng(config.seeds.shuffle)
    plateau = PlateauState()
    records: list[dict] = []
    step = 0
    best = math.inf
    best_path = last_path = None
    if out is not None and config.max_epochs == 0:
        best_path = last_path = save_checkpoint(out / "last.rten", b, 0, 0, config)

    for epoch in range(1, config.max_epochs + 1):
        lr = lr_at(epoch, plateau, config)
        order = shuffle_rng.permutation(len(train))
        subsets = _resampled(train, config, epoch) if config.resample_subsets_per_epoch else None
        sums: dict[str, float] = {}
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [train[i] for i in idx]
            batch_subs = [subsets[i] for i in idx] if subsets is not None else None
            comps, b = train_step(batch, b, config, lr, batch_subs)
            step += 1
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
        train_comps = {k: v / len(train) for k, v in sums.items()}
        rec = {"epoch": epoch, "lr": lr, "step": step, "train": train_comps}
        if val:
            val_loss = validation_loss(val, b, config)
            rec["val_loss"] = val_loss
            metrics = image_metrics(val, b.params1)
            if metrics:
                rec.update(metrics)
            plateau = update_plateau(plateau, epoch, val_loss, config)
            monitor = val_loss
        else:
            plateau = update_plateau(plateau, epoch, train_comps["total"], config)
            monitor = train_comps["total"]
        if not math.isfinite(monitor):
            raise FloatingPointError(f"non-finite monitored loss at epoch {epoch}")
        records.append(rec)
        log.info("epoch %d lr %.3g train %.6g%s", epoch, lr, train_comps["total"],
                 f" val {rec['val_loss']:.6g}" if "val_loss" in rec else "")
        if out is not None:
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if monitor < best:
                best = monitor
                best_path = save_checkpoint(out / "best.rten", b, step, epoch, config)
            last_path = save_checkpoint(out / "last.rten", b, step, epoch, config)
    return FitResult(records, b, best_path, last_path)


def fit(config: TrainConfig, force: bool = True) -> FitResult:
    if not config.paths.train:
        raise ValueError("config.paths.train is required")
    try:
        train = load_dataset(config.paths.train)
        val = load_dataset(config.paths.val) if config.paths.val else []
    except OSError as e:
        raise OSError(f"failed to load datasets: {e}") from e
    return fit_samples(config, train, val, config.paths.out, force=force)


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
