"""Desk-scale synthetic experiment used by scripts/ and the acceptance suite.

40 training and 10 validation blob phantoms at 32x32, 4x acceleration,
K=5 phases with 8 channels. The ACS widths are scaled down from the
256x256 setting (24/16 rows) because 24 full rows alone would exceed the
4x budget of a 32x32 grid.
"""

from __future__ import annotations

import dataclasses
import time

from .dataio import Sample, phantom, prepare_samples
from .trainer import FitResult, Seeds, TrainConfig, fit_samples

TOY = dict(
    image_size=32,
    accel=4,
    acs_full=4,
    acs_sel=2,
    K=5,
    channels=8,
    batch_size=4,
    base_lr=2e-3,
    warmup_epochs=3,
    plateau_factor=0.5,
    plateau_patience=5,
    max_epochs=30,
)
N_TRAIN, N_VAL = 40, 10
DATA_SEED = 2021


def toy_config(mode: str = "parallel", replicate: int = 0, **overrides) -> TrainConfig:
    seeds = Seeds(mask=DATA_SEED, subsets=DATA_SEED + 1, init1=100 + 2 * replicate,
                  init2=101 + 2 * replicate, shuffle=500 + replicate)
    cfg = dict(TOY, loss_mode=mode, seeds=seeds)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def toy_data(seed: int = DATA_SEED, n_train: int = N_TRAIN, n_val: int = N_VAL) -> tuple[list[Sample], list[Sample]]:
    n = TOY["image_size"]
    imgs = [phantom(n, "blobs", seed * 1000 + i) for i in range(n_train + n_val)]
    samples = prepare_samples(imgs, TOY["accel"], TOY["acs_full"], TOY["acs_sel"], seed)
    return samples[:n_train], samples[n_train:]


@dataclasses.dataclass
class ToyRun:
    result: FitResult
    seconds: float

    @property
    def log(self):
        return self.result.log

    @property
    def final_psnr(self) -> float:
        return self.log[-1]["val_psnr"]

    @property
    def zero_filled_psnr(self) -> float:
        return self.log[-1]["val_psnr_zero_filled"]

    @property
    def loss_drop(self) -> float:
        first, last = self.log[0]["train"]["total"], self.log[-1]["train"]["total"]
        return 1.0 - last / first


def run_toy(mode: str = "parallel", replicate: int = 0, data=None, out_dir=None, **overrides) -> ToyRun:
    train, val = data or toy_data()
    cfg = toy_config(mode, replicate, **overrides)
    t0 = time.perf_counter()
    res = fit_samples(cfg, train, val, out_dir)
    return ToyRun(res, time.perf_counter() - t0)
