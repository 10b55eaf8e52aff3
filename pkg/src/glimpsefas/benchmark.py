"""Synthetic direction benchmark: fused vs global-only, DRL vs random, two-stage vs one-stage."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import torch

from .metrics import eer
from .model import ModelConfig
from .synthdata import SynthConfig, generate_dataset, split_protocol
from .training import (
    TrainConfig,
    build_stage2_model,
    evaluate,
    pretrain_stage1,
    train_end_to_end,
    train_stage2,
)

ARMS = ("global_only", "full", "random", "two_stage_T2", "one_stage_T2")


@dataclass
class BenchmarkConfig:
    """Dataset sizes, artifact difficulty and training budget of the benchmark."""

    seeds: tuple[int, ...] = (0, 1, 2)
    n_train: int = 2000
    n_dev: int = 400
    n_test: int = 400
    image_size: int = 64
    artifact_size: int = 9
    artifact_amplitude: float = 0.07
    amplitude_spread: float = 0.8
    model: ModelConfig = field(default_factory=lambda: ModelConfig(patch_size=4, steps=4))
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs_stage1=15, epochs_stage2=15, augment=True)
    )


def _splits(cfg: BenchmarkConfig, seed: int):
    n = cfg.n_train + cfg.n_dev + cfg.n_test
    synth = SynthConfig(
        image_size=cfg.image_size,
        n_genuine=n // 2,
        n_attack=n - n // 2,
        artifact_size=cfg.artifact_size,
        artifact_amplitude=cfg.artifact_amplitude,
        amplitude_spread=cfg.amplitude_spread,
        seed=seed,
    )
    return split_protocol(generate_dataset(synth), (cfg.n_train / n, cfg.n_dev / n, cfg.n_test / n), seed)


def run_seed(cfg: BenchmarkConfig, seed: int, log: Callable[[str], None] = lambda _: None) -> dict[str, float]:
    """Test EER of every arm for one seed; the stage-1 backbone is shared by the two-stage arms."""
    torch.set_num_threads(1)
    split = _splits(cfg, seed)
    mc = replace(cfg.model, input_size=cfg.image_size)
    tc = replace(cfg.train, seed=seed)
    mc_t2 = replace(mc, steps=2)
    stage1 = pretrain_stage1(split.train, mc, tc)

    def two_stage(model_cfg, ablation, selector):
        model = build_stage2_model(stage1, model_cfg, ablation, selector, seed)
        train_stage2(model, split.train, tc)
        return model

    builders = {
        "global_only": lambda: two_stage(mc, "global_only", "drl"),
        "full": lambda: two_stage(mc, "full", "drl"),
        "random": lambda: two_stage(mc, "full", "random"),
        "two_stage_T2": lambda: two_stage(mc_t2, "full", "drl"),
        "one_stage_T2": lambda: train_end_to_end(split.train, mc_t2, replace(tc, scheme="one_stage")).build(),
    }
    out = {}
    for arm in ARMS:
        t0 = time.perf_counter()
        out[arm] = eer(evaluate(builders[arm](), split.test))[0]
        log(f"seed {seed} {arm:<13} EER {out[arm]:.4f} {time.perf_counter() - t0:.0f}s")
    return out


def run_benchmark(cfg: BenchmarkConfig | None = None, log: Callable[[str], None] = lambda _: None) -> dict:
    """Per-seed EERs plus their per-arm median."""
    cfg = cfg or BenchmarkConfig()
    per_seed = {seed: run_seed(cfg, seed, log) for seed in cfg.seeds}
    median = {arm: statistics.median(r[arm] for r in per_seed.values()) for arm in ARMS}
    return {"per_seed": per_seed, "median": median}
