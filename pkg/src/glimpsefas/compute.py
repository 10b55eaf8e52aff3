"""Parameter and multiply-accumulate accounting.

MACs count convolution and linear layers only (bias adds, normalisation,
pooling and elementwise gates are ignored).  The classifier is counted once
per episode; the per-step confidences are a reporting extra.
"""
from __future__ import annotations

import time
from dataclasses import replace

import torch

from .model import GlimpseNet, ModelConfig


def count_parameters(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _conv(cin, cout, k, out_side):
    return cin * cout * k * k * out_side * out_side


def _block(cin, cout, out_side):
    n = _conv(cin, cout, 3, out_side) + _conv(cout, cout, 3, out_side)
    return n


def _stage(cin, cout, stride, in_side):
    out = in_side // stride
    n = _block(cin, cout, out) + _block(cout, cout, out)
    if stride != 1 or cin != cout:
        n += _conv(cin, cout, 1, out)
    return n


def mac_breakdown(cfg: ModelConfig) -> dict[str, int]:
    c_in, c0, c1, c2 = cfg.backbone_channels
    D, p = cfg.feature_dim, cfg.patch_size
    k_g = cfg.glimpse_kernel or p
    side = cfg.input_size
    stem_side = side // 2
    pool_side = stem_side // 2
    backbone = (
        _conv(c_in, c0, cfg.stem_kernel, stem_side)
        + _stage(c0, c1, 1, pool_side)
        + _stage(c1, c2, 2, pool_side)
    )
    f = cfg.map_side
    branch1 = _stage(c2, D // 2, 1, f) + _stage(D // 2, D, 1, f)
    glimpse = _conv(c2, D // 2, k_g, p - k_g + 1) + (D // 2) * D + 2 * D + 2 * D * D
    gru = 6 * D * D
    policy = D * D + 2 * D
    fused = 2 * D if cfg.fusion == "concat" else D
    return {
        "backbone": backbone,
        "branch1": branch1,
        "glimpse_per_step": glimpse,
        "gru_per_step": gru,
        "policy_per_step": policy,
        "classifier": fused * 2,
    }


def step_cost(cfg: ModelConfig) -> int:
    b = mac_breakdown(cfg)
    return b["glimpse_per_step"] + b["gru_per_step"] + b["policy_per_step"]


def episode_macs(cfg: ModelConfig, steps: int | None = None) -> int:
    """MACs of one deterministic episode; the policy runs after all but the last step."""
    T = cfg.steps if steps is None else steps
    b = mac_breakdown(cfg)
    return b["backbone"] + b["branch1"] + b["classifier"] + T * step_cost(cfg) - b["policy_per_step"]


def hooked_macs(model: GlimpseNet, images: torch.Tensor) -> int:
    """Count conv/linear MACs actually executed during one deterministic episode."""
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        k = mod.kernel_size[0] * mod.kernel_size[1]
        total += out.numel() // out.shape[0] * mod.in_channels * k // mod.groups

    def lin_hook(mod, inp, out):
        nonlocal total
        total += mod.in_features * mod.out_features

    handles = []
    for m in model.modules():
        if isinstance(m, torch.nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, torch.nn.Linear):
            handles.append(m.register_forward_hook(lin_hook))
    try:
        with torch.no_grad():
            model.eval()
            model.run_episode(images[:1])
    finally:
        for h in handles:
            h.remove()
    return total


def measure_fps(model: GlimpseNet, n: int = 8) -> float:
    x = torch.rand(n, 3, model.cfg.input_size, model.cfg.input_size)
    model.eval()
    with torch.no_grad():
        model.run_episode(x[:1])
        t0 = time.perf_counter()
        for i in range(n):
            model.run_episode(x[i : i + 1])
        dt = time.perf_counter() - t0
    return n / dt


def compute_report(model: GlimpseNet, steps: list[int] | None = None, fps: bool = False) -> dict:
    cfg = model.cfg
    steps = steps or sorted({4, 8, cfg.steps})
    rep = {
        "parameters": count_parameters(model),
        "macs_per_step": step_cost(cfg),
        "macs": {str(T): episode_macs(replace(cfg, steps=T), T) for T in steps},
        "breakdown": mac_breakdown(cfg),
    }
    if fps:
        rep["fps"] = measure_fps(model)
    return rep
