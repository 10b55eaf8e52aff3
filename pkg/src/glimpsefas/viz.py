"""Trajectory overlays and class activation maps."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F_
from PIL import Image, ImageDraw

from .model import ATTACK_INDEX, GlimpseNet, window_start
from .policy import DETERMINISTIC

DOWNSAMPLE = 8


def trajectory(model: GlimpseNet, image: torch.Tensor) -> list[dict]:
    """Deterministic episode as rows ``t, l_x, l_y, c_t`` plus pixel boxes."""
    model.eval()
    with torch.no_grad():
        out = model.forward_episode(image, DETERMINISTIC, torch.Generator().manual_seed(0))
    side, p = model.cfg.map_side, model.cfg.patch_size
    rows = []
    actions = out.trajectory.actions[0]
    for t in range(model.cfg.steps):
        if t < actions.shape[0]:
            lx, ly = (float(v) for v in actions[t])
            c0 = int(window_start(torch.tensor(lx), side, p))
            r0 = int(window_start(torch.tensor(ly), side, p))
            box = (c0 * DOWNSAMPLE, r0 * DOWNSAMPLE, (c0 + p) * DOWNSAMPLE - 1, (r0 + p) * DOWNSAMPLE - 1)
        else:  # global-only models take no glimpses
            lx = ly = float("nan")
            box = None
        rows.append({"t": t + 1, "l_x": lx, "l_y": ly, "c_t": float(out.step_confidences[0, t]), "box": box})
    return rows


def draw_overlay(image: np.ndarray, rows: list[dict], scale: int = 4) -> Image.Image:
    """Input image with one labelled rectangle per glimpse, upscaled by ``scale``."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = arr.shape[:2]
    im = Image.fromarray(arr, "RGB").resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    n = len(rows)
    for i, r in enumerate(rows):
        if r["box"] is None:
            continue
        x0, y0, x1, y1 = (v * scale for v in r["box"])
        x1, y1 = x1 + scale - 1, y1 + scale - 1
        shade = int(255 * (i + 1) / n)
        colour = (255, 255 - shade, 0)
        draw.rectangle([x0, y0, x1, y1], outline=colour, width=max(1, scale // 2))
        draw.text((x0 + 2, y0 + 1), str(r["t"]), fill=colour)
    return im


def write_trajectory_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "l_x", "l_y", "c_t"])
        for r in rows:
            w.writerow([r["t"], f"{r['l_x']:.9g}", f"{r['l_y']:.9g}", f"{r['c_t']:.9g}"])


def minmax(x: torch.Tensor) -> torch.Tensor:
    lo, hi = x.min(), x.max()
    if not bool(hi > lo):
        return torch.zeros_like(x)
    return (x - lo) / (hi - lo)


def cam_from_activations(acts: torch.Tensor, weights: torch.Tensor, size: int) -> torch.Tensor:
    """``sum_c w_c A_c``, min-max normalised then bilinearly resized to ``size``.

    ``acts`` is ``(C, h, w)``; normalisation happens before resizing so a
    constant map yields zeros.
    """
    heat = minmax(torch.einsum("c,chw->hw", weights, acts))
    up = F_.interpolate(heat[None, None], size=(size, size), mode="bilinear", align_corners=False)[0, 0]
    return up.clamp(0, 1)


def class_activation_map(model: GlimpseNet, image: torch.Tensor) -> torch.Tensor:
    """Attack-class evidence of the global branch over the input plane."""
    model.eval()
    D = model.cfg.feature_dim
    with torch.no_grad():
        acts = model.branch1.activation_map(model.backbone_embed(image.unsqueeze(0)))[0]
        w = model.classifier.weight[ATTACK_INDEX, :D].clone()
        if model.fusion.method == "average":
            w = 0.5 * w
        elif model.fusion.method == "weighted_average":
            w = model.fusion.weights()[0] * w
    return cam_from_activations(acts, w, model.cfg.input_size)


def heatmap_image(heat: torch.Tensor) -> Image.Image:
    from matplotlib import colormaps

    rgba = colormaps["jet"](heat.numpy())
    return Image.fromarray(np.round(rgba[..., :3] * 255).astype(np.uint8), "RGB")
