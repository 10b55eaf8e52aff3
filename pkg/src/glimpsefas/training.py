"""Two-stage and one-stage training, patch-scorer pretraining and scoring."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F_

from .checkpoint import Checkpoint, LoadError, load_strict
from .metrics import ScoreRecord
from .model import ABLATIONS, BONA_FIDE_INDEX, SELECTORS, GlimpseNet, ModelConfig, Stage1Net
from .policy import DETERMINISTIC, STOCHASTIC, PatchScorer, reinforce_loss
from .synthdata import ATTACK, BONA_FIDE, Sample

log = logging.getLogger(__name__)

LABEL_INDEX = {BONA_FIDE: 0, ATTACK: 1}
SCHEMES = ("two_stage", "one_stage")


class TrainingDivergence(FloatingPointError):
    """Raised when a loss turns non-finite."""


@dataclass
class TrainConfig:
    epochs_stage1: int = 20
    epochs_stage2: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    rl_loss_weight: float = 1.0
    seed: int = 0
    selector: str = "drl"
    ablation: str = "full"
    scheme: str = "two_stage"
    # optional moving-average reward baseline for the REINFORCE term
    use_baseline: bool = False
    baseline_momentum: float = 0.9
    scorer_epochs: int = 10
    # epochs for one-stage training; None means epochs_stage2
    epochs_one_stage: int | None = None
    # random flips and quarter turns of each training image
    augment: bool = False

    def validate(self) -> None:
        for name in ("epochs_stage1", "epochs_stage2", "batch_size", "scorer_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.rl_loss_weight < 0:
            raise ValueError("rl_loss_weight must be >= 0")
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")


def to_tensors(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    if not samples:
        raise ValueError("empty sample list")
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    y = torch.tensor([LABEL_INDEX[s.label] for s in samples])
    return x.permute(0, 3, 1, 2).contiguous(), y


def _check_labels(y: torch.Tensor) -> None:
    if len(torch.unique(y)) < 2:
        raise ValueError("training data must contain both labels")


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def dihedral(x: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Apply one of the 8 square symmetries per image; ``codes`` in [0, 8)."""
    out = x.clone()
    for code in range(1, 8):
        sel = codes == code
        if bool(sel.any()):
            y = torch.rot90(x[sel], code % 4, dims=(2, 3))
            out[sel] = y.flip(3) if code >= 4 else y
    return out


def _augmented(x: torch.Tensor, cfg: "TrainConfig", gen: torch.Generator) -> torch.Tensor:
    if not cfg.augment:
        return x
    return dihedral(x, torch.randint(0, 8, (len(x),), generator=gen))


def _finite(loss: torch.Tensor, what: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite {what} ({loss.item()}) in epoch {epoch}")


def _emit(logger: Callable[[dict], None] | None, record: dict) -> None:
    log.info(json.dumps(record, sort_keys=True))
    if logger is not None:
        logger(record)


def pretrain_stage1(
    train_data: Sequence[Sample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    logger: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Cross-entropy pretraining of backbone + global branch + linear head."""
    cfg.validate()
    x, y = to_tensors(train_data)
    _check_labels(y)
    torch.manual_seed(cfg.seed)
    net = Stage1Net(model_cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    for epoch in range(cfg.epochs_stage1):
        net.train()
        total, correct = 0.0, 0
        for idx in _batches(len(y), cfg.batch_size, gen):
            logits = net(_augmented(x[idx], cfg, gen))
            loss = F_.cross_entropy(logits, y[idx])
            _finite(loss, "stage-1 loss", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
        _emit(logger, {"stage": "stage1", "epoch": epoch, "ce_loss": total / len(y), "train_acc": correct / len(y)})
    return Checkpoint.from_model(net, "stage1", {"seed": cfg.seed})


def stage1_accuracy(ckpt: Checkpoint, data: Sequence[Sample]) -> float:
    net = ckpt.build()
    x, y = to_tensors(data)
    with torch.no_grad():
        return float((net(x).argmax(1) == y).float().mean())


def build_stage2_model(
    stage1: Checkpoint,
    model_cfg: ModelConfig,
    ablation: str = "full",
    selector: str = "drl",
    seed: int = 0,
) -> GlimpseNet:
    """Fresh two-branch model whose backbone is copied from ``stage1`` and frozen."""
    torch.manual_seed(seed + 7)
    model = GlimpseNet(model_cfg, ablation=ablation, selector=selector)
    prefix = "backbone."
    src = {k[len(prefix):]: v for k, v in stage1.state_dict.items() if k.startswith(prefix)}
    if not src:
        raise LoadError("stage-1 checkpoint holds no backbone tensors")
    load_strict(model.backbone, src, prefix)
    freeze_backbone(model)
    return model


def freeze_backbone(model: GlimpseNet) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    model.backbone.eval()


def _set_train_mode(model: GlimpseNet) -> None:
    model.train()
    if not any(p.requires_grad for p in model.backbone.parameters()):
        # frozen backbone keeps its normalisation statistics as well
        model.backbone.eval()


def _uses_policy(model: GlimpseNet) -> bool:
    return model.selector == "drl" and model.ablation != "global_only"


def joint_epoch(
    model: GlimpseNet,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: TrainConfig,
    opt: torch.optim.Optimizer,
    gen: torch.Generator,
    sample_gen: torch.Generator,
    epoch: int,
    state: dict,
    on_episode: Callable | None = None,
) -> dict:
    """One pass of ``CE + lambda * REINFORCE`` over the data."""
    _set_train_mode(model)
    n = len(y)
    sums = {"ce_loss": 0.0, "rl_loss": 0.0, "R_mean": 0.0, "train_acc": 0.0}
    for idx in _batches(n, cfg.batch_size, gen):
        out = model.run_episode(_augmented(x[idx], cfg, gen), STOCHASTIC, sample_gen, labels=y[idx])
        if on_episode is not None:
            on_episode(out, y[idx])
        ce = F_.cross_entropy(out.logits, y[idx])
        _finite(ce, "cross-entropy", epoch)
        if _uses_policy(model) and cfg.rl_loss_weight > 0:
            baseline = state.get("baseline") if cfg.use_baseline else None
            rl = reinforce_loss(out.trajectory, out.R, baseline)
            if cfg.use_baseline:
                m = cfg.baseline_momentum
                b = out.R.mean().item()
                state["baseline"] = b if baseline is None else m * baseline + (1 - m) * b
        else:
            rl = torch.zeros((), dtype=ce.dtype)
        loss = ce + cfg.rl_loss_weight * rl
        _finite(loss, "total loss", epoch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        k = len(idx)
        sums["ce_loss"] += ce.item() * k
        sums["rl_loss"] += rl.item() * k
        sums["R_mean"] += out.R.sum().item()
        sums["train_acc"] += float((out.logits.argmax(1) == y[idx]).sum())
    return {k: v / n for k, v in sums.items()}


def _trainable(model: GlimpseNet, cfg: TrainConfig):
    skip_policy = not _uses_policy(model) or cfg.rl_loss_weight == 0
    return [
        p for name, p in model.named_parameters()
        if p.requires_grad and not (skip_policy and name.startswith("policy."))
    ]


def train_stage2(
    model: GlimpseNet,
    train_data: Sequence[Sample],
    cfg: TrainConfig,
    logger: Callable[[dict], None] | None = None,
    on_episode: Callable | None = None,
) -> Checkpoint:
    """Joint optimisation of both branches over a frozen backbone."""
    cfg.validate()
    if any(p.requires_grad for p in model.backbone.parameters()):
        raise ValueError("train_stage2 expects a frozen backbone (see build_stage2_model)")
    return _joint_training(model, train_data, cfg, cfg.epochs_stage2, "stage2", logger, on_episode)


def train_end_to_end(
    train_data: Sequence[Sample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    logger: Callable[[dict], None] | None = None,
    on_episode: Callable | None = None,
) -> Checkpoint:
    """One-stage comparison arm: everything trained jointly from random init."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = GlimpseNet(model_cfg, ablation=cfg.ablation, selector=cfg.selector)
    if cfg.selector == "max_scores":
        raise ValueError("max_scores needs a pretrained backbone; use the two-stage scheme")
    epochs = cfg.epochs_one_stage or cfg.epochs_stage2
    return _joint_training(model, train_data, cfg, epochs, "one_stage", logger, on_episode)


def _joint_training(model, train_data, cfg, epochs, stage, logger, on_episode) -> Checkpoint:
    x, y = to_tensors(train_data)
    _check_labels(y)
    opt = torch.optim.Adam(_trainable(model, cfg), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 11)
    sample_gen = torch.Generator().manual_seed(cfg.seed + 13)
    state: dict = {}
    for epoch in range(epochs):
        stats = joint_epoch(model, x, y, cfg, opt, gen, sample_gen, epoch, state, on_episode)
        _emit(logger, {"stage": stage, "epoch": epoch, **stats})
    model.eval()
    return Checkpoint.from_model(model, stage, {"seed": cfg.seed})


def pretrain_patch_scorer(
    backbone: torch.nn.Module,
    train_data: Sequence[Sample],
    patch_size: int,
    cfg: TrainConfig,
    patches_per_image: int = 4,
    logger: Callable[[dict], None] | None = None,
) -> PatchScorer:
    """Train a patch classifier on random feature-map windows.

    Each window inherits its parent image's label.
    """
    x, y = to_tensors(train_data)
    _check_labels(y)
    backbone.eval()
    with torch.no_grad():
        fmap = torch.cat([backbone(x[i : i + 256]) for i in range(0, len(y), 256)])
    N, C, H, W = fmap.shape
    torch.manual_seed(cfg.seed + 17)
    scorer = PatchScorer(C, patch_size)
    opt = torch.optim.Adam(scorer.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 19)
    p = patch_size
    ar = torch.arange(p)
    for epoch in range(cfg.scorer_epochs):
        img = torch.arange(N).repeat(patches_per_image)
        r0 = torch.randint(0, H - p + 1, (len(img),), generator=gen)
        c0 = torch.randint(0, W - p + 1, (len(img),), generator=gen)
        rows = (r0[:, None] + ar)[:, :, None]
        cols = (c0[:, None] + ar)[:, None, :]
        patches = fmap.permute(0, 2, 3, 1)[img[:, None, None], rows, cols].permute(0, 3, 1, 2)
        labels = y[img]
        total, correct = 0.0, 0
        for idx in _batches(len(img), cfg.batch_size, gen):
            logits = scorer(patches[idx])
            loss = F_.cross_entropy(logits, labels[idx])
            _finite(loss, "patch-scorer loss", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == labels[idx]).sum())
        _emit(logger, {"stage": "scorer", "epoch": epoch, "ce_loss": total / len(img), "train_acc": correct / len(img)})
    scorer.trained.fill_(True)
    scorer.eval()
    return scorer


def evaluate(
    model: GlimpseNet,
    data: Sequence[Sample],
    mode: str = DETERMINISTIC,
    seed: int = 0,
    batch_size: int = 64,
) -> list[ScoreRecord]:
    """One episode per sample; the score is P(bona_fide)."""
    model.eval()
    x, _ = to_tensors(data)
    gen = torch.Generator().manual_seed(seed)
    scores = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            out = model.run_episode(x[i : i + batch_size], mode, gen)
            scores.extend(out.probs[:, BONA_FIDE_INDEX].tolist())
    return [
        ScoreRecord(s.id, s.group_id, s.label, s.pai_type, float(min(max(v, 0.0), 1.0)))
        for s, v in zip(data, scores)
    ]


def train_pipeline(
    train_data: Sequence[Sample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    logger: Callable[[dict], None] | None = None,
    stage1: Checkpoint | None = None,
    stop_after_stage1: bool = False,
) -> dict[str, Checkpoint]:
    """Run the configured scheme; returns the checkpoints produced, keyed by stage."""
    cfg.validate()
    if cfg.scheme == "one_stage":
        return {"one_stage": train_end_to_end(train_data, model_cfg, cfg, logger)}
    out = {}
    if stage1 is None:
        stage1 = pretrain_stage1(train_data, model_cfg, cfg, logger)
    out["stage1"] = stage1
    if stop_after_stage1:
        return out
    model = build_stage2_model(stage1, model_cfg, cfg.ablation, cfg.selector, cfg.seed)
    if cfg.selector == "max_scores":
        model.scorer = pretrain_patch_scorer(model.backbone, train_data, model_cfg.patch_size, cfg, logger=logger)
    out["stage2"] = train_stage2(model, train_data, cfg, logger)
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
