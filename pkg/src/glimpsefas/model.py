"""Two-branch glimpse network.

The backbone turns an image into a feature map ``F`` (8x spatial reduction).
Branch 1 pools ``F`` into a global feature ``f_g``; Branch 2 runs ``T``
glimpses over windows of ``F`` through a GRU initialised with ``f_g``.  Both
features are fused and classified into ``(bona_fide, attack)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import torch
from torch import nn
import torch.nn.functional as F_

from .policy import (
    DETERMINISTIC,
    MODES,
    ContractError,
    LocationPolicy,
    PatchScorer,
    Trajectory,
    compute_reward,
    cumulative_reward,
    initial_location,
    max_scores_selector,
    random_selector,
    sample_location,
)

BONA_FIDE_INDEX = 0
ATTACK_INDEX = 1
FUSIONS = ("concat", "average", "weighted_average")
ABLATIONS = ("full", "global_only", "local_only")
SELECTORS = ("drl", "random", "max_scores")


class ShapeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 64
    # [image, stem, stage 1, stage 2]; the last entry is the feature-map depth
    backbone_channels: list[int] = field(default_factory=lambda: [3, 16, 16, 32])
    stem_kernel: int = 3
    feature_dim: int = 64
    patch_size: int = 8
    steps: int = 8
    fusion: str = "concat"
    policy_sigma: float = 0.1
    init_loc_std: float = 0.25
    # kernel of the glimpse conv; None means the full patch
    glimpse_kernel: int | None = None

    @property
    def map_side(self) -> int:
        return self.input_size // 8

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]

    def validate(self) -> None:
        if self.input_size % 8:
            raise ConfigurationError(f"input_size must be a multiple of 8, got {self.input_size}")
        if len(self.backbone_channels) != 4:
            raise ConfigurationError("backbone_channels needs four entries")
        if self.feature_dim % 2:
            raise ConfigurationError(f"feature_dim must be even, got {self.feature_dim}")
        if not 1 <= self.patch_size <= self.map_side:
            raise ConfigurationError(
                f"patch_size {self.patch_size} exceeds feature-map side {self.map_side}"
            )
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}")
        k = self.glimpse_kernel or self.patch_size
        if not 1 <= k <= self.patch_size:
            raise ConfigurationError("glimpse_kernel must lie in [1, patch_size]")

    def to_dict(self) -> dict:
        return asdict(self)


def paper_preset(**overrides) -> ModelConfig:
    """Full-width layer plan: 256 px input, 128x32x32 map, D = 512."""
    cfg = ModelConfig(
        input_size=256,
        backbone_channels=[3, 64, 64, 128],
        stem_kernel=7,
        feature_dim=512,
        patch_size=8,
        steps=8,
    )
    return replace(cfg, **overrides)


def desk_preset(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        idt = x if self.downsample is None else self.downsample(x)
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + idt)


def _stage(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1))


class Backbone(nn.Module):
    """Stem conv, max-pool and two residual stages (x8 downsampling)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_in, c0, c1, c2 = cfg.backbone_channels
        k = cfg.stem_kernel
        self.input_size = cfg.input_size
        self.in_channels = c_in
        self.stem = nn.Sequential(
            nn.Conv2d(c_in, c0, k, 2, k // 2, bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(),
            nn.MaxPool2d(3, 2, 1),
        )
        self.stage1 = _stage(c0, c1, 1)
        self.stage2 = _stage(c1, c2, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1:] != (self.in_channels, self.input_size, self.input_size):
            raise ShapeError(
                f"expected (B, {self.in_channels}, {self.input_size}, {self.input_size}) "
                f"images, got {tuple(x.shape)}"
            )
        return self.stage2(self.stage1(self.stem(x)))


class GlobalBranch(nn.Module):
    """Two residual stages (C_f -> D/2 -> D) followed by global average pooling."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.stage3 = _stage(in_channels, dim // 2, 1)
        self.stage4 = _stage(dim // 2, dim, 1)

    def activation_map(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.stage4(self.stage3(fmap))

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.activation_map(fmap).mean(dim=(2, 3))


class GlimpseEncoder(nn.Module):
    """``f_t = relu(L24(relu(L22(gap(relu(L21 patch))))) + L25(relu(L23 loc)))``."""

    def __init__(self, channels: int, dim: int, patch_size: int, kernel: int | None = None):
        super().__init__()
        self.channels = channels
        self.patch_size = patch_size
        self.l21 = nn.Conv2d(channels, dim // 2, kernel or patch_size)
        self.l22 = nn.Linear(dim // 2, dim)
        self.l23 = nn.Linear(2, dim)
        self.l24 = nn.Linear(dim, dim)
        self.l25 = nn.Linear(dim, dim)

    def forward(self, patch: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
        p = self.patch_size
        if patch.dim() != 4 or patch.shape[1:] != (self.channels, p, p):
            raise ShapeError(f"expected (B, {self.channels}, {p}, {p}) patch, got {tuple(patch.shape)}")
        phi_p = torch.relu(self.l22(torch.relu(self.l21(patch)).mean(dim=(2, 3))))
        phi_l = torch.relu(self.l23(loc))
        return torch.relu(self.l24(phi_p) + self.l25(phi_l))


class GRUCell(nn.Module):
    """Gated recurrent unit with update gate ``z`` and reset gate ``q``.

    ``h = z * h_prev + (1 - z) * tanh(W_h f + U_h (q * h_prev) + b_h)``
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        bound = 1.0 / math.sqrt(dim)
        for name in ("W_z", "W_q", "W_h", "U_z", "U_q", "U_h"):
            setattr(self, name, nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound)))
        for name in ("b_z", "b_q", "b_h"):
            setattr(self, name, nn.Parameter(torch.empty(dim).uniform_(-bound, bound)))

    def gates(self, f: torch.Tensor, h_prev: torch.Tensor):
        if f.shape[-1] != self.dim or h_prev.shape[-1] != self.dim:
            raise ShapeError(
                f"GRU expects length-{self.dim} vectors, got {f.shape[-1]} and {h_prev.shape[-1]}"
            )
        z = torch.sigmoid(f @ self.W_z.T + h_prev @ self.U_z.T + self.b_z)
        q = torch.sigmoid(f @ self.W_q.T + h_prev @ self.U_q.T + self.b_q)
        h_hat = torch.tanh(f @ self.W_h.T + (q * h_prev) @ self.U_h.T + self.b_h)
        return z, q, h_hat

    def forward(self, f: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
        z, _, h_hat = self.gates(f, h_prev)
        return z * h_prev + (1 - z) * h_hat


class Fusion(nn.Module):
    def __init__(self, method: str, dim: int):
        super().__init__()
        if method not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {method!r}")
        self.method = method
        self.dim = dim
        if method == "weighted_average":
            self.logits = nn.Parameter(torch.zeros(2))

    @property
    def out_dim(self) -> int:
        return 2 * self.dim if self.method == "concat" else self.dim

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def forward(self, f_g: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        w = self.weights() if self.method == "weighted_average" else None
        return fuse(f_g, h, self.method, w)


def fuse(f_g: torch.Tensor, h: torch.Tensor, method: str, weights: torch.Tensor | None = None):
    """Functional fusion; ``weights`` are the convex pair for weighted averaging."""
    if method == "concat":
        return torch.cat([f_g, h], dim=-1)
    if f_g.shape != h.shape:
        raise ShapeError(f"cannot average features of shapes {tuple(f_g.shape)} and {tuple(h.shape)}")
    if method == "average":
        return 0.5 * (f_g + h)
    if method == "weighted_average":
        w = torch.tensor([0.5, 0.5]) if weights is None else weights
        return w[0] * f_g + w[1] * h
    raise ConfigurationError(f"unknown fusion {method!r}")


def classify(logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return logits, torch.softmax(logits, dim=-1)


def window_start(loc: torch.Tensor, side: int, p: int) -> torch.Tensor:
    """First row/col of the ``p``-window centred at normalized ``loc``.

    ``pix = (l + 1) / 2 * (side - 1)``; the start ``round(pix - (p - 1) / 2)``
    is clamped to ``[0, side - p]``.
    """
    if p > side:
        raise ConfigurationError(f"patch size {p} exceeds map side {side}")
    loc = torch.as_tensor(loc, dtype=torch.float64)
    pix = (loc + 1.0) / 2.0 * (side - 1)
    start = torch.floor(pix - (p - 1) / 2.0 + 0.5).long()
    return start.clamp(0, side - p)


def crop_patch(fmap: torch.Tensor, loc: torch.Tensor, p: int) -> torch.Tensor:
    """Cut ``p x p`` windows from ``fmap``.

    ``fmap`` is ``(B, C, H, W)`` with ``loc`` ``(B, 2)``, or ``(C, H, W)`` with
    ``loc`` ``(2,)``.  Plain integer slicing: no gradient reaches ``loc``.
    """
    single = fmap.dim() == 3
    if single:
        fmap, loc = fmap.unsqueeze(0), torch.as_tensor(loc).reshape(1, 2)
    B, _, H, W = fmap.shape
    if p > H or p > W:
        raise ConfigurationError(f"patch size {p} exceeds map size {H}x{W}")
    loc = torch.as_tensor(loc).detach()
    if not torch.isfinite(loc).all():
        raise ValueError("non-finite glimpse location")
    col0 = window_start(loc[:, 0], W, p)
    row0 = window_start(loc[:, 1], H, p)
    ar = torch.arange(p)
    rows = (row0[:, None] + ar)[:, :, None]  # B, p, 1
    cols = (col0[:, None] + ar)[:, None, :]  # B, 1, p
    bidx = torch.arange(B)[:, None, None]
    patch = fmap.permute(0, 2, 3, 1)[bidx, rows, cols]  # B, p, p, C
    patch = patch.permute(0, 3, 1, 2)
    return patch[0] if single else patch


@dataclass
class EpisodeOutput:
    """Batched result of running episodes; tensors lead with the batch axis."""

    f_g: torch.Tensor
    trajectory: Trajectory
    h_final: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor
    step_confidences: torch.Tensor  # (B, T): P(bona_fide) after each step
    rewards: torch.Tensor | None = None  # (B, T)
    R: torch.Tensor | None = None  # (B,)

    @property
    def score(self) -> torch.Tensor:
        return self.probs[:, BONA_FIDE_INDEX]


class GlimpseNet(nn.Module):
    def __init__(self, cfg: ModelConfig, ablation: str = "full", selector: str = "drl"):
        super().__init__()
        cfg.validate()
        if ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {ablation!r}")
        if selector not in SELECTORS:
            raise ConfigurationError(f"unknown selector {selector!r}")
        self.cfg = cfg
        self.ablation = ablation
        self.selector = selector
        D, C = cfg.feature_dim, cfg.feature_channels
        self.backbone = Backbone(cfg)
        self.branch1 = GlobalBranch(C, D)
        self.glimpse = GlimpseEncoder(C, D, cfg.patch_size, cfg.glimpse_kernel)
        self.gru = GRUCell(D)
        self.policy = LocationPolicy(D, D, cfg.policy_sigma)
        self.fusion = Fusion(cfg.fusion, D)
        self.classifier = nn.Linear(self.fusion.out_dim, 2)
        self.scorer: PatchScorer | None = None

    # -- pieces -----------------------------------------------------------
    def backbone_embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def global_branch(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.branch1(fmap)

    def head(self, f_g: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """Logits from the fused pair, honouring the branch ablation."""
        if self.ablation == "global_only":
            h = torch.zeros_like(f_g)
        elif self.ablation == "local_only":
            f_g = torch.zeros_like(h)
        return self.classifier(self.fusion(f_g, h))

    def _first_locations(self, fmap, mode, generator):
        B, dt = fmap.shape[0], fmap.dtype
        if self.selector == "random":
            return random_selector(B, generator, dt), torch.zeros(B, dtype=dt)
        return initial_location(B, mode, generator, self.cfg.init_loc_std, dt)

    def _max_score_plan(self, fmap: torch.Tensor) -> torch.Tensor:
        if self.scorer is None:
            raise ContractError("max_scores selector requires model.scorer")
        return torch.stack(
            [max_scores_selector(fm, self.scorer, self.cfg.steps, self.cfg.patch_size) for fm in fmap.detach()]
        )

    # -- episode -------------------------------------------------------------
    def run_episode(
        self,
        images: torch.Tensor,
        mode: str = DETERMINISTIC,
        generator: torch.Generator | None = None,
        labels: torch.Tensor | None = None,
        locations: torch.Tensor | None = None,
    ) -> EpisodeOutput:
        """Run one episode per image in ``images`` (``(B, 3, H, W)``).

        ``locations`` (``(B, T, 2)``) freezes the glimpse sequence, bypassing
        every selector.  With ``labels`` the per-step delayed rewards and the
        return ``R`` are filled in.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        T, p = self.cfg.steps, self.cfg.patch_size
        fmap = self.backbone_embed(images)
        f_g = self.global_branch(fmap)
        B, dt = f_g.shape[0], f_g.dtype
        traj = Trajectory()

        if self.ablation == "global_only":
            h = torch.zeros_like(f_g)
            logits = self.head(f_g, h)
            probs = torch.softmax(logits, -1)
            conf = probs[:, BONA_FIDE_INDEX].detach()[:, None].repeat(1, T)
            traj.actions = torch.zeros(B, 0, 2, dtype=dt)
            traj.log_probs = torch.zeros(B, 0, dtype=dt)
            out = EpisodeOutput(f_g, traj, h, logits, probs, conf)
            return self._attach_rewards(out, labels)

        h = torch.zeros_like(f_g) if self.ablation == "local_only" else f_g
        plan = None
        if locations is not None:
            plan = torch.as_tensor(locations, dtype=dt)
            if plan.shape != (B, T, 2):
                raise ShapeError(f"locations must be {(B, T, 2)}, got {tuple(plan.shape)}")
        elif self.selector == "max_scores":
            plan = self._max_score_plan(fmap)

        if plan is not None:
            loc, logp = plan[:, 0], torch.zeros(B, dtype=dt)
        else:
            loc, logp = self._first_locations(fmap, mode, generator)

        actions, log_probs, confs = [], [], []
        logits = None
        for t in range(1, T + 1):
            traj.states.append(h)
            actions.append(loc)
            log_probs.append(logp)
            patch = crop_patch(fmap, loc, p)
            f_t = self.glimpse(patch, loc.clamp(-1.0, 1.0))
            h = self.gru(f_t, h)
            logits = self.head(f_g, h)
            confs.append(torch.softmax(logits.detach(), -1)[:, BONA_FIDE_INDEX])
            if t == T:
                break
            if plan is not None:
                loc, logp = plan[:, t], torch.zeros(B, dtype=dt)
            elif self.selector == "random":
                loc, logp = random_selector(B, generator, dt), torch.zeros(B, dtype=dt)
            else:
                # the policy sees the state but never pushes gradient into it
                loc, logp = sample_location(self.policy, h.detach(), mode, generator)

        traj.actions = torch.stack(actions, 1)
        traj.log_probs = torch.stack(log_probs, 1)
        probs = torch.softmax(logits, -1)
        out = EpisodeOutput(f_g, traj, h, logits, probs, torch.stack(confs, 1))
        return self._attach_rewards(out, labels)

    def _attach_rewards(self, out: EpisodeOutput, labels) -> EpisodeOutput:
        if labels is None:
            return out
        T = self.cfg.steps
        probs = out.probs.detach()
        rewards = torch.stack([compute_reward(probs, labels, t, T) for t in range(1, T + 1)], 1)
        if T > 1 and bool((rewards[:, : T - 1] != 0).any()):
            raise AssertionError("delayed reward violated: nonzero reward before the last step")
        out.rewards = rewards
        out.R = cumulative_reward(rewards)
        return out

    def forward_episode(
        self,
        image: torch.Tensor,
        mode: str = DETERMINISTIC,
        generator: torch.Generator | None = None,
        label: int | None = None,
    ) -> EpisodeOutput:
        """Single-image convenience wrapper around :meth:`run_episode`."""
        labels = None if label is None else torch.tensor([label])
        return self.run_episode(image.unsqueeze(0), mode, generator, labels)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.run_episode(images, DETERMINISTIC).logits


class Stage1Net(nn.Module):
    """Backbone + global branch + temporary linear classifier for pretraining."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.branch1 = GlobalBranch(cfg.feature_channels, cfg.feature_dim)
        self.classifier = nn.Linear(cfg.feature_dim, 2)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.branch1(self.backbone(images)))


def to_tensor(images) -> torch.Tensor:
    """``(N, H, W, 3)`` arrays in ``[0, 1]`` to a float32 ``(N, 3, H, W)`` tensor."""
    t = torch.as_tensor(images, dtype=torch.float32)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def interpolate_to(x: torch.Tensor, size: int) -> torch.Tensor:
    return F_.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
