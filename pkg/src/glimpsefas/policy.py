"""Location policy, delayed reward and REINFORCE surrogate.

Locations are normalized coordinates ``(l_x, l_y)`` in ``[-1, 1]^2`` where
``l_x`` is horizontal (columns) and ``l_y`` vertical (rows).  Sampled actions
are left unclamped; clamping happens when a window is cut from the feature
map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

STOCHASTIC = "train_stochastic"
DETERMINISTIC = "eval_deterministic"
MODES = (STOCHASTIC, DETERMINISTIC)
PROB_FLOOR = 1e-12
MIN_SIGMA = 1e-6


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


@dataclass
class Trajectory:
    """Per-step records of one batch of episodes.

    ``states[t]`` is the hidden state the t-th location was chosen from
    (``h_0`` for the prior-drawn first location), ``actions`` is ``(B, T, 2)``
    and ``log_probs`` is ``(B, T)``.  Entries that did not come from the
    learned policy carry a constant (gradient-free) log-density.
    """

    states: list[torch.Tensor] = field(default_factory=list)
    actions: torch.Tensor | None = None
    log_probs: torch.Tensor | None = None

    def __len__(self) -> int:
        return 0 if self.actions is None else self.actions.shape[1]


def normal_log_density(a: torch.Tensor, mean: torch.Tensor, sigma: float) -> torch.Tensor:
    """Log-density of an isotropic 2-D normal, summed over the last axis."""
    z = (a - mean) / sigma
    return (-0.5 * z * z - math.log(sigma * math.sqrt(2 * math.pi))).sum(-1)


class LocationPolicy(nn.Module):
    """Mean head ``D -> hidden -> 2`` with a tanh squash and fixed sigma."""

    def __init__(self, in_dim: int, hidden: int | None = None, sigma: float = 0.1):
        super().__init__()
        if sigma <= MIN_SIGMA:
            raise ValueError(f"policy sigma must exceed {MIN_SIGMA}, got {sigma}")
        hidden = hidden or in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        self.sigma = float(sigma)

    def mean(self, h: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc2(torch.relu(self.fc1(h))))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.mean(h)


def sample_location(
    policy: LocationPolicy,
    h: torch.Tensor,
    mode: str = STOCHASTIC,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw ``(action, log_prob)`` for states ``h`` of shape ``(B, D)``.

    Stochastic mode samples around the tanh mean and returns the exact
    log-density of the (detached) sample, differentiable with respect to the
    head parameters.  Deterministic mode returns the mean with log-prob 0.
    """
    if policy.sigma <= MIN_SIGMA:
        raise ValueError(f"policy sigma must exceed {MIN_SIGMA}")
    mu = policy.mean(h)
    if mode == DETERMINISTIC:
        return mu.detach(), torch.zeros(mu.shape[:-1], dtype=mu.dtype)
    if mode != STOCHASTIC:
        raise ValueError(f"unknown mode {mode!r}")
    noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    action = mu.detach() + policy.sigma * noise
    return action, normal_log_density(action, mu, policy.sigma)


def initial_location(
    batch: int,
    mode: str = STOCHASTIC,
    generator: torch.Generator | None = None,
    std: float = 0.25,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """First glimpse location from a centred normal prior.

    Returns the actions and their (constant) prior log-density.  The
    deterministic mode uses the map centre exactly.
    """
    if mode == DETERMINISTIC:
        return torch.zeros(batch, 2, dtype=dtype), torch.zeros(batch, dtype=dtype)
    a = std * torch.randn(batch, 2, generator=generator, dtype=dtype)
    return a, normal_log_density(a, torch.zeros_like(a), std)


def random_selector(
    batch: int, generator: torch.Generator | None = None, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Uniform locations over ``[-1, 1]^2``."""
    return 2.0 * torch.rand(batch, 2, generator=generator, dtype=dtype) - 1.0


def compute_reward(probs: torch.Tensor, y_gt: torch.Tensor, t: int, T: int) -> torch.Tensor:
    """Delayed reward: zero before the last step, ``log P(y_gt)`` at ``t == T``."""
    if not 1 <= t <= T:
        raise ContractError(f"step {t} outside 1..{T}")
    probs = torch.as_tensor(probs)
    y = torch.as_tensor(y_gt, dtype=torch.long)
    if t < T:
        return torch.zeros(probs.shape[:-1], dtype=probs.dtype)
    p = probs.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return torch.log(p.clamp_min(PROB_FLOOR))


def cumulative_reward(rewards: torch.Tensor) -> torch.Tensor:
    """Sum of per-step rewards over the last axis."""
    return torch.as_tensor(rewards).sum(-1)


def reinforce_loss(
    trajectory: Trajectory | torch.Tensor,
    R: torch.Tensor,
    baseline: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """Surrogate ``-(sum_t log pi(a_t|s_t)) * R`` averaged over the batch.

    ``R`` is detached, so the gradient of this loss is the negated REINFORCE
    estimator and reaches only whatever produced the log-probabilities.
    """
    log_probs = trajectory.log_probs if isinstance(trajectory, Trajectory) else trajectory
    if not torch.isfinite(log_probs).all():
        raise FloatingPointError("non-finite log-probability in trajectory")
    adv = torch.as_tensor(R).detach()
    if baseline is not None:
        adv = adv - torch.as_tensor(baseline, dtype=adv.dtype).detach()
    return -(log_probs.sum(-1) * adv).mean()


class PatchScorer(nn.Module):
    """Small CNN scoring ``p x p`` feature-map patches; used by MAX-SCORES."""

    def __init__(self, channels: int, patch_size: int, hidden: int = 32):
        super().__init__()
        self.conv = nn.Conv2d(channels, hidden, kernel_size=patch_size)
        self.fc = nn.Linear(hidden, 2)
        self.patch_size = patch_size
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.conv(patches)).mean(dim=(2, 3))
        return self.fc(x)

    def scores(self, patches: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(patches), dim=-1)


def grid_starts(side: int, p: int) -> list[int]:
    return list(range(0, side - p + 1, p))


def start_to_loc(start: float, side: int, p: int) -> float:
    """Normalized coordinate whose window starts at pixel ``start``."""
    if side == 1:
        return 0.0
    return 2.0 * (start + (p - 1) / 2) / (side - 1) - 1.0


def max_scores_selector(
    F: torch.Tensor, scorer, k_steps: int, p: int | None = None, attack_index: int = 1
) -> torch.Tensor:
    """Top-``k_steps`` grid locations by attack-class softmax score.

    ``F`` is ``(C, H, W)``.  Windows lie on a stride-``p`` grid; ties keep
    row-major order.  When ``k_steps`` exceeds the grid size the ranking is
    repeated cyclically.  Returns ``(k_steps, 2)`` locations ``(l_x, l_y)``.
    """
    if isinstance(scorer, PatchScorer) and not bool(scorer.trained):
        raise ContractError("max-scores selector needs a trained patch scorer")
    p = p or scorer.patch_size
    _, H, W = F.shape
    rows, cols = grid_starts(H, p), grid_starts(W, p)
    cells = [(r, c) for r in rows for c in cols]
    patches = torch.stack([F[:, r : r + p, c : c + p] for r, c in cells])
    with torch.no_grad():
        scores = scorer.scores(patches)[:, attack_index].tolist()
    order = sorted(range(len(cells)), key=lambda i: (-scores[i], i))
    out = []
    for k in range(k_steps):
        r, c = cells[order[k % len(order)]]
        out.append((start_to_loc(c, W, p), start_to_loc(r, H, p)))
    return torch.tensor(out, dtype=F.dtype)
