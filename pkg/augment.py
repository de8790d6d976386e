"""
Vector-space augmentations: the weak view A_w (small isotropic noise), the
strong view A_s (larger noise, coordinate dropout, scale jitter) and the
transformation ball B(x) = {A(x) + delta : A in {A_w, A_s}, ||delta||_1 < r}
used by the consistency diagnostics.

Every function takes the caller's torch.Generator and works on a single
vector (d,) or a batch (B, d); batch rows are augmented independently.
"""

from dataclasses import dataclass

import torch

from config import DROPOUT_PROB, RADIUS_R, SCALE_JITTER, SIGMA_STRONG, SIGMA_WEAK
from errors import InvalidArgumentError


@dataclass(frozen=True)
class AugmentPolicy:
    sigma_weak: float = SIGMA_WEAK
    sigma_strong: float = SIGMA_STRONG
    dropout_prob: float = DROPOUT_PROB
    scale_jitter: float = SCALE_JITTER
    radius_r: float = RADIUS_R

    def __post_init__(self):
        if not 0 <= self.sigma_weak <= self.sigma_strong:
            raise InvalidArgumentError(
                f"need 0 <= sigma_weak <= sigma_strong, got {self.sigma_weak}, {self.sigma_strong}")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise InvalidArgumentError(f"dropout_prob must lie in [0, 1], got {self.dropout_prob}")
        if self.scale_jitter < 0:
            raise InvalidArgumentError(f"scale_jitter must be >= 0, got {self.scale_jitter}")
        # radius 0 is allowed: it is the degenerate ball used by the diagnostics.
        if self.radius_r < 0:
            raise InvalidArgumentError(f"radius_r must be >= 0, got {self.radius_r}")


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 1 else x


def weak_aug(x: torch.Tensor, policy: AugmentPolicy, rng: torch.Generator) -> torch.Tensor:
    noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
    return x + policy.sigma_weak * noise


def strong_aug(x: torch.Tensor, policy: AugmentPolicy, rng: torch.Generator) -> torch.Tensor:
    batch = _as_batch(x)
    noisy = batch + policy.sigma_strong * torch.randn(batch.shape, generator=rng, dtype=batch.dtype)
    keep = torch.rand(batch.shape, generator=rng, dtype=batch.dtype) >= policy.dropout_prob
    u = torch.rand((batch.shape[0], 1), generator=rng, dtype=batch.dtype)
    scale = 1.0 + policy.scale_jitter * (2.0 * u - 1.0)
    out = noisy * keep * scale
    return out.squeeze(0) if x.dim() == 1 else out


def l1_ball_offsets(shape, radius: float, rng: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    """One offset per row with ||delta||_1 = radius * U, U ~ Uniform[0, 1)."""
    direction = torch.randn(shape, generator=rng, dtype=dtype)
    norms = direction.abs().sum(dim=-1, keepdim=True).clamp_min(1e-300)
    u = torch.rand(shape[:-1] + (1,), generator=rng, dtype=dtype)
    return radius * u * direction / norms


def ball_points(x: torch.Tensor, policy: AugmentPolicy, rng: torch.Generator) -> torch.Tensor:
    """One draw from B(x_i) for every row of a batch."""
    batch = _as_batch(x)
    use_strong = torch.rand((batch.shape[0], 1), generator=rng) < 0.5
    weak = weak_aug(batch, policy, rng)
    strong = strong_aug(batch, policy, rng)
    augmented = torch.where(use_strong, strong, weak)
    return augmented + l1_ball_offsets(tuple(batch.shape), policy.radius_r, rng, batch.dtype)


def sample_ball(x: torch.Tensor, policy: AugmentPolicy, rng: torch.Generator, count: int) -> torch.Tensor:
    """`count` points of B(x) for a single vector x, returned as (count, d)."""
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    if x.dim() != 1:
        raise InvalidArgumentError(f"sample_ball expects a single vector, got shape {tuple(x.shape)}")
    return ball_points(x.expand(count, -1), policy, rng)
