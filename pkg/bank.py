"""
Momentum memory bank over every target sample.

Holds one stored feature z_i per sample, the source-like / target-specific
division with a class per sample (prediction class for source-like rows,
pseudo-label for target-specific rows) and the source-like class centroids
w_c. Exactly one writer (the training loop) mutates a bank; reads happen
between mutations.
"""

import logging
import math
from enum import IntEnum
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F

from config import BANK_MOMENTUM, INIT_FRACTION
from data import Dataset
from errors import InvalidArgumentError
from model import ModelParams, predict_all

logger = logging.getLogger(__name__)

# Below this norm a class mean is treated as zero.
_ZERO_MEAN = 1e-12


class Split(IntEnum):
    SOURCE_LIKE = 0
    TARGET_SPECIFIC = 1


class MemoryBank:
    def __init__(self, features: torch.Tensor, num_classes: int, momentum: float = BANK_MOMENTUM,
                 renormalize: bool = True, renormalize_centroids: bool = True,
                 init_fraction: float = INIT_FRACTION):
        if not 0.0 <= momentum <= 1.0:
            raise InvalidArgumentError(f"bank momentum must lie in [0, 1], got {momentum}")
        n = features.shape[0]
        self.Z = features.detach().clone()
        self.num_classes = num_classes
        self.momentum = momentum
        self.renormalize = renormalize
        self.renormalize_centroids = renormalize_centroids
        self.init_fraction = init_fraction
        self.split = torch.full((n,), int(Split.TARGET_SPECIFIC), dtype=torch.long)
        self.split_class = torch.zeros(n, dtype=torch.long)
        self.centroids = torch.zeros(num_classes, features.shape[1], dtype=features.dtype)
        # Flags raised by the most recent class_centroids() call.
        self.degenerate_flags: List[str] = []

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def source_like_mask(self) -> torch.Tensor:
        return self.split == int(Split.SOURCE_LIKE)

    @property
    def target_specific_mask(self) -> torch.Tensor:
        return self.split == int(Split.TARGET_SPECIFIC)

    @property
    def n_source_like(self) -> int:
        return int(self.source_like_mask.sum())

    @property
    def n_target_specific(self) -> int:
        return self.n - self.n_source_like

    def momentum_update(self, index, f: torch.Tensor) -> None:
        """z_i <- normalize(m z_i + (1 - m) f). `index` may be an int or a
        tensor of distinct indices with one feature row each."""
        idx = torch.as_tensor(index, dtype=torch.long)
        if idx.numel() == 0:
            return
        if idx.min() < 0 or idx.max() >= self.n:
            raise InvalidArgumentError(f"bank index out of range [0, {self.n})")
        mixed = self.momentum * self.Z[idx] + (1.0 - self.momentum) * f.detach()
        if self.renormalize:
            mixed = F.normalize(mixed, dim=-1)
        self.Z[idx] = mixed

    def init_division_top_percent(self, probs_w: torch.Tensor,
                                  pseudo_labels: Optional[torch.Tensor] = None) -> None:
        """Mark the N most confident samples of every class as source-like,
        N = max(1, floor(init_fraction * n / C)). Pairs are taken greedily in
        order of decreasing probability (ties: lower class, then lower
        index), so a sample wanted by several classes goes to the one where
        its probability is highest and that class takes its next candidate."""
        n, num_classes = probs_w.shape
        per_class = max(1, math.floor(self.init_fraction * n / num_classes))
        # class-major flattening: position c * n + i holds probs_w[i, c]
        flat = probs_w.T.reshape(-1)
        order = torch.sort(flat, descending=True, stable=True).indices.tolist()

        assigned = [-1] * n
        filled = [0] * num_classes
        remaining = per_class * num_classes
        for pos in order:
            c, i = divmod(pos, n)
            if assigned[i] >= 0 or filled[c] >= per_class:
                continue
            assigned[i] = c
            filled[c] += 1
            remaining -= 1
            if remaining == 0:
                break

        assigned_t = torch.tensor(assigned, dtype=torch.long)
        if pseudo_labels is None:
            pseudo_labels = probs_w.argmax(dim=1)
        source_like = assigned_t >= 0
        self.split = torch.where(source_like, int(Split.SOURCE_LIKE), int(Split.TARGET_SPECIFIC))
        self.split_class = torch.where(source_like, assigned_t, pseudo_labels.long())
        logger.info(f"Division seeded with {per_class} source-like sample(s) per class")

    def update_division(self, probs_w: torch.Tensor, tau_c: float, pseudo_labels: torch.Tensor,
                        indices: Optional[torch.Tensor] = None) -> None:
        """Source-like iff max_c p_w[c] >= tau_c. With `indices`, the rows of
        probs_w / pseudo_labels belong to those bank rows only."""
        if not 0.0 < tau_c < 1.0:
            raise InvalidArgumentError(f"tau_c must lie in (0, 1), got {tau_c}")
        if indices is None:
            indices = torch.arange(self.n)
        confidence = probs_w.amax(dim=1)
        predicted = probs_w.argmax(dim=1)
        source_like = confidence >= tau_c
        self.split[indices] = torch.where(source_like, int(Split.SOURCE_LIKE), int(Split.TARGET_SPECIFIC))
        self.split_class[indices] = torch.where(source_like, predicted, pseudo_labels.long())

    def refresh_target_classes(self, pseudo_labels: torch.Tensor) -> None:
        ts = self.target_specific_mask
        self.split_class[ts] = pseudo_labels.long()[ts]

    def _class_means(self, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        one_hot = F.one_hot(self.split_class[mask], self.num_classes).to(self.Z.dtype)
        counts = one_hot.sum(dim=0)
        sums = one_hot.T @ self.Z[mask]
        return sums / counts.clamp_min(1).unsqueeze(1), counts

    def class_centroids(self) -> torch.Tensor:
        """w_c = mean of source-like rows of class c (renormalized by default).
        Empty or zero-mean classes keep their previous row and are flagged."""
        means, counts = self._class_means(self.source_like_mask)
        norms = means.norm(dim=1)
        usable = (counts > 0) & (norms > _ZERO_MEAN)
        if self.renormalize_centroids:
            means = means / norms.clamp_min(_ZERO_MEAN).unsqueeze(1)
        self.centroids = torch.where(usable.unsqueeze(1), means, self.centroids)

        self.degenerate_flags = []
        for c in torch.nonzero(~usable).flatten().tolist():
            reason = "empty" if counts[c] == 0 else "zero_mean"
            self.degenerate_flags.append(f"centroid_{reason}_class_{c}")
            logger.debug(f"Centroid of class {c} is {reason}; keeping the previous row")
        return self.centroids

    def target_class_means(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Per-class mean of target-specific rows and a mask of the classes
        that have any; scaled like the centroids."""
        means, counts = self._class_means(self.target_specific_mask)
        if self.renormalize_centroids:
            means = F.normalize(means, dim=1)
        return means, counts > 0

    def knn_indices(self, f: torch.Tensor, K: int) -> torch.Tensor:
        """Indices of the K rows with the largest cosine to each row of f,
        searched over all n rows; ties go to the lower index."""
        if not 1 <= K <= self.n:
            raise InvalidArgumentError(f"K must lie in [1, {self.n}], got {K}")
        query = F.normalize(f.detach(), dim=-1)
        sims = query @ F.normalize(self.Z, dim=1).T
        return torch.sort(sims, dim=-1, descending=True, stable=True).indices[..., :K]

    def knn(self, f: torch.Tensor, K: int) -> torch.Tensor:
        return self.Z[self.knn_indices(f, K)]


def init_bank(source_params: ModelParams, dataset: Dataset, momentum: float = BANK_MOMENTUM,
              renormalize: bool = True, renormalize_centroids: bool = True,
              init_fraction: float = INIT_FRACTION,
              pseudo_labels: Optional[torch.Tensor] = None) -> MemoryBank:
    """Bank of phi_s features for every target sample, division seeded from
    the top-confidence samples of each class, centroids computed."""
    probs, feats = predict_all(source_params, dataset)
    bank = MemoryBank(feats, source_params.dims.C, momentum, renormalize, renormalize_centroids, init_fraction)
    bank.init_division_top_percent(probs, pseudo_labels)
    bank.class_centroids()
    return bank
