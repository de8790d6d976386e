"""
Training losses for one mini-batch against a memory-bank snapshot.

Everything read from the bank (stored rows, centroids, MMD prototypes) is a
constant under differentiation: gradients reach the extractor only through
the live weak/strong features and probabilities of the batch.

Total objective: L = L_con + alpha * L_self + beta * L_mmd, where the
contrastive term depends on the scheme (adaptive DaC contrast, or one of the
undivided Scheme-S / Scheme-T baselines) and L_mmd is the exponential or
linear memory-bank MMD.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from bank import MemoryBank, Split
from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

# Lower clamp applied to probabilities before taking logs.
PROB_FLOOR = 1e-12


class MMDKind(Enum):
    EMMD = "EMMD"
    LMMD = "LMMD"
    NONE = "NONE"


class Scheme(Enum):
    DAC = "DAC"
    SCHEME_S = "SCHEME_S"
    SCHEME_T = "SCHEME_T"
    SELF_ONLY = "SELF_ONLY"


@dataclass
class LossBatch:
    """Per-sample inputs: bank indices, unit features of the weak and strong
    views, their class probabilities, and the epoch's pseudo-labels."""

    indices: torch.Tensor
    f_w: torch.Tensor
    f_s: torch.Tensor
    p_w: torch.Tensor
    p_s: torch.Tensor
    pseudo_labels: torch.Tensor

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def pseudo_onehot(self) -> torch.Tensor:
        return F.one_hot(self.pseudo_labels, self.p_w.shape[1]).to(self.p_w.dtype)


@dataclass
class LossReport:
    total: float
    con: float
    self_training: float
    mmd: float
    n_source_like: int
    n_target_specific: int
    degenerate_flags: List[str] = field(default_factory=list)


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(PROB_FLOOR))


def self_training_loss(batch: LossBatch, omega: float, use_strong_aug: bool = True) -> torch.Tensor:
    """Pseudo-label cross-entropy on both views, KL(p_bar || uniform) for
    output diversity, and omega times the mean entropy of the weak view."""
    y_hat = batch.pseudo_onehot
    ce = -(y_hat * _safe_log(batch.p_w)).sum(dim=1)
    if use_strong_aug:
        ce = ce - (y_hat * _safe_log(batch.p_s)).sum(dim=1)
    num_classes = batch.p_w.shape[1]
    p_bar = batch.p_w.mean(dim=0)
    diversity = (p_bar * torch.log(num_classes * p_bar.clamp_min(PROB_FLOOR))).sum()
    entropy = -(batch.p_w * _safe_log(batch.p_w)).sum(dim=1).mean()
    return ce.mean() + diversity + omega * entropy


@dataclass(frozen=True)
class ContrastSettings:
    tau: float
    K: int
    use_local_structure: bool = True
    use_strong_aug: bool = True


def _local_prototypes(f_w: torch.Tensor, f_s: torch.Tensor, bank: MemoryBank,
                      settings: ContrastSettings) -> torch.Tensor:
    """k+ = (f_s + sum of the K nearest bank rows) / (K + 1), with either
    part dropped by the module-ablation switches."""
    parts = []
    count = 0
    if settings.use_strong_aug:
        parts.append(f_s)
        count += 1
    if settings.use_local_structure:
        neighbours = bank.Z[bank.knn_indices(f_w, settings.K)]
        parts.append(neighbours.sum(dim=-2))
        count += settings.K
    if not parts:
        raise InvalidArgumentError("target-specific prototype needs the strong view or local structure")
    return sum(parts) / count


def build_prototypes(f_w: torch.Tensor, f_s: torch.Tensor, index: int, bank: MemoryBank,
                     K: int, use_local_structure: bool = True,
                     use_strong_aug: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """(k+, negatives) for one anchor stored at bank row `index`.

    Source-like anchor of class k: k+ = w_k; negatives are the other C-1
    centroids and all n_o target-specific rows. Target-specific anchor:
    k+ is the local prototype; negatives are the other n_o-1 target-specific
    rows and all C centroids. Both give C + n_o - 1 negatives."""
    settings = ContrastSettings(tau=1.0, K=K, use_local_structure=use_local_structure,
                                use_strong_aug=use_strong_aug)
    W = bank.centroids
    ts_rows = torch.nonzero(bank.target_specific_mask).flatten()
    if bank.split[index] == int(Split.SOURCE_LIKE):
        k = int(bank.split_class[index])
        others = torch.cat([W[:k], W[k + 1:]])
        return W[k], torch.cat([others, bank.Z[ts_rows]])
    k_plus = _local_prototypes(f_w.unsqueeze(0), f_s.unsqueeze(0), bank, settings)[0]
    remaining = ts_rows[ts_rows != index]
    return k_plus, torch.cat([bank.Z[remaining], W])


def _prototype_contrast(f: torch.Tensor, k_plus: torch.Tensor, keys: torch.Tensor,
                        negative_mask: torch.Tensor, tau: float) -> torch.Tensor:
    """-log softmax of the positive logit against the masked-in negatives,
    averaged over the batch."""
    positive = (f * k_plus).sum(dim=1, keepdim=True) / tau
    negatives = (f @ keys.T / tau).masked_fill(~negative_mask, float("-inf"))
    logits = torch.cat([positive, negatives], dim=1)
    return (torch.logsumexp(logits, dim=1) - positive.squeeze(1)).mean()


def contrastive_loss(batch: LossBatch, bank: MemoryBank, tau: float, K: int,
                     use_local_structure: bool = True, use_strong_aug: bool = True) -> torch.Tensor:
    """Adaptive prototype contrast over the divided bank."""
    if tau <= 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {tau}")
    settings = ContrastSettings(tau, K, use_local_structure, use_strong_aug)
    num_classes = bank.num_classes
    ts_rows = torch.nonzero(bank.target_specific_mask).flatten()
    keys = torch.cat([bank.centroids, bank.Z[ts_rows]])

    split = bank.split[batch.indices]
    cls = bank.split_class[batch.indices]
    source_like = split == int(Split.SOURCE_LIKE)

    k_class = bank.centroids[cls]
    k_local = _local_prototypes(batch.f_w, batch.f_s, bank, settings)
    k_plus = torch.where(source_like.unsqueeze(1), k_class, k_local)

    mask = torch.ones(batch.size, keys.shape[0], dtype=torch.bool)
    rows = torch.arange(batch.size)
    mask[rows[source_like], cls[source_like]] = False
    position = torch.full((bank.n,), -1, dtype=torch.long)
    position[ts_rows] = torch.arange(ts_rows.numel())
    own = position[batch.indices]
    mask[rows[~source_like], num_classes + own[~source_like]] = False

    return _prototype_contrast(batch.f_w, k_plus, keys, mask, tau)


def pseudo_label_centroids(bank: MemoryBank, pseudo_labels: torch.Tensor) -> torch.Tensor:
    """Unit-norm means of the bank rows grouped by pseudo-label (zero rows
    for empty classes)."""
    one_hot = F.one_hot(pseudo_labels, bank.num_classes).to(bank.Z.dtype)
    return F.normalize(one_hot.T @ bank.Z, dim=1)


def class_contrastive_loss(batch: LossBatch, bank: MemoryBank, tau: float,
                           pseudo_labels: torch.Tensor) -> torch.Tensor:
    """Scheme-S: positive is the centroid of the anchor's pseudo-label, the
    other C-1 centroids are the negatives."""
    centroids = pseudo_label_centroids(bank, pseudo_labels)
    return F.cross_entropy(batch.f_w @ centroids.T / tau, batch.pseudo_labels)


def instance_contrastive_loss(batch: LossBatch, bank: MemoryBank, tau: float) -> torch.Tensor:
    """Scheme-T: positive is the anchor's own bank row, the other n-1 rows
    are the negatives."""
    return F.cross_entropy(batch.f_w @ bank.Z.T / tau, batch.indices)


def mmd_prototypes(batch: LossBatch, bank: MemoryBank) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(q+, q-, valid) per anchor. q- is the same-split prototype of the
    anchor's class, q+ the opposite-split one; anchors whose class is absent
    from the opposite split are invalid (skipped)."""
    target_means, target_present = bank.target_class_means()
    source_present = torch.bincount(bank.split_class[bank.source_like_mask],
                                    minlength=bank.num_classes) > 0
    cls = bank.split_class[batch.indices]
    source_like = (bank.split[batch.indices] == int(Split.SOURCE_LIKE)).unsqueeze(1)

    centroid = bank.centroids[cls]
    target_mean = target_means[cls]
    q_plus = torch.where(source_like, target_mean, centroid)
    q_minus = torch.where(source_like, centroid, target_mean)
    valid = torch.where(source_like.squeeze(1), target_present[cls], source_present[cls])
    return q_plus, q_minus, valid


def _masked_mean(values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    if not valid.any():
        return values.sum() * 0.0
    return values[valid].mean()


def lmmd_loss(batch: LossBatch, bank: MemoryBank) -> torch.Tensor:
    q_plus, q_minus, valid = mmd_prototypes(batch, bank)
    gap = (batch.f_w * (q_minus - q_plus)).sum(dim=1)
    return _masked_mean(gap, valid)


def emmd_loss(batch: LossBatch, bank: MemoryBank, tau: float) -> torch.Tensor:
    """mean softplus((f.q- - f.q+) / tau); the non-negative upper bound of
    the clipped linear MMD."""
    if tau <= 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {tau}")
    q_plus, q_minus, valid = mmd_prototypes(batch, bank)
    gap = (batch.f_w * (q_minus - q_plus)).sum(dim=1) / tau
    return _masked_mean(torch.logaddexp(torch.zeros_like(gap), gap), valid)


def _dac(batch, bank, settings, pseudo_labels):
    return contrastive_loss(batch, bank, settings.tau, settings.K,
                            settings.use_local_structure, settings.use_strong_aug)


def _scheme_s(batch, bank, settings, pseudo_labels):
    return class_contrastive_loss(batch, bank, settings.tau, pseudo_labels)


def _scheme_t(batch, bank, settings, pseudo_labels):
    return instance_contrastive_loss(batch, bank, settings.tau)


# Contrastive term per scheme; None means no contrastive term.
CONTRASTIVE_SCHEMES: Dict[Scheme, Optional[Callable]] = {
    Scheme.DAC: _dac,
    Scheme.SCHEME_S: _scheme_s,
    Scheme.SCHEME_T: _scheme_t,
    Scheme.SELF_ONLY: None,
}

# Only the divided scheme has source-like / target-specific sets to align.
ALIGNING_SCHEMES = {Scheme.DAC}


def total_loss(batch: LossBatch, bank: MemoryBank, alpha: float, beta: float, omega: float,
               tau: float, K: int, mmd_kind: MMDKind, scheme: Scheme = Scheme.DAC,
               pseudo_labels: Optional[torch.Tensor] = None, use_local_structure: bool = True,
               use_strong_aug: bool = True) -> Tuple[torch.Tensor, LossReport]:
    """Returns the differentiable total and its LossReport.
    `pseudo_labels` (all n samples) is only needed by SCHEME_S."""
    settings = ContrastSettings(tau, K, use_local_structure, use_strong_aug)
    zero = batch.f_w.sum() * 0.0
    flags = list(bank.degenerate_flags)

    contrast = CONTRASTIVE_SCHEMES[scheme]
    if scheme is Scheme.SCHEME_S and pseudo_labels is None:
        raise InvalidArgumentError("SCHEME_S needs the pseudo-labels of every sample")
    con = zero if contrast is None else contrast(batch, bank, settings, pseudo_labels)
    self_term = self_training_loss(batch, omega, use_strong_aug)

    mmd = zero
    if scheme in ALIGNING_SCHEMES and mmd_kind is not MMDKind.NONE:
        _, _, valid = mmd_prototypes(batch, bank)
        skipped = int((~valid).sum())
        if skipped:
            flags.append(f"mmd_skipped_{skipped}")
        mmd = emmd_loss(batch, bank, tau) if mmd_kind is MMDKind.EMMD else lmmd_loss(batch, bank)

    total = con + alpha * self_term + beta * mmd
    report = LossReport(
        total=total.item(), con=con.item(), self_training=self_term.item(), mmd=mmd.item(),
        n_source_like=bank.n_source_like, n_target_specific=bank.n_target_specific,
        degenerate_flags=flags,
    )
    return total, report
