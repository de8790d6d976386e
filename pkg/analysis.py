"""
Empirical estimates of the measurable terms in the target-error bound:
consistency error under the transformation ball, disagreement with the
pseudo-labeler, error rates on the source-like split versus the whole
target, a proxy divergence between the two splits of each class, and a
sampled Lipschitz constant with the confidence threshold it implies.

The expansion constants (q, gamma) and the optimal-model risk have no
estimator and are not reported; the report puts the measurable terms next
to the realized target error instead of asserting the inequality.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import torch
from torch import nn

from augment import AugmentPolicy, ball_points, l1_ball_offsets
from bank import MemoryBank, init_bank
from config import N_AUG, N_PAIRS, RADIUS_R, SPLIT_CLASSIFIER_EPOCHS, SPLIT_CLASSIFIER_LR, make_generator
from data import Dataset
from errors import InvalidArgumentError
from model import ModelParams, forward, predict_all
from pseudo import PseudoLabelState, update_pseudo_labels

logger = logging.getLogger(__name__)

# Largest value tau_claim may take; a threshold of 1 would select nothing.
TAU_CLAIM_CAP = 1 - 1e-6
# Pairs closer than this (L1) are skipped by the Lipschitz estimate.
MIN_PAIR_DISTANCE = 1e-9


@dataclass
class BoundReport:
    consistency_error: float
    consistency_error_source_like: float
    disagreement: float
    eps_DS_pl: float
    eps_DS: float
    eps_DT: float
    # per class; None where a split has fewer than 4 samples of that class
    proxy_div: List[Optional[float]]
    lipschitz_hat: float
    tau_claim: float
    target_error: float
    n_source_like: int
    tau_c: float
    radius_r: float

    def rows(self) -> List[Tuple[str, str]]:
        rows = []
        for name in ("consistency_error", "consistency_error_source_like", "disagreement",
                     "eps_DS_pl", "eps_DS", "eps_DT", "lipschitz_hat", "tau_claim",
                     "target_error", "n_source_like", "tau_c", "radius_r"):
            value = getattr(self, name)
            rows.append((name, repr(value) if isinstance(value, float) else str(value)))
        for c, value in enumerate(self.proxy_div):
            rows.append((f"proxy_div_class_{c}", "skip" if value is None else repr(value)))
        return rows


@dataclass
class SplitErrors:
    disagreement: float
    eps_DS_pl: float
    eps_DS: float
    eps_DT: float


@dataclass
class ClaimCheck:
    tau_c: float
    n_source_like: int
    consistency_error_source_like: float
    eps_DS: Optional[float] = None
    eps_DT: Optional[float] = None
    flipped_indices: List[int] = field(default_factory=list)


def _rate(mask: torch.Tensor, within: Optional[torch.Tensor] = None) -> float:
    """Fraction of True in `mask`, optionally restricted; 0.0 for an empty set."""
    if within is not None:
        mask = mask[within]
    return mask.double().mean().item() if mask.numel() else 0.0


@torch.no_grad()
def _predictions(params: ModelParams, x: torch.Tensor) -> torch.Tensor:
    return forward(params, x).predictions


@torch.no_grad()
def flip_mask(params: ModelParams, dataset: Dataset, policy: AugmentPolicy, n_aug: int,
              seed: int) -> torch.Tensor:
    """Per sample: did any of n_aug draws from B(x) change the prediction?"""
    if n_aug < 1:
        raise InvalidArgumentError(f"n_aug must be >= 1, got {n_aug}")
    x = dataset.tensor()
    base = _predictions(params, x)
    gen = make_generator(seed, "analysis")
    flipped = torch.zeros(dataset.n, dtype=torch.bool)
    for _ in range(n_aug):
        flipped |= _predictions(params, ball_points(x, policy, gen)) != base
    return flipped


def consistency_error(params: ModelParams, dataset: Dataset, policy: AugmentPolicy,
                      n_aug: int = N_AUG, seed: int = 0, mask: Optional[torch.Tensor] = None) -> float:
    """Monte-Carlo estimate of P[exists x' in B(x): h(x') != h(x)], over the
    whole dataset or the rows selected by `mask`."""
    return _rate(flip_mask(params, dataset, policy, n_aug, seed), mask)


@torch.no_grad()
def disagreement_and_split_errors(params: ModelParams, pseudo_state: PseudoLabelState,
                                  dataset: Dataset, bank: MemoryBank) -> SplitErrors:
    if not dataset.has_labels:
        raise InvalidArgumentError("split errors need ground-truth labels")
    predicted = _predictions(params, dataset.tensor())
    labels = dataset.label_tensor()
    source_like = bank.source_like_mask
    return SplitErrors(
        disagreement=_rate(predicted != pseudo_state.labels),
        eps_DS_pl=_rate(pseudo_state.labels != labels, source_like),
        eps_DS=_rate(predicted != labels, source_like),
        eps_DT=_rate(predicted != labels),
    )


def proxy_divergence(bank: MemoryBank, c: int, seed: int, epochs: int = SPLIT_CLASSIFIER_EPOCHS,
                     lr: float = SPLIT_CLASSIFIER_LR) -> Optional[float]:
    """2 (1 - 2 err) of a linear classifier separating the source-like and
    target-specific bank rows of class c, err measured on a held-out half.
    None when either split has fewer than 4 rows of the class."""
    in_class = bank.split_class == c
    groups = [bank.Z[bank.source_like_mask & in_class], bank.Z[bank.target_specific_mask & in_class]]
    if min(len(g) for g in groups) < 4:
        return None

    gen = make_generator(seed, f"split-classifier-{c}")
    train_x, train_y, test_x, test_y = [], [], [], []
    for label, group in enumerate(groups):
        order = torch.randperm(len(group), generator=gen)
        half = len(group) // 2
        for rows, xs, ys in ((order[:half], train_x, train_y), (order[half:], test_x, test_y)):
            xs.append(group[rows])
            ys.append(torch.full((len(rows),), float(label), dtype=group.dtype))
    train_x, train_y = torch.cat(train_x), torch.cat(train_y)
    test_x, test_y = torch.cat(test_x), torch.cat(test_y)

    split_classifier = nn.Linear(bank.Z.shape[1], 1, dtype=bank.Z.dtype)
    nn.init.zeros_(split_classifier.weight)
    nn.init.zeros_(split_classifier.bias)
    optimizer = torch.optim.SGD(split_classifier.parameters(), lr=lr)
    loss_fn = nn.BCEWithLogitsLoss()
    for _ in range(epochs):
        optimizer.zero_grad()
        loss_fn(split_classifier(train_x).squeeze(1), train_y).backward()
        optimizer.step()

    with torch.no_grad():
        err = ((split_classifier(test_x).squeeze(1) > 0).to(test_y.dtype) != test_y).double().mean().item()
    return min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err)))


HBar = Union[ModelParams, Callable[[torch.Tensor], torch.Tensor]]


@torch.no_grad()
def lipschitz_and_threshold(h_bar: HBar, dataset: Dataset, n_pairs: int = N_PAIRS, seed: int = 0,
                            radius_r: float = RADIUS_R) -> Tuple[float, float]:
    """L_hat = max ||h(x) - h(x')||_1 / ||x - x'||_1 over sampled local pairs
    (x' drawn from the L1 ball of radius r around x), and the threshold
    tau_claim = L_hat r / 4 + 1/2. L_hat is a lower bound on the true constant.
    h_bar is either a model (its probabilities) or any batch mapping."""
    if n_pairs < 1:
        raise InvalidArgumentError(f"n_pairs must be >= 1, got {n_pairs}")
    mapping = (lambda x: forward(h_bar, x).probs) if isinstance(h_bar, ModelParams) else h_bar
    gen = make_generator(seed, "lipschitz")
    x = dataset.tensor()[torch.randint(dataset.n, (n_pairs,), generator=gen)]
    x_prime = x + l1_ball_offsets(tuple(x.shape), radius_r, gen, x.dtype)
    distance = (x - x_prime).abs().sum(dim=1)
    keep = distance >= MIN_PAIR_DISTANCE
    if not keep.any():
        raise InvalidArgumentError("every sampled pair is degenerate (zero distance)")
    change = (mapping(x) - mapping(x_prime)).abs().sum(dim=1)
    lipschitz_hat = (change[keep] / distance[keep]).max().item()
    return lipschitz_hat, min(TAU_CLAIM_CAP, lipschitz_hat * radius_r / 4 + 0.5)


def claim_check(params: ModelParams, dataset: Dataset, policy: AugmentPolicy, tau_c: float,
                n_aug: int = N_AUG, seed: int = 0) -> ClaimCheck:
    """Divide the dataset at tau_c on clean predictions and measure the
    consistency error of the resulting source-like set."""
    probs, _ = predict_all(params, dataset)
    source_like = probs.amax(dim=1) >= tau_c
    flipped = flip_mask(params, dataset, policy, n_aug, seed)
    check = ClaimCheck(
        tau_c=tau_c,
        n_source_like=int(source_like.sum()),
        consistency_error_source_like=_rate(flipped, source_like),
        flipped_indices=torch.nonzero(flipped & source_like).flatten().tolist(),
    )
    if dataset.has_labels:
        wrong = probs.argmax(dim=1) != dataset.label_tensor()
        check.eps_DS = _rate(wrong, source_like)
        check.eps_DT = _rate(wrong)
    if check.consistency_error_source_like > 0:
        logger.warning(f"{len(check.flipped_indices)} source-like sample(s) flip inside the ball at tau_c={tau_c}")
    return check


def division_at_threshold(params: ModelParams, dataset: Dataset, tau_c: float,
                          pseudo_state: PseudoLabelState) -> MemoryBank:
    """A bank of the model's features with every sample divided at tau_c."""
    bank = init_bank(params, dataset, pseudo_labels=pseudo_state.labels)
    probs, _ = predict_all(params, dataset)
    bank.update_division(probs, tau_c, pseudo_state.labels)
    bank.class_centroids()
    return bank


def bound_report(params: ModelParams, dataset: Dataset, policy: AugmentPolicy, tau_c: float,
                 n_aug: int = N_AUG, n_pairs: int = N_PAIRS, seed: int = 0,
                 pseudo_state: Optional[PseudoLabelState] = None,
                 bank: Optional[MemoryBank] = None) -> BoundReport:
    if pseudo_state is None:
        pseudo_state = update_pseudo_labels(params, dataset)
    if bank is None:
        bank = division_at_threshold(params, dataset, tau_c, pseudo_state)

    flipped = flip_mask(params, dataset, policy, n_aug, seed)
    errors = disagreement_and_split_errors(params, pseudo_state, dataset, bank)
    lipschitz_hat, tau_claim = lipschitz_and_threshold(params, dataset, n_pairs, seed, policy.radius_r)
    report = BoundReport(
        consistency_error=_rate(flipped),
        consistency_error_source_like=_rate(flipped, bank.source_like_mask),
        disagreement=errors.disagreement,
        eps_DS_pl=errors.eps_DS_pl,
        eps_DS=errors.eps_DS,
        eps_DT=errors.eps_DT,
        proxy_div=[proxy_divergence(bank, c, seed) for c in range(bank.num_classes)],
        lipschitz_hat=lipschitz_hat,
        tau_claim=tau_claim,
        target_error=errors.eps_DT,
        n_source_like=bank.n_source_like,
        tau_c=tau_c,
        radius_r=policy.radius_r,
    )
    logger.info(f"Bound report: target error {report.target_error:.4f}, consistency "
                f"{report.consistency_error:.4f}, L_hat {lipschitz_hat:.4f}, tau_claim {tau_claim:.4f}")
    return report


def save_bound_report(report: BoundReport, path: Path) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["key", "value"])
        writer.writerows(report.rows())
    logger.info(f"Bound report written to {path}")
