"""
The adaptation loop.

Start from the source model with the classifier frozen, build the memory
bank from a source forward pass and seed the division from the most
confident samples of each class. Each epoch refreshes the pseudo-labels;
each mini-batch then runs, in this order: weak and strong views through the
model, momentum update of the batch's bank rows, division update of those
rows, centroid refresh, losses, one SGD step on the extractor.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import torch

from augment import AugmentPolicy, strong_aug, weak_aug
from bank import MemoryBank, Split, init_bank
from config import (
    ALPHA, BANK_MOMENTUM, BATCH_SIZE, BETA, EPOCHS, INIT_FRACTION, LR0, LR_EXPONENT, LR_FACTOR,
    NEIGHBORS_K, OMEGA, OMEGA_WARMUP, SEED, SGD_MOMENTUM, TAU_C, TEMPERATURE, WEIGHT_DECAY,
    make_generator,
)
from data import Dataset
from errors import InvalidArgumentError, TrainingError
from losses import LossBatch, LossReport, MMDKind, Scheme, total_loss
from model import ModelParams, forward, predict_all
from pseudo import PseudoLabelState, update_pseudo_labels

logger = logging.getLogger(__name__)

__all__ = [
    "AdaptConfig", "EpochRecord", "EvalResult", "Scheme", "MMDKind",
    "lr_schedule", "adapt", "evaluate",
]


@dataclass(frozen=True)
class AdaptConfig:
    tau_c: float = TAU_C
    alpha: float = ALPHA
    beta: float = BETA
    K: int = NEIGHBORS_K
    m: float = BANK_MOMENTUM
    tau: float = TEMPERATURE
    omega: float = OMEGA
    omega_warmup: float = OMEGA_WARMUP
    lr0: float = LR0
    momentum_sgd: float = SGD_MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    seed: int = SEED
    scheme: Scheme = Scheme.DAC
    mmd_kind: MMDKind = MMDKind.EMMD
    lr_exponent: float = LR_EXPONENT
    lr_factor: float = LR_FACTOR
    lr_drop_epoch: Optional[int] = None
    init_fraction: float = INIT_FRACTION
    renormalize_bank: bool = True
    renormalize_centroids: bool = True
    use_local_structure: bool = True
    use_strong_aug: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau_c < 1.0:
            raise InvalidArgumentError(f"tau_c must lie in (0, 1), got {self.tau_c}")
        if self.K < 1:
            raise InvalidArgumentError(f"K must be >= 1, got {self.K}")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("batch_size must be >= 1 and epochs >= 0")
        if self.tau <= 0:
            raise InvalidArgumentError(f"temperature must be > 0, got {self.tau}")
        if not (self.use_strong_aug or self.use_local_structure):
            raise InvalidArgumentError("use_strong_aug and use_local_structure cannot both be off")


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: List[float]
    # split name -> accuracy over that split, None when the split is empty
    split_accuracies: Dict[str, Optional[float]]


@dataclass
class EpochRecord:
    epoch: int
    acc_target: Optional[float]
    acc_source_like_split: Optional[float]
    acc_target_specific_split: Optional[float]
    loss_total: float
    loss_con: float
    loss_self: float
    loss_mmd: float
    n_source_like: int
    degenerate_flags: List[str] = field(default_factory=list)
    reseeded: bool = False


def lr_schedule(lr0: float, progress: float, lr_factor: float = LR_FACTOR,
                lr_exponent: float = LR_EXPONENT) -> float:
    if not 0.0 <= progress <= 1.0:
        raise InvalidArgumentError(f"progress must lie in [0, 1], got {progress}")
    return lr0 * (1.0 + lr_factor * progress) ** lr_exponent


@torch.no_grad()
def evaluate(params: ModelParams, dataset: Dataset, bank: Optional[MemoryBank] = None) -> EvalResult:
    if not dataset.has_labels:
        raise InvalidArgumentError("evaluation needs ground-truth labels")
    probs, _ = predict_all(params, dataset)
    correct = probs.argmax(dim=1) == dataset.label_tensor()
    labels = dataset.label_tensor()

    per_class = []
    for c in range(dataset.C):
        in_class = labels == c
        per_class.append(correct[in_class].double().mean().item() if in_class.any() else 0.0)

    splits: Dict[str, Optional[float]] = {}
    if bank is not None:
        for name, mask in (("source_like", bank.source_like_mask),
                           ("target_specific", bank.target_specific_mask)):
            splits[name] = correct[mask].double().mean().item() if mask.any() else None
    return EvalResult(correct.double().mean().item(), per_class, splits)


def _epoch_record(epoch: int, reports: List[LossReport], params: ModelParams, dataset: Dataset,
                  bank: MemoryBank, alpha: float, beta: float, reseeded: bool) -> EpochRecord:
    con = sum(r.con for r in reports) / len(reports)
    self_term = sum(r.self_training for r in reports) / len(reports)
    mmd = sum(r.mmd for r in reports) / len(reports)
    flags = sorted({flag for r in reports for flag in r.degenerate_flags})
    acc = acc_sl = acc_ts = None
    if dataset.has_labels:
        result = evaluate(params, dataset, bank)
        acc = result.accuracy
        acc_sl = result.split_accuracies["source_like"]
        acc_ts = result.split_accuracies["target_specific"]
    return EpochRecord(
        epoch=epoch, acc_target=acc, acc_source_like_split=acc_sl, acc_target_specific_split=acc_ts,
        loss_total=con + alpha * self_term + beta * mmd, loss_con=con, loss_self=self_term,
        loss_mmd=mmd, n_source_like=bank.n_source_like, degenerate_flags=flags, reseeded=reseeded,
    )


# Called after every epoch with (epoch, params, bank, pseudo_state).
EpochHook = Callable[[int, ModelParams, MemoryBank, PseudoLabelState], None]


def adapt(config: AdaptConfig, source_params: ModelParams, target_dataset: Dataset,
          policy: Optional[AugmentPolicy] = None,
          on_epoch_end: Optional[EpochHook] = None) -> Tuple[ModelParams, List[EpochRecord]]:
    policy = policy or AugmentPolicy()
    n = target_dataset.n
    if n < config.batch_size:
        raise InvalidArgumentError(f"dataset of {n} samples is smaller than batch_size {config.batch_size}")

    params = copy.deepcopy(source_params)
    params.freeze_classifier()
    history: List[EpochRecord] = []
    if config.epochs == 0:
        return params, history

    bank = init_bank(params, target_dataset, momentum=config.m, renormalize=config.renormalize_bank,
                     renormalize_centroids=config.renormalize_centroids,
                     init_fraction=config.init_fraction)
    optimizer = torch.optim.SGD(params.extractor_parameters(), lr=config.lr0,
                                momentum=config.momentum_sgd, weight_decay=config.weight_decay)
    shuffle_gen = make_generator(config.seed, "shuffle")
    augment_gen = make_generator(config.seed, "augment")

    x_all = target_dataset.tensor()
    iters_per_epoch = -(-n // config.batch_size)
    max_iter = config.epochs * iters_per_epoch
    warmup_iters = max(1.0, config.omega_warmup * max_iter)
    pseudo: Optional[PseudoLabelState] = None
    iteration = 0

    for epoch in range(config.epochs):
        pseudo = update_pseudo_labels(params, target_dataset, pseudo)
        bank.refresh_target_classes(pseudo.labels)
        order = torch.randperm(n, generator=shuffle_gen)
        reports: List[LossReport] = []

        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = lr_schedule(config.lr0, iteration / max_iter, config.lr_factor, config.lr_exponent)
            if config.lr_drop_epoch is not None and epoch >= config.lr_drop_epoch:
                lr *= 0.1
            for group in optimizer.param_groups:
                group["lr"] = lr
            omega = config.omega * min(1.0, iteration / warmup_iters)

            x = x_all[idx]
            out_w = forward(params, weak_aug(x, policy, augment_gen))
            out_s = forward(params, strong_aug(x, policy, augment_gen))

            with torch.no_grad():
                bank.momentum_update(idx, out_w.feat)
                bank.update_division(out_w.probs, config.tau_c, pseudo.labels[idx], indices=idx)
                bank.class_centroids()

            batch = LossBatch(indices=idx, f_w=out_w.feat, f_s=out_s.feat, p_w=out_w.probs,
                              p_s=out_s.probs, pseudo_labels=pseudo.labels[idx])
            loss, report = total_loss(
                batch, bank, config.alpha, config.beta, omega, config.tau, config.K,
                config.mmd_kind, config.scheme, pseudo_labels=pseudo.labels,
                use_local_structure=config.use_local_structure, use_strong_aug=config.use_strong_aug,
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite adaptation loss {report}", epoch=epoch, iteration=iteration)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            reports.append(report)
            iteration += 1

        reseeded = False
        if bank.n_source_like == 0:
            logger.warning(f"Epoch {epoch}: source-like set is empty; re-seeding the division")
            probs, _ = predict_all(params, target_dataset)
            bank.init_division_top_percent(probs, pseudo.labels)
            bank.class_centroids()
            reseeded = True

        record = _epoch_record(epoch, reports, params, target_dataset, bank,
                               config.alpha, config.beta, reseeded)
        if reseeded:
            record.degenerate_flags.append("division_reseeded")
        history.append(record)
        acc_text = "n/a" if record.acc_target is None else f"{record.acc_target:.4f}"
        logger.info(
            f"Epoch {epoch}: loss {record.loss_total:.4f} (con {record.loss_con:.4f}, "
            f"self {record.loss_self:.4f}, mmd {record.loss_mmd:.4f}), "
            f"source-like {record.n_source_like}/{n}, target acc {acc_text}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, bank, pseudo)

    return params, history


def split_name(code: int) -> str:
    return Split(code).name
