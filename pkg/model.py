"""
Feature extractor phi (MLP d -> h -> b) and the bias-free linear classifier
g_s, plus source training with label smoothing and the plain-text model
file format.

The classifier reads the raw bottleneck; the memory bank and every
contrastive / MMD loss read the L2-normalized copy (`feat`).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from config import (
    BOTTLENECK_DIM, HIDDEN_DIM, LABEL_SMOOTHING, SOURCE_ACC_FLOOR, SOURCE_BATCH_SIZE,
    SOURCE_EPOCHS, SOURCE_HOLDOUT, SOURCE_LR, SOURCE_MOMENTUM, SOURCE_WEIGHT_DECAY,
    make_generator, stream_seed,
)
from data import Dataset
from errors import InvalidArgumentError, ParseError, TrainingError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelDims:
    d: int
    h: int
    b: int
    C: int


@dataclass
class ForwardResult:
    """Batched forward pass; row i belongs to input row i."""

    bottleneck: torch.Tensor
    feat: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor

    @property
    def predictions(self) -> torch.Tensor:
        # torch.argmax returns the first maximal index: ties go to the lowest class.
        return self.probs.argmax(dim=1)


class ModelParams(nn.Module):
    """h = g_s o phi. Only `extractor` is trained during adaptation."""

    def __init__(self, dims: ModelDims, seed: int = 0):
        super().__init__()
        self.dims = dims
        # Default nn.Linear init is uniform with fan-in scaling; seed it
        # without disturbing the global generator.
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(stream_seed(seed, "init"))
            self.extractor = nn.Sequential(
                nn.Linear(dims.d, dims.h, dtype=DTYPE),
                nn.ReLU(),
                nn.Linear(dims.h, dims.b, dtype=DTYPE),
            )
            self.classifier = nn.Linear(dims.b, dims.C, bias=False, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> ForwardResult:
        bottleneck = self.extractor(x)
        logits = self.classifier(bottleneck)
        return ForwardResult(
            bottleneck=bottleneck,
            feat=F.normalize(bottleneck, dim=1),
            logits=logits,
            probs=F.softmax(logits, dim=1),
        )

    def freeze_classifier(self) -> None:
        for p in self.classifier.parameters():
            p.requires_grad_(False)

    def extractor_parameters(self) -> List[nn.Parameter]:
        return list(self.extractor.parameters())


def forward(params: ModelParams, x_batch: torch.Tensor) -> ForwardResult:
    if x_batch.dim() != 2 or x_batch.shape[0] == 0:
        raise InvalidArgumentError(f"expected a nonempty (B, d) batch, got shape {tuple(x_batch.shape)}")
    if x_batch.shape[1] != params.dims.d:
        raise InvalidArgumentError(f"input dimension {x_batch.shape[1]} != model dimension {params.dims.d}")
    return params(x_batch.to(DTYPE))


@torch.no_grad()
def predict_all(params: ModelParams, dataset: Dataset, batch_size: int = 4096) -> Tuple[torch.Tensor, torch.Tensor]:
    """(probs n x C, feats n x b) for every row of the dataset."""
    x = dataset.tensor()
    probs, feats = [], []
    for start in range(0, dataset.n, batch_size):
        out = forward(params, x[start:start + batch_size])
        probs.append(out.probs)
        feats.append(out.feat)
    return torch.cat(probs), torch.cat(feats)


def smoothed_targets(labels: torch.Tensor, num_classes: int, epsilon: float) -> torch.Tensor:
    """eps/C off-class, 1 - eps + eps/C on-class."""
    one_hot = F.one_hot(labels, num_classes).to(DTYPE)
    return (1.0 - epsilon) * one_hot + epsilon / num_classes


def label_smoothing_loss(logits: torch.Tensor, labels: torch.Tensor, epsilon: float) -> torch.Tensor:
    targets = smoothed_targets(labels, logits.shape[1], epsilon)
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


@dataclass(frozen=True)
class SourceTrainConfig:
    lr: float = SOURCE_LR
    epochs: int = SOURCE_EPOCHS
    batch_size: int = SOURCE_BATCH_SIZE
    momentum: float = SOURCE_MOMENTUM
    weight_decay: float = SOURCE_WEIGHT_DECAY
    smoothing: float = LABEL_SMOOTHING
    holdout_fraction: float = SOURCE_HOLDOUT
    acc_floor: float = SOURCE_ACC_FLOOR
    hidden_dim: int = HIDDEN_DIM
    bottleneck_dim: int = BOTTLENECK_DIM


@dataclass
class SourceTrainResult:
    params: ModelParams
    holdout_acc: float
    final_loss: float
    epochs: int


@torch.no_grad()
def accuracy(params: ModelParams, x: torch.Tensor, y: torch.Tensor) -> float:
    return (forward(params, x).predictions == y).double().mean().item()


def train_source_with_report(config: SourceTrainConfig, source_dataset: Dataset, seed: int) -> SourceTrainResult:
    if not source_dataset.has_labels:
        raise InvalidArgumentError("source training needs a labeled dataset")

    x = source_dataset.tensor()
    y = source_dataset.label_tensor()
    n = source_dataset.n
    order = torch.randperm(n, generator=make_generator(seed, "holdout"))
    n_holdout = int(round(n * config.holdout_fraction))
    if 0 < n_holdout < n:
        holdout_idx, train_idx = order[:n_holdout], order[n_holdout:]
    else:
        holdout_idx, train_idx = order, order

    dims = ModelDims(d=source_dataset.d, h=config.hidden_dim, b=config.bottleneck_dim, C=source_dataset.C)
    params = ModelParams(dims, seed=seed)
    optimizer = torch.optim.SGD(params.parameters(), lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    shuffle = make_generator(seed, "source-shuffle")

    loss_value = float("nan")
    for epoch in range(config.epochs):
        perm = train_idx[torch.randperm(len(train_idx), generator=shuffle)]
        for iteration, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            out = forward(params, x[idx])
            loss = label_smoothing_loss(out.logits, y[idx], config.smoothing)
            if not torch.isfinite(loss):
                raise TrainingError("non-finite source loss", epoch=epoch, iteration=iteration)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_value = loss.item()

    holdout_acc = accuracy(params, x[holdout_idx], y[holdout_idx])
    logger.info(f"Source training finished: holdout accuracy {holdout_acc:.4f}, last loss {loss_value:.4f}")
    if holdout_acc < config.acc_floor:
        raise TrainingError(
            f"source holdout accuracy {holdout_acc:.4f} is below the floor {config.acc_floor}",
            epoch=config.epochs)
    return SourceTrainResult(params=params, holdout_acc=holdout_acc, final_loss=loss_value, epochs=config.epochs)


def train_source(config: SourceTrainConfig, source_dataset: Dataset, seed: int) -> ModelParams:
    return train_source_with_report(config, source_dataset, seed).params


def _tensors_in_file_order(params: ModelParams) -> List[torch.Tensor]:
    first, _, second = params.extractor
    return [first.weight, first.bias, second.weight, second.bias, params.classifier.weight]


def save_model(params: ModelParams, path: Path) -> None:
    """Header "d h b C", then one line per tensor, row-major, 17 significant digits."""
    dims = params.dims
    lines = [f"{dims.d} {dims.h} {dims.b} {dims.C}"]
    for tensor in _tensors_in_file_order(params):
        lines.append(" ".join(f"{v:.17g}" for v in tensor.detach().reshape(-1).tolist()))
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info(f"Model written to {path}")


def load_model(path: Path) -> ModelParams:
    try:
        lines = Path(path).read_bytes().decode("utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise ParseError(f"invalid UTF-8 at byte {e.start}", 0) from e
    if not lines:
        raise ParseError("empty model file", 0)
    try:
        d, h, b, C = (int(tok) for tok in lines[0].split())
    except ValueError as e:
        raise ParseError(f"header must be 'd h b C': {e}", 0) from e

    params = ModelParams(ModelDims(d=d, h=h, b=b, C=C))
    tensors = _tensors_in_file_order(params)
    if len(lines) - 1 < len(tensors):
        raise ParseError(f"expected {len(tensors)} tensor lines, got {len(lines) - 1}", len(lines))
    with torch.no_grad():
        for row, tensor in enumerate(tensors, start=1):
            try:
                values = [float(tok) for tok in lines[row].split()]
            except ValueError as e:
                raise ParseError(f"non-numeric value: {e}", row) from e
            if len(values) != tensor.numel():
                raise ParseError(f"expected {tensor.numel()} values, got {len(values)}", row)
            tensor.copy_(torch.tensor(values, dtype=DTYPE).reshape(tensor.shape))
    for row in range(len(tensors) + 1, len(lines)):
        if lines[row].strip():
            raise ParseError(f"unexpected content after the {len(tensors)} tensor lines", row)
    return params
