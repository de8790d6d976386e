"""
Datasets for the adaptation experiments: the Dataset container every other
module consumes, the two synthetic domain-shift generators (rotated two
moons, translated Gaussian blobs) and the CSV interchange format.

CSV layout: header "x0,...,x{d-1},label,domain", one sample per row. The
label cell is empty for unlabeled rows; features are written with 17
significant digits so a save/load round trip is exact for float64.
"""

import csv
import io
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.datasets import make_blobs, make_moons

from config import BLOB_RADIUS
from errors import InvalidArgumentError, ParseError

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"

_FEATURE_COLUMN_RE = re.compile(r"^x(\d+)$")


@dataclass
class Dataset:
    """n x d feature matrix, optional labels in [0, C), and a domain tag."""

    features: np.ndarray
    labels: Optional[np.ndarray]
    domain_tag: str
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise InvalidArgumentError(f"features must be n x d with d >= 1, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise InvalidArgumentError(f"expected {self.n} labels, got shape {self.labels.shape}")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise InvalidArgumentError(f"labels must lie in [0, {self.num_classes})")
            counts = np.bincount(self.labels, minlength=self.num_classes)
            if (counts == 0).any():
                empty = np.flatnonzero(counts == 0).tolist()
                raise InvalidArgumentError(f"classes without samples: {empty}")
        if self.num_classes is not None and self.n < self.num_classes:
            raise InvalidArgumentError(f"n={self.n} is smaller than C={self.num_classes}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def C(self) -> Optional[int]:
        return self.num_classes

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.features)

    def label_tensor(self) -> Optional[torch.Tensor]:
        return None if self.labels is None else torch.from_numpy(self.labels)

    def without_labels(self) -> "Dataset":
        return Dataset(self.features.copy(), None, self.domain_tag, self.num_classes)


def rotation_matrix(rotation_deg: float) -> np.ndarray:
    theta = math.radians(rotation_deg)
    return np.array([[math.cos(theta), -math.sin(theta)],
                     [math.sin(theta), math.cos(theta)]])


def rotate(features: np.ndarray, rotation_deg: float) -> np.ndarray:
    """Rotate 2-D points about the origin."""
    return features @ rotation_matrix(rotation_deg).T


def gen_two_moons(n: int, noise: float, rotation_deg: float, seed: int,
                  domain_tag: str = SOURCE) -> Dataset:
    """Two interleaved half circles (C=2, d=2), n/2 per class, Gaussian noise,
    then the whole cloud rotated by rotation_deg about the origin."""
    if n < 4 or n % 2:
        raise InvalidArgumentError(f"two moons needs an even n >= 4, got {n}")
    if noise < 0:
        raise InvalidArgumentError(f"noise must be >= 0, got {noise}")

    features, labels = make_moons(n_samples=n, shuffle=False, noise=noise or None, random_state=seed)
    return Dataset(rotate(features, rotation_deg), labels, domain_tag, num_classes=2)


def blob_centers(num_classes: int, d: int, radius: float = BLOB_RADIUS) -> np.ndarray:
    """Distinct cluster means: evenly spaced on a circle in the first two
    coordinates, or along the line for d == 1."""
    centers = np.zeros((num_classes, d))
    if d == 1:
        centers[:, 0] = radius * np.arange(num_classes)
        return centers
    angles = 2 * math.pi * np.arange(num_classes) / num_classes
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_gauss_blobs(n: int, C: int, d: int, shift: Optional[Sequence[float]], spread: float,
                    seed: int, domain_tag: Optional[str] = None) -> Dataset:
    """C Gaussian clusters around blob_centers(C, d). A non-zero shift
    translates every point (the covariate-shifted target variant)."""
    if C < 2 or n < C or d < 1:
        raise InvalidArgumentError(f"gauss blobs needs n >= C >= 2 and d >= 1, got n={n}, C={C}, d={d}")
    if spread < 0:
        raise InvalidArgumentError(f"spread must be >= 0, got {spread}")
    offset = np.zeros(d) if shift is None or len(shift) == 0 else np.asarray(shift, dtype=np.float64)
    if offset.shape != (d,):
        raise InvalidArgumentError(f"shift must have length {d}, got {offset.shape[0]}")

    features, labels = make_blobs(
        n_samples=n, n_features=d, centers=blob_centers(C, d), cluster_std=spread,
        shuffle=False, random_state=seed,
    )
    if domain_tag is None:
        domain_tag = TARGET if offset.any() else SOURCE
    return Dataset(features + offset, labels, domain_tag, num_classes=C)


def save_csv(dataset: Dataset, path: Path) -> None:
    path = Path(path)
    header = [f"x{j}" for j in range(dataset.d)] + ["label", "domain"]
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            label = "" if dataset.labels is None else str(int(dataset.labels[i]))
            writer.writerow([f"{v:.17g}" for v in dataset.features[i]] + [label, dataset.domain_tag])
    logger.info(f"Wrote {dataset.n} samples to {path}")


def _parse_header(header: Sequence[str]) -> int:
    if len(header) < 3 or header[-2:] != ["label", "domain"]:
        raise ParseError("header must end with label,domain", 0)
    for j, name in enumerate(header[:-2]):
        m = _FEATURE_COLUMN_RE.match(name)
        if not m or int(m.group(1)) != j:
            raise ParseError(f"expected column x{j}, got {name!r}", 0)
    return len(header) - 2


def load_csv(path: Path, num_classes: Optional[int] = None) -> Dataset:
    """Read a dataset CSV. Labels are dropped entirely when any label cell
    is empty; num_classes must then come from the caller (the model)."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"invalid UTF-8 at byte {e.start}", raw.count(b"\n", 0, e.start)) from e
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows:
        raise ParseError("empty file", 0)

    d = _parse_header(rows[0])
    features = []
    labels = []
    domains = set()
    for row_no, row in enumerate(rows[1:], start=1):
        if len(row) != d + 2:
            raise ParseError(f"expected {d + 2} columns, got {len(row)}", row_no)
        try:
            values = [float(v) for v in row[:d]]
        except ValueError as e:
            raise ParseError(f"non-numeric feature: {e}", row_no) from e
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite feature", row_no)
        features.append(values)
        cell = row[d].strip()
        if cell:
            try:
                labels.append(int(cell))
            except ValueError as e:
                raise ParseError(f"non-integer label {cell!r}", row_no) from e
        else:
            labels.append(None)
        domains.add(row[d + 1])

    if not features:
        raise ParseError("no data rows", 1)
    if len(domains) > 1:
        logger.warning(f"{path} mixes domain tags {sorted(domains)}; keeping the first")
    domain_tag = rows[1][d + 1]

    label_array = None
    if all(label is not None for label in labels):
        label_array = np.asarray(labels, dtype=np.int64)
    elif any(label is not None for label in labels):
        logger.warning(f"{path} has some empty label cells; treating the whole file as unlabeled")

    return Dataset(np.asarray(features, dtype=np.float64), label_array, domain_tag, num_classes)
