import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, get_type_hints

import torch

from errors import ConfigError

logger = logging.getLogger(__name__)

# Data generation
DATA_KIND = "moons"
N_SAMPLES = 2000
MOONS_NOISE = 0.1
SOURCE_ROTATION_DEG = 0.0
TARGET_ROTATION_DEG = 40.0
BLOB_CLASSES = 3
BLOB_DIM = 2
BLOB_SPREAD = 0.3
# Cluster means sit on a circle of this radius in the first two coordinates.
BLOB_RADIUS = 4.0

# Augmentation (unit-scale synthetic data)
SIGMA_WEAK = 0.05
SIGMA_STRONG = 0.15
# Off by default: on 2-D inputs a dropped coordinate lands the point on an axis
# that crosses both classes.
DROPOUT_PROB = 0.0
SCALE_JITTER = 0.1
RADIUS_R = 0.5

# Model
HIDDEN_DIM = 64
BOTTLENECK_DIM = 32

# Source training
SOURCE_LR = 0.05
SOURCE_EPOCHS = 50
SOURCE_BATCH_SIZE = 64
SOURCE_MOMENTUM = 0.9
SOURCE_WEIGHT_DECAY = 5e-4
LABEL_SMOOTHING = 0.1
SOURCE_HOLDOUT = 0.2
SOURCE_ACC_FLOOR = 0.9

# Adaptation
TAU_C = 0.95
ALPHA = 0.5
BETA = 0.5
NEIGHBORS_K = 5
BANK_MOMENTUM = 0.2
TEMPERATURE = 0.05
OMEGA = 1.0
# Fraction of all iterations over which omega ramps up linearly from 0.
OMEGA_WARMUP = 0.1
LR0 = 0.01
SGD_MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4
BATCH_SIZE = 64
EPOCHS = 30
SEED = 0
SCHEME = "DAC"
MMD_KIND = "EMMD"
# Decaying by default; the literal (1+15p)^{3/4} schedule is lr_exponent=0.75.
LR_EXPONENT = -0.75
LR_FACTOR = 15.0
INIT_FRACTION = 0.05

# Analysis
N_AUG = 50
N_PAIRS = 2000
SPLIT_CLASSIFIER_EPOCHS = 200
SPLIT_CLASSIFIER_LR = 0.1

# Output file names
RESOLVED_CONFIG_FILE = "resolved-config.txt"
METRICS_FILE = "metrics.csv"
MODEL_FILE = "model.txt"
BOUND_REPORT_FILE = "bound-report.csv"
SOURCE_METRICS_FILE = "source-metrics.csv"
ABLATION_FILE = "ablation.csv"
FEATURE_DUMP_TEMPLATE = "features_epoch{epoch}.csv"


def stream_seed(seed: int, name: str) -> int:
    """Derive the seed of a named random sub-stream (data, init, shuffle,
    augment, analysis, ...) from the run seed, so each stream reproduces on
    its own regardless of how much the others consumed."""
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2 ** 63 - 1)


def data_seed(seed: int, domain: str) -> int:
    """Seed for a data generator; numpy RandomState only takes 32-bit seeds."""
    return stream_seed(seed, f"data-{domain}") % 2 ** 32


def make_generator(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(seed, name))
    return gen


@dataclass
class RunConfig:
    """Every flat config key, defaulted from the constants above."""

    # data generation
    data_kind: str = DATA_KIND
    n_samples: int = N_SAMPLES
    noise: float = MOONS_NOISE
    source_rotation: float = SOURCE_ROTATION_DEG
    target_rotation: float = TARGET_ROTATION_DEG
    blob_classes: int = BLOB_CLASSES
    blob_dim: int = BLOB_DIM
    blob_spread: float = BLOB_SPREAD
    target_shift: Tuple[float, ...] = ()

    # augmentation policy
    sigma_weak: float = SIGMA_WEAK
    sigma_strong: float = SIGMA_STRONG
    dropout_prob: float = DROPOUT_PROB
    scale_jitter: float = SCALE_JITTER
    radius_r: float = RADIUS_R

    # model dims (d and C come from the data)
    hidden_dim: int = HIDDEN_DIM
    bottleneck_dim: int = BOTTLENECK_DIM

    # source training
    source_lr: float = SOURCE_LR
    source_epochs: int = SOURCE_EPOCHS
    source_batch_size: int = SOURCE_BATCH_SIZE
    source_momentum: float = SOURCE_MOMENTUM
    source_weight_decay: float = SOURCE_WEIGHT_DECAY
    label_smoothing: float = LABEL_SMOOTHING
    source_holdout: float = SOURCE_HOLDOUT
    source_acc_floor: float = SOURCE_ACC_FLOOR

    # adaptation
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
    scheme: str = SCHEME
    mmd_kind: str = MMD_KIND
    lr_exponent: float = LR_EXPONENT
    lr_factor: float = LR_FACTOR
    lr_drop_epoch: Optional[int] = None
    init_fraction: float = INIT_FRACTION
    renormalize_bank: bool = True
    renormalize_centroids: bool = True
    use_local_structure: bool = True
    use_strong_aug: bool = True

    # analysis
    n_aug: int = N_AUG
    n_pairs: int = N_PAIRS

    # paths (command-line flags take precedence)
    source_model_path: str = ""
    target_csv: str = ""
    output_dir: str = ""

    # outputs
    dump_features: bool = False

    def adapt_config(self):
        # Imported here to avoid a circular import (trainer imports config).
        from losses import MMDKind, Scheme
        from trainer import AdaptConfig

        return AdaptConfig(
            tau_c=self.tau_c, alpha=self.alpha, beta=self.beta, K=self.K, m=self.m,
            tau=self.tau, omega=self.omega, omega_warmup=self.omega_warmup,
            lr0=self.lr0, momentum_sgd=self.momentum_sgd, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
            scheme=Scheme[self.scheme.upper()], mmd_kind=MMDKind[self.mmd_kind.upper()],
            lr_exponent=self.lr_exponent, lr_factor=self.lr_factor,
            lr_drop_epoch=self.lr_drop_epoch, init_fraction=self.init_fraction,
            renormalize_bank=self.renormalize_bank,
            renormalize_centroids=self.renormalize_centroids,
            use_local_structure=self.use_local_structure,
            use_strong_aug=self.use_strong_aug,
        )

    def augment_policy(self):
        from augment import AugmentPolicy

        return AugmentPolicy(
            sigma_weak=self.sigma_weak, sigma_strong=self.sigma_strong,
            dropout_prob=self.dropout_prob, scale_jitter=self.scale_jitter,
            radius_r=self.radius_r,
        )

    def source_train_config(self):
        from model import SourceTrainConfig

        return SourceTrainConfig(
            lr=self.source_lr, epochs=self.source_epochs, batch_size=self.source_batch_size,
            momentum=self.source_momentum, weight_decay=self.source_weight_decay,
            smoothing=self.label_smoothing, holdout_fraction=self.source_holdout,
            acc_floor=self.source_acc_floor, hidden_dim=self.hidden_dim,
            bottleneck_dim=self.bottleneck_dim,
        )


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(raw: str, kind, line: int):
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind == Optional[int]:
            return None if text.lower() in ("", "none") else int(text)
        if kind == Tuple[float, ...]:
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(str(e), line) from e
    raise ConfigError(f"unsupported config type {kind}", line)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def parse_config_text(text: str) -> RunConfig:
    hints = get_type_hints(RunConfig)
    values: Dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key=value, got {stripped!r}", line_no)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in hints:
            raise ConfigError(f"unknown key {key!r}", line_no)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line_no)
        values[key] = _coerce(value, hints[key], line_no)

    config = RunConfig(**values)
    if config.scheme.upper() not in ("DAC", "SCHEME_S", "SCHEME_T", "SELF_ONLY"):
        raise ConfigError(f"unknown scheme {config.scheme!r}")
    if config.mmd_kind.upper() not in ("EMMD", "LMMD", "NONE"):
        raise ConfigError(f"unknown mmd_kind {config.mmd_kind!r}")
    if config.data_kind not in ("moons", "blobs"):
        raise ConfigError(f"unknown data_kind {config.data_kind!r}")
    return config


def load_config(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text)


def format_config(config: RunConfig) -> str:
    lines = [f"{f.name} = {_format(getattr(config, f.name))}" for f in dataclasses.fields(config)]
    return "\n".join(lines) + "\n"


def dump_config(config: RunConfig, path: Path) -> None:
    Path(path).write_text(format_config(config))
    logger.info(f"Resolved config written to {path}")
