"""
Centroid pseudo-labels, refreshed once per epoch: probability-weighted
centroids from the current model, nearest-centroid (cosine) labels, one
refinement of the centroids as class means, and a final relabel.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from data import Dataset
from errors import InvalidArgumentError
from model import ModelParams, predict_all


@dataclass
class PseudoLabelState:
    centroids: torch.Tensor
    labels: torch.Tensor
    epoch: int = 0


def init_centroids(probs: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """c_k = sum_i p_i[k] f_i / sum_i p_i[k]; a class with zero total mass
    falls back to the global feature mean."""
    if probs.dim() != 2 or feats.dim() != 2 or probs.shape[0] != feats.shape[0]:
        raise InvalidArgumentError(f"shape mismatch: probs {tuple(probs.shape)}, feats {tuple(feats.shape)}")
    mass = probs.sum(dim=0)
    weighted = probs.T @ feats
    centroids = weighted / mass.clamp_min(torch.finfo(feats.dtype).tiny).unsqueeze(1)
    empty = mass <= 0
    if empty.any():
        centroids[empty] = feats.mean(dim=0)
    return centroids


def assign_labels(feats: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """argmax_k cos(f_i, c_k), lowest index on ties. Zero centroid rows can
    never win."""
    norms = centroids.norm(dim=1)
    dead = norms == 0
    if dead.all():
        raise InvalidArgumentError("every centroid row is zero")
    cosine = F.normalize(feats, dim=1) @ F.normalize(centroids, dim=1).T
    cosine[:, dead] = float("-inf")
    return cosine.argmax(dim=1)


def refine_centroids(feats: torch.Tensor, labels: torch.Tensor, previous: torch.Tensor) -> torch.Tensor:
    """Class-conditional means; a class with no members keeps its previous row."""
    num_classes = previous.shape[0]
    one_hot = F.one_hot(labels, num_classes).to(feats.dtype)
    counts = one_hot.sum(dim=0)
    centroids = previous.clone()
    filled = counts > 0
    centroids[filled] = (one_hot.T @ feats)[filled] / counts[filled].unsqueeze(1)
    return centroids


def pseudo_labels_from_outputs(probs: torch.Tensor, feats: torch.Tensor,
                               prev_state: Optional[PseudoLabelState] = None) -> PseudoLabelState:
    centroids = init_centroids(probs, feats)
    labels = assign_labels(feats, centroids)
    centroids = refine_centroids(feats, labels, centroids)
    labels = assign_labels(feats, centroids)
    epoch = 0 if prev_state is None else prev_state.epoch + 1
    return PseudoLabelState(centroids=centroids, labels=labels, epoch=epoch)


def update_pseudo_labels(params: ModelParams, dataset: Dataset,
                         prev_state: Optional[PseudoLabelState] = None) -> PseudoLabelState:
    probs, feats = predict_all(params, dataset)
    return pseudo_labels_from_outputs(probs, feats, prev_state)
