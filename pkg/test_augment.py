#!/usr/bin/env python3
"""
Tests for the weak / strong views and the transformation ball
"""

import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from augment import AugmentPolicy, ball_points, l1_ball_offsets, sample_ball, strong_aug, weak_aug
from config import make_generator
from errors import InvalidArgumentError

ZERO_POLICY = AugmentPolicy(sigma_weak=0.0, sigma_strong=0.0, dropout_prob=0.0, scale_jitter=0.0, radius_r=0.0)


def _batch(n=32, d=3):
    return torch.randn((n, d), generator=make_generator(0, "test-batch"), dtype=torch.float64)


def test_zero_policy_is_identity():
    """Test that a zero policy leaves inputs untouched in every view"""
    x = _batch()
    gen = make_generator(0, "augment")
    assert torch.equal(weak_aug(x, ZERO_POLICY, gen), x)
    assert torch.equal(strong_aug(x, ZERO_POLICY, gen), x)
    assert torch.equal(ball_points(x, ZERO_POLICY, gen), x)


def test_single_vector_keeps_its_shape():
    """Test that a (d,) input comes back as (d,)"""
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    gen = make_generator(1, "augment")
    policy = AugmentPolicy()
    assert weak_aug(x, policy, gen).shape == (3,)
    assert strong_aug(x, policy, gen).shape == (3,)


def test_full_dropout_zeroes_the_strong_view():
    """Test that dropout probability 1 drops every coordinate"""
    x = _batch()
    policy = AugmentPolicy(dropout_prob=1.0)
    out = strong_aug(x, policy, make_generator(0, "augment"))
    assert torch.all(out == 0)


def test_weak_noise_scale():
    """Test that the weak view adds noise with the configured std"""
    x = torch.zeros((20000, 2), dtype=torch.float64)
    out = weak_aug(x, AugmentPolicy(sigma_weak=0.05), make_generator(0, "augment"))
    assert abs(out.std().item() - 0.05) < 0.005


def test_strong_scale_jitter_bounds():
    """Test that without noise or dropout the strong view only rescales rows within the jitter"""
    x = torch.ones((500, 2), dtype=torch.float64)
    policy = AugmentPolicy(sigma_weak=0.0, sigma_strong=0.0, dropout_prob=0.0, scale_jitter=0.1)
    out = strong_aug(x, policy, make_generator(0, "augment"))
    assert torch.all(out >= 0.9 - 1e-12) and torch.all(out <= 1.1 + 1e-12)
    assert torch.equal(out[:, 0], out[:, 1])


def test_l1_offsets_stay_inside_the_ball():
    """Test that every offset has L1 norm at most the radius"""
    offsets = l1_ball_offsets((5000, 4), 0.5, make_generator(0, "augment"))
    norms = offsets.abs().sum(dim=1)
    assert torch.all(norms <= 0.5 + 1e-12)
    assert norms.max().item() > 0.4


def test_sample_ball_shape_and_radius():
    """Test that sample_ball returns count points around a zero-noise view"""
    x = torch.tensor([0.3, -0.7], dtype=torch.float64)
    policy = AugmentPolicy(sigma_weak=0.0, sigma_strong=0.0, dropout_prob=0.0, scale_jitter=0.0, radius_r=0.2)
    points = sample_ball(x, policy, make_generator(0, "augment"), 100)
    assert points.shape == (100, 2)
    assert torch.all((points - x).abs().sum(dim=1) <= 0.2 + 1e-12)


def test_sample_ball_rejects_batches():
    """Test that sample_ball takes a single vector and a positive count"""
    with pytest.raises(InvalidArgumentError):
        sample_ball(_batch(), AugmentPolicy(), make_generator(0, "augment"), 5)
    with pytest.raises(InvalidArgumentError):
        sample_ball(torch.zeros(2, dtype=torch.float64), AugmentPolicy(), make_generator(0, "augment"), 0)


def test_same_generator_state_reproduces_views():
    """Test that augmentation only depends on the generator passed in"""
    x = _batch()
    a = strong_aug(x, AugmentPolicy(), make_generator(7, "augment"))
    b = strong_aug(x, AugmentPolicy(), make_generator(7, "augment"))
    assert torch.equal(a, b)


def test_policy_validation():
    """Test that inconsistent policies are rejected"""
    with pytest.raises(InvalidArgumentError):
        AugmentPolicy(sigma_weak=0.2, sigma_strong=0.1)
    with pytest.raises(InvalidArgumentError):
        AugmentPolicy(dropout_prob=1.5)
    with pytest.raises(InvalidArgumentError):
        AugmentPolicy(radius_r=-0.1)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
