#!/usr/bin/env python3
"""
Tests for the model: forward pass, label smoothing, source training and the model file
"""

import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import make_generator
from data import Dataset, gen_gauss_blobs, gen_two_moons
from errors import InvalidArgumentError, ParseError, TrainingError
from model import (
    DTYPE, ModelDims, ModelParams, SourceTrainConfig, forward, label_smoothing_loss, load_model,
    predict_all, save_model, smoothed_targets, train_source, train_source_with_report,
)

DIMS = ModelDims(d=2, h=16, b=8, C=3)


def test_forward_invariants():
    """Test unit-norm features and normalized probabilities"""
    params = ModelParams(DIMS, seed=0)
    x = torch.randn((50, 2), generator=make_generator(0, "test"), dtype=DTYPE)
    out = forward(params, x)
    assert out.feat.shape == (50, 8)
    assert out.logits.shape == (50, 3)
    torch.testing.assert_close(out.feat.norm(dim=1), torch.ones(50, dtype=DTYPE), atol=1e-9, rtol=0)
    torch.testing.assert_close(out.probs.sum(dim=1), torch.ones(50, dtype=DTYPE), atol=1e-9, rtol=0)
    assert torch.all(out.probs >= 0) and torch.all(out.probs <= 1)


def test_zero_classifier_gives_uniform_probs():
    """Test that zero classifier weights predict 1/C everywhere, class 0 on ties"""
    params = ModelParams(DIMS, seed=0)
    with torch.no_grad():
        params.classifier.weight.zero_()
    out = forward(params, torch.ones((4, 2), dtype=DTYPE))
    torch.testing.assert_close(out.probs, torch.full((4, 3), 1 / 3, dtype=DTYPE))
    assert out.predictions.tolist() == [0, 0, 0, 0]


def test_forward_rejects_wrong_dimension():
    """Test that a batch with the wrong feature count is rejected"""
    params = ModelParams(DIMS, seed=0)
    with pytest.raises(InvalidArgumentError):
        forward(params, torch.zeros((4, 3), dtype=DTYPE))
    with pytest.raises(InvalidArgumentError):
        forward(params, torch.zeros((0, 2), dtype=DTYPE))


def test_same_seed_same_init():
    """Test that initialization depends only on the seed"""
    a = ModelParams(DIMS, seed=4)
    b = ModelParams(DIMS, seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_smoothed_targets():
    """Test eps/C off-class and 1 - eps + eps/C on-class"""
    targets = smoothed_targets(torch.tensor([1]), 4, 0.1)
    torch.testing.assert_close(targets, torch.tensor([[0.025, 0.925, 0.025, 0.025]], dtype=DTYPE))


def test_label_smoothing_loss_at_uniform_logits():
    """Test that equal logits give log C for any smoothing"""
    logits = torch.zeros((5, 3), dtype=DTYPE)
    loss = label_smoothing_loss(logits, torch.tensor([0, 1, 2, 0, 1]), 0.1)
    assert abs(loss.item() - torch.log(torch.tensor(3.0, dtype=DTYPE)).item()) < 1e-12


def test_source_training_separates_blobs():
    """Test that source training reaches the holdout floor on easy blobs"""
    ds = gen_gauss_blobs(300, 3, 2, None, 0.3, seed=0)
    config = SourceTrainConfig(epochs=30, hidden_dim=16, bottleneck_dim=8)
    result = train_source_with_report(config, ds, seed=0)
    assert result.holdout_acc >= 0.95
    assert result.epochs == 30
    probs, feats = predict_all(result.params, ds)
    assert probs.shape == (300, 3) and feats.shape == (300, 8)


def test_source_training_is_deterministic():
    """Test that two trainings with the same seed give identical weights"""
    ds = gen_two_moons(200, 0.1, 0.0, seed=0)
    config = SourceTrainConfig(epochs=3, acc_floor=0.0, hidden_dim=8, bottleneck_dim=4)
    a = train_source(config, ds, seed=1)
    b = train_source(config, ds, seed=1)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_source_training_floor_raises():
    """Test that missing the accuracy floor is a training error"""
    ds = gen_two_moons(100, 0.1, 0.0, seed=0)
    config = SourceTrainConfig(epochs=0, acc_floor=1.01)
    with pytest.raises(TrainingError):
        train_source(config, ds, seed=0)


def test_source_training_needs_labels():
    """Test that an unlabeled dataset is rejected"""
    ds = gen_two_moons(100, 0.1, 0.0, seed=0).without_labels()
    with pytest.raises(InvalidArgumentError):
        train_source(SourceTrainConfig(), ds, seed=0)


def test_predict_all_matches_per_row_forward():
    """Test chunked prediction against one forward pass per row"""
    params = ModelParams(DIMS, seed=1)
    ds = gen_gauss_blobs(30, 3, 2, None, 0.5, seed=4)
    probs, feats = predict_all(params, ds, batch_size=7)
    assert probs.shape == (30, 3) and feats.shape == (30, 8)
    for i in range(ds.n):
        out = forward(params, ds.tensor()[i:i + 1])
        torch.testing.assert_close(probs[i], out.probs[0])
        torch.testing.assert_close(feats[i], out.feat[0])


def test_predict_all_follows_row_order():
    """Test that permuting the rows permutes the outputs, including n = 1"""
    params = ModelParams(DIMS, seed=1)
    ds = gen_gauss_blobs(30, 3, 2, None, 0.5, seed=4)
    order = torch.randperm(30, generator=make_generator(0, "test-order"))
    shuffled = Dataset(ds.features[order.numpy()], ds.labels[order.numpy()], ds.domain_tag, num_classes=3)
    probs, feats = predict_all(params, ds)
    probs_p, feats_p = predict_all(params, shuffled)
    torch.testing.assert_close(probs_p, probs[order])
    torch.testing.assert_close(feats_p, feats[order])

    single = Dataset(ds.features[:1], None, ds.domain_tag)
    probs_1, feats_1 = predict_all(params, single)
    assert probs_1.shape == (1, 3)
    torch.testing.assert_close(probs_1[0], probs[0])
    torch.testing.assert_close(feats_1[0], feats[0])


def test_model_file_round_trip(tmp_path):
    """Test that a saved model loads back with identical weights and bytes"""
    params = ModelParams(ModelDims(d=3, h=5, b=4, C=2), seed=2)
    path = tmp_path / "model.txt"
    save_model(params, path)
    loaded = load_model(path)
    assert loaded.dims == params.dims
    for pa, pb in zip(params.parameters(), loaded.parameters()):
        assert torch.equal(pa, pb)
    again = tmp_path / "again.txt"
    save_model(loaded, again)
    assert again.read_bytes() == path.read_bytes()
    lines = path.read_text().splitlines()
    assert lines[0] == "3 5 4 2"
    assert [len(line.split()) for line in lines[1:]] == [15, 5, 20, 4, 8]


def test_model_file_errors(tmp_path):
    """Test parse errors for a bad header and a short tensor line"""
    path = tmp_path / "model.txt"
    path.write_text("3 5 x 2\n")
    with pytest.raises(ParseError) as info:
        load_model(path)
    assert info.value.row == 0

    save_model(ModelParams(ModelDims(d=1, h=2, b=2, C=2)), path)
    lines = path.read_text().splitlines()
    lines[3] = "1.0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        load_model(path)
    assert info.value.row == 3


def test_model_file_trailing_content(tmp_path):
    """Test that extra non-blank lines after the tensors are rejected"""
    path = tmp_path / "model.txt"
    save_model(ModelParams(ModelDims(d=1, h=2, b=2, C=2)), path)
    with path.open("a") as f:
        f.write("\n0.5 0.5\n")
    with pytest.raises(ParseError) as info:
        load_model(path)
    assert info.value.row == 7


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
