import numpy as np
import pytest
import torch

from actseq import numerics as nx
from actseq.errors import ConfigError, FormatError, ShapeError
from actseq.segmenter import (FrameProbs, Segmenter, SegmenterConfig, boundary_pos_weight,
                              boundary_refine, boundary_targets, detect_boundaries, load_segmenter,
                              median_frequency_weights, predict_probs, save_segmenter,
                              segmenter_loss, smooth_refine, train_segmenter)
from actseq.training import TrainConfig


def probs_from(rows):
    return FrameProbs(np.asarray(rows, dtype=np.float64))


def test_smooth_refine_hand():
    # an isolated flicker at frame 2 disappears under a 3-frame window
    p = probs_from([[0.9, 0.1], [0.8, 0.2], [0.4, 0.6], [0.7, 0.3], [0.9, 0.1]])
    assert p.argmax().tolist() == [0, 0, 1, 0, 0]
    assert smooth_refine(p, 3).labels.tolist() == [0, 0, 0, 0, 0]
    assert smooth_refine(p, 1).labels.tolist() == [0, 0, 1, 0, 0]
    with pytest.raises(ConfigError):
        smooth_refine(p, 4)


def test_smooth_refine_edges_average_existing_frames():
    p = probs_from([[0.0, 1.0], [0.9, 0.1], [0.9, 0.1]])
    # frame 0 averages frames 0 and 1 only: (0.45, 0.55)
    assert smooth_refine(p, 3).labels.tolist() == [1, 0, 0]


def test_detect_boundaries_nms():
    b = np.array([0.9, 0.2, 0.7, 0.8, 0.6, 0.1, 0.1, 0.6, 0.6, 0.2])
    # frame 0 never starts a segment; frame 3 beats 2 and 4; 7 and 8 tie -> 7
    assert detect_boundaries(b, 0.5, radius=2) == [3, 7]
    assert detect_boundaries(b, 0.65, radius=2) == [3]


def test_boundary_refine_pools_between_boundaries():
    probs = [[0.6, 0.4], [0.4, 0.6], [0.7, 0.3], [0.1, 0.9], [0.3, 0.7], [0.6, 0.4]]
    p = FrameProbs(np.array(probs), np.array([0, 0, 0, 0.9, 0, 0]))
    assert boundary_refine(p, 0.5, radius=1).labels.tolist() == [0, 0, 0, 1, 1, 1]
    with pytest.raises(ConfigError):
        boundary_refine(probs_from(probs))


def test_boundary_targets_and_weights():
    labels = np.array([0, 0, 0, 1, 1, 1, 1])
    assert boundary_targets(labels, 1).tolist() == [0, 0, 1, 1, 1, 0, 0]
    assert boundary_pos_weight([labels], 1) == pytest.approx(4 / 3)
    # frequencies 3/7, 4/7 -> median 0.5
    w = median_frequency_weights([labels], 3)
    assert w == pytest.approx([0.5 / (3 / 7), 0.5 / (4 / 7), 1.0])


def test_frame_probs_csv_round_trip():
    rng = np.random.default_rng(0)
    p = FrameProbs(rng.dirichlet(np.ones(3), size=5), rng.uniform(size=5))
    back = FrameProbs.from_csv(p.to_csv(), 3)
    assert np.array_equal(back.probs, p.probs) and np.array_equal(back.boundary, p.boundary)
    with pytest.raises(FormatError):
        FrameProbs.from_csv("0.1,0.2\n", 5)


def tiny_config(**kw):
    base = dict(input_dim=3, num_classes=3, stages=2, layers_per_stage=2, channels=4,
                dropout=0.0, boundary_head=True, boundary_lambda=0.3,
                class_weights=[1.0, 2.0, 0.5], boundary_pos_weight=2.0)
    base.update(kw)
    return SegmenterConfig(**base)


def test_segmenter_loss_gradient_check():
    cfg = tiny_config()
    model = Segmenter(cfg, seed=3)
    rng = np.random.default_rng(2)
    x = nx.as_tensor(rng.normal(size=(2, 3, 8)))
    mask = torch.ones(2, 8, dtype=nx.DTYPE)
    mask[1, 6:] = 0
    y = torch.tensor([[0, 0, 1, 1, 1, 2, 2, 2], [2, 2, 2, 0, 0, 1, -100, -100]])
    bt = torch.as_tensor(np.stack([boundary_targets(np.r_[0, 0, 1, 1, 1, 2, 2, 2], 1),
                                   boundary_targets(np.r_[2, 2, 2, 0, 0, 1, 1, 1], 1)]))

    def loss():
        logits, bnd = model(x, mask)
        return segmenter_loss(logits, y, cfg, bnd, bt, mask)

    params = list(model.parameters())
    assert nx.gradient_check(loss, params) < 1e-4


def test_forward_shapes_and_errors():
    model = Segmenter(tiny_config(), seed=0)
    logits, bnd = model(torch.zeros(1, 3, 10, dtype=nx.DTYPE))
    assert len(logits) == 2 and logits[0].shape == (1, 3, 10) and bnd.shape == (1, 10)
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 4, 10, dtype=nx.DTYPE))
    probs = predict_probs(model, [np.zeros((7, 3)), np.ones((4, 3))])
    assert [len(p) for p in probs] == [7, 4]
    for p in probs:
        np.testing.assert_allclose(p.probs.sum(axis=1), 1.0, atol=1e-12)


def test_padding_does_not_change_predictions():
    model = Segmenter(tiny_config(), seed=1)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(9, 3)), rng.normal(size=(5, 3))
    together = predict_probs(model, [a, b])
    alone = predict_probs(model, [b])
    np.testing.assert_allclose(together[1].probs, alone[0].probs, atol=1e-12)


def _toy_data(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        labels = np.repeat(rng.permutation(3), rng.integers(4, 9, size=3))
        x = np.eye(3)[labels] + 0.1 * rng.normal(size=(labels.size, 3))
        out.append((x, labels))
    return out


def test_training_is_deterministic_and_selects_best(tmp_path):
    data = _toy_data(6, 0)
    cfg = tiny_config(class_weights=None, boundary_pos_weight=None)
    tc = TrainConfig(epochs=4, lr=5e-3, batch_size=3)
    m1, log1 = train_segmenter(data[:4], data[4:], cfg, tc, seed=7)
    m2, log2 = train_segmenter(data[:4], data[4:], cfg, tc, seed=7)
    assert log1.to_dict() == log2.to_dict()
    best = log1.entries[log1.best_epoch]["val_aer"]
    assert best <= log1.entries[-1]["val_aer"]
    assert best == min(e["val_aer"] for e in log1.entries)
    save_segmenter(tmp_path / "seg.json", m1)
    m3 = load_segmenter(tmp_path / "seg.json")
    x = data[0][0]
    assert np.array_equal(predict_probs(m1, [x])[0].probs, predict_probs(m3, [x])[0].probs)
    with pytest.raises(ConfigError):
        train_segmenter([], None, cfg, tc)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(kernel_size=4)
    with pytest.raises(ConfigError):
        tiny_config(class_weights=[1.0])
    with pytest.raises(ConfigError):
        SegmenterConfig.from_dict({"input_dim": 1, "num_classes": 2, "nope": 0})
