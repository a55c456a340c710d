import csv
import itertools
import math
import os
import shutil
import tempfile
import unittest
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from checkpoint import load_checkpoint
from deconver_net import DeconverConfig, NdcLayerConfig, build_network
from errors import ConfigError, DivergenceError, MaskError, ShapeMismatchError, SpatialExtentError
from train_eval import (AdamW, MetricsReport, SegSample, TrainConfig, adamw_step, binarize, cross_entropy,
                        dice_score, evaluate, hd95, kfold_split, lr_schedule, random_patch, sliding_window_predict,
                        soft_dice_ce_loss, soft_dice_loss, surface, synth_dataset, train, warmup_steps,
                        window_offsets)


def tiny_network(seed=0, out_channels=1):
    cfg = DeconverConfig(spatial_rank=2, in_channels=1, out_channels=out_channels, depth=2, base_channels=4,
                         ndc=NdcLayerConfig(kernel=(3, 3)))
    return build_network(cfg, seed=seed, dtype=torch.float64)


def brute_force_hd95(a, b):
    def border(m):
        pts = []
        for i, j in zip(*np.nonzero(m)):
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < m.shape[0] and 0 <= nj < m.shape[1]) or not m[ni, nj]:
                    pts.append((i, j))
                    break
        return np.array(pts, dtype=np.float64)

    pa, pb = border(a), border(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    return max(np.percentile(d.min(axis=1), 95), np.percentile(d.min(axis=0), 95))


# --- LOSS ---

def test_confident_correct_logits_have_near_zero_loss():
    mask = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    mask[..., 1:3, 1:3] = 1.0
    logits = 40.0 * mask - 20.0
    assert float(soft_dice_ce_loss(logits, mask)) < 1e-6


def test_zero_logits():
    mask = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    logits = torch.zeros_like(mask)
    assert float(cross_entropy(logits, mask)) == pytest.approx(math.log(2), rel=1e-12)
    # p = 1/2 everywhere: dice = (2*2 + s) / (2 + 4 + s)
    assert float(soft_dice_loss(logits, mask, smooth=0.0)) == pytest.approx(1 / 3, rel=1e-12)


def test_multiclass_loss_uses_softmax():
    mask = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    mask[0, 0, :2] = 1.0
    mask[0, 1, 2:, :2] = 1.0
    mask[0, 2, 2:, 2:] = 1.0
    assert float(soft_dice_ce_loss(60.0 * mask - 30.0, mask)) < 1e-6
    assert float(cross_entropy(torch.zeros_like(mask), mask)) == pytest.approx(math.log(3), rel=1e-12)


def test_loss_input_validation():
    with pytest.raises(MaskError):
        soft_dice_loss(torch.zeros(1, 1, 2, 2), torch.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ShapeMismatchError):
        soft_dice_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_loss_gradient_exists():
    logits = torch.zeros(2, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    mask = (torch.rand(2, 1, 4, 4, generator=torch.Generator().manual_seed(0)) > 0.5).double()
    soft_dice_ce_loss(logits, mask).backward()
    assert logits.grad is not None and float(logits.grad.abs().sum()) > 0


# --- OPTIMIZER ---

def test_adamw_first_step_moves_by_lr():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    adamw_step(p, torch.tensor([0.5, -3.0], dtype=torch.float64), {}, lr=0.1)
    assert torch.allclose(p, torch.tensor([0.9, -1.9], dtype=torch.float64), atol=1e-7)

    q = torch.tensor([1.0], dtype=torch.float64)
    adamw_step(q, torch.tensor([0.5], dtype=torch.float64), {}, lr=0.1, weight_decay=0.1)
    assert float(q) == pytest.approx(0.99 - 0.1, abs=1e-7)


def test_adamw_matches_torch():
    gen = torch.Generator().manual_seed(0)
    start = torch.randn(5, 3, generator=gen, dtype=torch.float64)
    ours = torch.nn.Parameter(start.clone())
    ref = torch.nn.Parameter(start.clone())
    opt = AdamW([ours], lr=1e-2, weight_decay=1e-2)
    ref_opt = torch.optim.AdamW([ref], lr=1e-2, weight_decay=1e-2, foreach=False)
    for _ in range(5):
        g = torch.randn(5, 3, generator=gen, dtype=torch.float64)
        ours.grad, ref.grad = g.clone(), g.clone()
        opt.step()
        ref_opt.step()
    assert torch.allclose(ours, ref, rtol=1e-12, atol=1e-14)


def test_zero_lr_leaves_parameters_alone():
    p = torch.nn.Parameter(torch.randn(4, dtype=torch.float64))
    before = p.detach().clone()
    opt = AdamW([p], lr=0.0, weight_decay=0.5)
    for _ in range(3):
        p.grad = torch.randn(4, dtype=torch.float64)
        opt.step()
    assert torch.equal(p.detach(), before)


def test_lr_schedule():
    base = 1e-3
    assert warmup_steps(1000, 0.1) == 100
    assert warmup_steps(100, 0.0) == 0
    assert lr_schedule(0, 1000, base, 0.1) == 0.0
    assert lr_schedule(50, 1000, base, 0.1) == pytest.approx(base / 2)
    assert lr_schedule(100, 1000, base, 0.1) == pytest.approx(base)
    assert lr_schedule(101 // 2 + 1, 101, base, 0.01) == pytest.approx(base / 2, rel=1e-2)
    last = lr_schedule(999, 1000, base, 0.1)
    assert 0 < last < base * 1e-4

    lrs = [lr_schedule(t, 1000, base, 0.1) for t in range(1000)]
    jumps = [abs(b - a) for a, b in zip(lrs, lrs[1:])]
    assert max(jumps) <= base / 100 + 1e-15


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    net = tiny_network()
    with pytest.raises(SpatialExtentError):
        TrainConfig(patch=(5, 5)).check_network(net.cfg)


# --- DATA ---

def test_synthetic_data_is_deterministic():
    a = synth_dataset(4, (16, 16), seed=3)
    b = synth_dataset(4, (16, 16), seed=3, max_workers=1)
    for s, t in zip(a, b):
        assert torch.equal(s.image, t.image)
        assert torch.equal(s.mask, t.mask)
    c = synth_dataset(4, (16, 16), seed=4)
    assert not all(torch.equal(s.mask, t.mask) for s, t in zip(a, c))


def test_synthetic_samples_look_like_phantoms():
    for sample in synth_dataset(16, (16, 16), seed=0):
        fraction = float(sample.mask.mean())
        assert 0 < fraction < 0.6
        assert bool((sample.image >= 0).all())
        assert float(sample.image[sample.mask > 0].mean()) > float(sample.image[sample.mask == 0].mean())
    volume = synth_dataset(1, (8, 8, 8), seed=0)[0]
    assert volume.image.shape == (1, 8, 8, 8)


def test_sample_validation():
    with pytest.raises(ShapeMismatchError):
        SegSample(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))
    with pytest.raises(MaskError):
        SegSample(torch.zeros(1, 4, 4), torch.full((1, 4, 4), 0.5))
    with pytest.raises(SpatialExtentError):
        random_patch(SegSample(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4)), (8, 4), np.random.default_rng(0))


def test_kfold_split():
    folds = kfold_split(10, 3, seed=1)
    assert sorted(len(f) for f in folds) == [3, 3, 4]
    assert sorted(i for f in folds for i in f) == list(range(10))
    assert kfold_split(10, 3, seed=1) == folds
    with pytest.raises(ConfigError):
        kfold_split(2, 3)


# --- INFERENCE ---

def test_window_offsets():
    assert window_offsets(6, 4) == [0, 2]
    assert window_offsets(10, 4) == [0, 2, 4, 6]
    assert window_offsets(7, 4) == [0, 2, 3]
    assert window_offsets(4, 4) == [0]
    with pytest.raises(SpatialExtentError):
        window_offsets(3, 4)


def test_single_window_equals_direct_inference():
    net = tiny_network()
    image = torch.rand(1, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        direct = torch.sigmoid(net(image))
    assert torch.allclose(sliding_window_predict(net, image, (8, 8)), direct, rtol=1e-14, atol=0)


def test_overlapping_windows_cover_the_image():
    net = tiny_network()
    probs = sliding_window_predict(net, torch.rand(1, 12, 16, dtype=torch.float64), (8, 8))
    assert probs.shape == (1, 12, 16)
    assert bool(((probs > 0) & (probs < 1)).all())


def test_constant_logits_give_constant_probabilities():
    net = tiny_network()
    c = 0.75
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.fill_(c)
    probs = sliding_window_predict(net, torch.rand(1, 12, 16, dtype=torch.float64), (8, 8))
    expected = torch.sigmoid(torch.tensor(c, dtype=torch.float64))
    assert torch.allclose(probs, expected.expand_as(probs), rtol=1e-14, atol=0)


class WindowLogits(torch.nn.Module):
    """Emits the next logit from a list for every window it is called on."""

    def __init__(self, logits):
        super().__init__()
        self.cfg = SimpleNamespace(out_channels=1)
        self.scale = torch.nn.Parameter(torch.ones((), dtype=torch.float64))
        self.logits = list(logits)
        self.calls = 0

    def forward(self, x):
        value = self.logits[self.calls]
        self.calls += 1
        return torch.full_like(x[:, :1], value) * self.scale


def test_overlap_is_averaged_over_both_windows():
    net = WindowLogits([-1.0, 2.0])
    probs = sliding_window_predict(net, torch.zeros(1, 6, dtype=torch.float64), (4,))
    assert net.calls == 2
    first, second = torch.sigmoid(torch.tensor([-1.0, 2.0], dtype=torch.float64))
    expected = torch.stack([first, first, (first + second) / 2, (first + second) / 2, second, second])
    assert torch.allclose(probs[0], expected, rtol=1e-15, atol=0)


def test_binarize():
    probs = torch.tensor([[[0.2, 0.5, 0.7]]])
    assert binarize(probs).tolist() == [[[0.0, 0.0, 1.0]]]
    multi = torch.tensor([[[0.6, 0.1]], [[0.3, 0.2]], [[0.1, 0.7]]])
    assert binarize(multi).tolist() == [[[1.0, 0.0]], [[0.0, 0.0]], [[0.0, 1.0]]]


# --- METRICS ---

def test_dice_matches_definition_on_every_3x3_pair():
    masks = [np.array([(bits >> k) & 1 for k in range(9)], dtype=np.uint8).reshape(3, 3) for bits in range(512)]
    sizes = [int(m.sum()) for m in masks]
    for (i, a), (j, b) in itertools.product(enumerate(masks), repeat=2):
        total = sizes[i] + sizes[j]
        expected = 1.0 if total == 0 else 2.0 * int((a & b).sum()) / total
        assert dice_score(a, b) == expected


def test_dice_examples():
    a = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    b = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    assert dice_score(a, b) == pytest.approx(2 / 3)
    assert dice_score(a, b) == dice_score(b, a)
    assert dice_score(torch.zeros(2, 2), torch.zeros(2, 2)) == 1.0
    with pytest.raises(MaskError):
        dice_score(torch.full((2, 2), 0.3), a)


def test_surface():
    block = np.zeros((5, 5), dtype=bool)
    block[1:4, 1:4] = True
    assert int(surface(block).sum()) == 8
    assert not surface(block)[2, 2]
    # the centre of a full 3x3 array has four foreground face neighbours
    full = surface(np.ones((3, 3), dtype=bool))
    assert int(full.sum()) == 8
    assert not full[1, 1]
    line = np.zeros((4, 4), dtype=bool)
    line[1, :] = True
    assert np.array_equal(surface(line), line)


def test_hd95_examples():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hd95(a, b) == pytest.approx(5.0)
    assert hd95(a, b, spacing=(2.0, 1.0)) == pytest.approx(math.sqrt(52.0))
    assert hd95(a, a) == 0.0
    assert hd95(np.zeros_like(a), np.zeros_like(a)) == 0.0
    assert hd95(a, np.zeros_like(a)) is None
    assert hd95(np.zeros_like(a), b) is None


def test_hd95_rejects_bad_spacing():
    a = np.zeros((8, 8), dtype=np.uint8)
    a[2, 2] = 1
    with pytest.raises(ConfigError):
        hd95(a, a, spacing=(1.0, 1.0, 1.0))
    with pytest.raises(ConfigError):
        hd95(np.zeros_like(a), np.zeros_like(a), spacing=(1.0,))
    with pytest.raises(ConfigError):
        hd95(a, a, spacing=(1.0, 0.0))


@pytest.mark.parametrize("seed", range(50))
def test_hd95_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((8, 8)) < 0.3
    b = rng.random((8, 8)) < 0.3
    a[rng.integers(8), rng.integers(8)] = True
    b[rng.integers(8), rng.integers(8)] = True
    expected = brute_force_hd95(a, b)
    assert hd95(a.astype(np.uint8), b.astype(np.uint8)) == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert hd95(a.astype(np.uint8), b.astype(np.uint8)) == hd95(b.astype(np.uint8), a.astype(np.uint8))


def test_evaluate_keeps_sample_order():
    gts = [torch.zeros(1, 4, 4) for _ in range(6)]
    preds = []
    for i, gt in enumerate(gts):
        gt[0, :2, :2] = 1.0
        pred = torch.zeros(1, 4, 4)
        pred[0, :2, :i % 3] = 1.0
        preds.append(pred)
    report = evaluate(preds, gts, max_workers=3)
    assert [r[0] for r in report.rows] == list(range(6))
    assert [r[2] for r in report.rows] == [dice_score(p[0], g[0]) for p, g in zip(preds, gts)]
    with pytest.raises(ShapeMismatchError):
        evaluate(preds[:2], gts[:3])
    with pytest.raises(ConfigError):
        evaluate(preds, gts, spacing=(1.0, 1.0, 1.0))


class MetricsReportTest(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_undefined_hd95_is_written_as_na(self):
        report = MetricsReport([(0, 0, 1.0, 0.0), (1, 0, 0.0, None), (2, 0, 0.5, 3.0)])
        self.assertEqual(report.mean_hd95, 1.5)
        self.assertEqual(report.mean_dsc, 0.5)
        path = os.path.join(self.test_dir, "metrics.csv")
        report.to_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["sample", "class", "dsc", "hd95"])
        self.assertEqual(rows[2], ["1", "0", "0.0", "NA"])

    def test_all_undefined(self):
        self.assertIsNone(MetricsReport([(0, 0, 0.0, None)]).mean_hd95)

    def test_per_class_means(self):
        report = MetricsReport([(0, 0, 1.0, 0.0), (0, 1, 0.5, 2.0), (1, 0, 0.5, 1.0), (1, 1, 0.0, None)])
        self.assertEqual(report.per_class(), {0: 0.75, 1: 0.25})


# --- TRAINING ---

class TrainTest(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.dataset = synth_dataset(4, (8, 8), seed=0, dtype=torch.float64)

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_training_is_deterministic(self):
        cfg = TrainConfig(steps=3, batch_size=2, lr=1e-3, seed=1)
        runs = [os.path.join(self.test_dir, name) for name in ("a", "b")]
        first = train(tiny_network(), self.dataset, cfg, out_dir=runs[0], quiet=True)
        second = train(tiny_network(), self.dataset, cfg, out_dir=runs[1], quiet=True)
        self.assertEqual(first.log, second.log)
        self.assertEqual(first.final_dice_loss, second.final_dice_loss)
        for name in ("best.dcvw", "final.dcvw"):
            blobs = []
            for run in runs:
                with open(os.path.join(run, name), "rb") as f:
                    blobs.append(f.read())
            self.assertEqual(blobs[0], blobs[1], name)

    def test_outputs_are_written(self):
        cfg = TrainConfig(steps=4, batch_size=2, lr=1e-3, patch=(4, 4))
        result = train(tiny_network(), self.dataset, cfg, out_dir=self.test_dir, quiet=True)
        with open(os.path.join(self.test_dir, "train_log.csv"), newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["step", "lr", "loss"])
        self.assertEqual(len(rows), 5)
        _, meta = load_checkpoint(os.path.join(self.test_dir, "best.dcvw"))
        self.assertEqual(meta["step"], result.best_step)
        final, meta = load_checkpoint(os.path.join(self.test_dir, "final.dcvw"))
        self.assertEqual(meta["step"], 3)
        self.assertEqual(final.cfg.depth, 2)

    def test_zero_lr_keeps_weights(self):
        net = tiny_network()
        before = {n: p.detach().clone() for n, p in net.named_parameters()}
        train(net, self.dataset, TrainConfig(steps=2, batch_size=2, lr=0.0), quiet=True)
        for n, p in net.named_parameters():
            self.assertTrue(torch.equal(p.detach(), before[n]), n)

    def test_non_finite_loss_raises(self):
        image = torch.full((1, 8, 8), float("nan"), dtype=torch.float64)
        broken = [SegSample(image, torch.zeros(1, 8, 8, dtype=torch.float64))]
        with self.assertRaises(DivergenceError):
            train(tiny_network(), broken, TrainConfig(steps=2, batch_size=1), quiet=True)
