import math

import numpy as np
import pytest

from roadforge import autodiff as ad
from roadforge.dataset import LoadedRecord
from roadforge.graph import RoadGraph
from roadforge.model import GGT, GGTConfig, MLPBaseline
from roadforge.ordering import CanonicalSequence, canonicalize, to_sequence
from roadforge.training import (
    Adam,
    LengthMismatch,
    TrainConfig,
    adam_step,
    mlp_loss,
    mlp_targets,
    sequence_loss,
    train,
)


def tiny_cfg(**kw) -> GGTConfig:
    base = dict(frontier=3, blocks=1, width=16, heads=2, mlp_inner=16, head_hidden=8, ca_hidden=16)
    base.update(kw)
    return GGTConfig(**base)


def make_record(rng, frontier=3) -> LoadedRecord:
    from roadforge.raster import rasterize

    pts = np.array([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]) + rng.uniform(-0.1, 0.1, (4, 2))
    g = canonicalize(RoadGraph(np.round(pts, 6), [(0, 1), (1, 2), (2, 3), (0, 3)]))
    seq = to_sequence(g, frontier)
    return LoadedRecord("r", "train", g, rasterize(g), seq)


class TestSequenceLoss:
    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(0)
        rec = make_record(rng)
        adj = ad.Tensor(rec.seq.adjacency_with_stop())
        coords = ad.Tensor(rec.seq.coords)
        loss, bce_part, mse_part = sequence_loss(adj, coords, rec.seq, 0.5)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-10)
        assert bce_part == pytest.approx(0.0, abs=1e-10)
        assert mse_part == 0.0

    def test_half_probability_single_entry(self):
        # one step, adjacency width 2 (M=1 plus stop), target (1, 0), pred (0.5, 0.5)
        target = CanonicalSequence(np.array([[1.0]]), np.zeros((1, 2)), np.array([0.0]), 1)
        adj = ad.Tensor(np.array([[0.5, 0.5]]))
        coords = ad.Tensor(np.zeros((1, 2)))
        loss, bce_part, mse_part = sequence_loss(adj, coords, target, 1.0)
        assert bce_part == pytest.approx(math.log(2), abs=1e-12)
        assert float(loss.data) == pytest.approx(0.693147, abs=1e-6)
        assert mse_part == 0.0

    def test_convex_blend(self):
        rng = np.random.default_rng(1)
        rec = make_record(rng)
        adj = ad.Tensor(np.clip(rec.seq.adjacency_with_stop(), 0.2, 0.8))
        coords = ad.Tensor(rec.seq.coords + 0.1)
        for lam in (0.0, 0.3, 0.5, 1.0):
            loss, bce_part, mse_part = sequence_loss(adj, coords, rec.seq, lam)
            assert float(loss.data) == pytest.approx(lam * bce_part + (1 - lam) * mse_part, rel=1e-12)

    def test_mse_normalization_per_step(self):
        # one node step + stop step: coords off by (0.3, 0.4) on one step only
        target = CanonicalSequence(np.zeros((2, 1)), np.zeros((2, 2)), np.array([0.0, 1.0]), 1)
        pred_adj = ad.Tensor(target.adjacency_with_stop())
        coords = np.zeros((2, 2))
        coords[0] = (0.3, 0.4)
        _, _, mse_part = sequence_loss(pred_adj, ad.Tensor(coords), target, 0.5)
        assert mse_part == pytest.approx(0.25 / (2 * 2))  # ||d||^2 / (2N), N=2

    def test_length_mismatch(self):
        target = CanonicalSequence(np.zeros((2, 1)), np.zeros((2, 2)), np.array([0, 1.0]), 1)
        with pytest.raises(LengthMismatch):
            sequence_loss(ad.Tensor(np.zeros((3, 2))), ad.Tensor(np.zeros((3, 2))), target, 0.5)

    def test_lam_one_ignores_coords(self):
        rng = np.random.default_rng(2)
        rec = make_record(rng)
        adj = ad.Tensor(np.clip(rec.seq.adjacency_with_stop(), 0.3, 0.7))
        l1, _, _ = sequence_loss(adj, ad.Tensor(rec.seq.coords), rec.seq, 1.0)
        l2, _, _ = sequence_loss(adj, ad.Tensor(rec.seq.coords + 5.0), rec.seq, 1.0)
        assert float(l1.data) == float(l2.data)


class TestMlpLoss:
    def test_targets_shapes(self):
        rng = np.random.default_rng(0)
        rec = make_record(rng)
        upper, X = mlp_targets(rec.seq)
        assert upper.shape == (45,)
        assert X.shape == (10, 2)
        assert upper.sum() == rec.graph.n_edges

    def test_perfect_is_zero(self):
        rng = np.random.default_rng(1)
        rec = make_record(rng)
        upper, X = mlp_targets(rec.seq)
        loss, bce_part, mse_part = mlp_loss(ad.Tensor(upper), ad.Tensor(X), rec.seq, 0.5)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-10)


class TestAdam:
    def test_first_step_magnitude_close_to_lr(self):
        cfg = TrainConfig(lr=4e-4, weight_decay=0.0)
        p = ad.Parameter(np.zeros(5))
        p.grad = np.ones(5)
        adam_step({"p": p}, cfg, t=1)
        assert np.allclose(np.abs(p.data), cfg.lr, rtol=1e-6)

    def test_zero_grads_no_decay_unchanged(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = ad.Parameter(np.full(3, 1.5))
        p.grad = np.zeros(3)
        adam_step({"p": p}, cfg, t=1)
        assert np.array_equal(p.data, np.full(3, 1.5))

    def test_decoupled_weight_decay_shrinks_before_update(self):
        cfg = TrainConfig(lr=0.01, weight_decay=0.1)
        p = ad.Parameter(np.full(2, 2.0))
        p.grad = np.zeros(2)
        adam_step({"p": p}, cfg, t=1)
        assert np.allclose(p.data, 2.0 * (1 - 0.01 * 0.1))

    def test_convex_quadratic_descends(self):
        target = np.array([1.0, -2.0, 0.5])
        p = ad.Parameter(np.zeros(3))
        cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
        opt = Adam({"p": p}, cfg)
        values = []
        for _ in range(100):
            opt.zero_grad()
            loss = ad.sse_sum(p, target)
            ad.backward(loss)
            values.append(float(loss.data))
            opt.step()
        # monotone after a short warmup
        tail = values[5:]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
        assert values[-1] < values[0]

    def test_two_identical_runs_identical(self):
        def run():
            p = ad.Parameter(np.array([1.0, 2.0]))
            opt = Adam({"p": p}, TrainConfig(lr=0.01))
            for _ in range(20):
                opt.zero_grad()
                ad.backward(ad.sse_sum(ad.tanh(p), np.array([0.3, -0.4])))
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())


class TestTrainLoop:
    def _samples(self, n=6):
        rng = np.random.default_rng(0)
        return [make_record(rng) for _ in range(n)]

    def test_deterministic_report(self):
        samples = self._samples()
        cfg = TrainConfig(epochs=2, batch_size=3, seed=1, val_subsample=2, sm_max_iter=200)

        def run():
            model = GGT(tiny_cfg(), seed=1)
            return train(model, samples, samples[:2], cfg)

        r1, r2 = run(), run()
        assert [e.to_dict() for e in r1.epochs] == [e.to_dict() for e in r2.epochs]

    def test_best_epoch_is_argmin(self):
        samples = self._samples()
        cfg = TrainConfig(epochs=3, batch_size=3, seed=0, val_subsample=3, sm_max_iter=200)
        model = GGT(tiny_cfg(), seed=0)
        report = train(model, samples, samples[:3], cfg)
        sms = [e.val_sm for e in report.epochs]
        assert report.best_epoch == int(np.argmin(sms))
        assert report.best_val_sm == min(sms)

    def test_loss_decreases_on_tiny_overfit(self):
        samples = self._samples(4)
        cfg = TrainConfig(epochs=15, batch_size=4, seed=0, lr=3e-3, val_subsample=0, patience=0)
        model = GGT(tiny_cfg(), seed=0)
        report = train(model, samples, [], cfg)
        assert report.epochs[-1].train_loss < report.epochs[0].train_loss * 0.7

    def test_max_steps_cap(self):
        samples = self._samples(4)
        cfg = TrainConfig(epochs=50, batch_size=2, seed=0, val_subsample=0, patience=0)
        model = GGT(tiny_cfg(), seed=0)
        report = train(model, samples, [], cfg, max_optimizer_steps=3)
        assert report.steps == 3

    def test_checkpoints_written(self, tmp_path):
        samples = self._samples(4)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=0, val_subsample=2, sm_max_iter=200)
        model = MLPBaseline(tiny_cfg(), seed=0)
        train(model, samples, samples[:2], cfg, checkpoint_dir=tmp_path)
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "last.ckpt").exists()

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            train(GGT(tiny_cfg(), seed=0), [], [], TrainConfig(epochs=1))


class TestTrainConfigValidation:
    def test_lambda_range(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=1.5)

    def test_lr_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
