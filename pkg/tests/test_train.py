import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcmamba import tensor as T
from pcmamba.data import DatasetManifest, make_dataset
from pcmamba.network import NetworkConfig, build_variant, load_checkpoint
from pcmamba.train import (AdamState, AdamW, History, NonFiniteError, TrainConfig, adamw_step, clip_grad_norm,
                           cosine_lr, evaluate, seg_loss, train_loop)
from pcmamba.verify import grad_check


def tiny_net(variant="full", seed=0):
    return build_variant(NetworkConfig(input_size=(32, 32), embed_dim=4, stage_depths=(1, 0, 0, 0),
                                       bottleneck_depth=0, decoder_depths=(0, 0, 1), state_dim=3,
                                       variant=variant, seed=seed))


@pytest.fixture(scope="module")
def dataset():
    return make_dataset(DatasetManifest(n_samples=10, height=32, width=32, seed=3, split=(0.6, 0.2, 0.2)))


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    """Scalar, line-by-line AdamW recurrence."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * wd * p
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
    return p


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr0": 0}, {"epochs": 0}, {"lr_min": 1.0}, {"batch_size": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_text_round_trip(self):
        cfg = TrainConfig(lr0=3e-3, epochs=7, checkpoint_dir="runs/x", stop_at_dice=0.9)
        assert TrainConfig.from_text(cfg.to_text()) == cfg

    def test_overrides_and_unknown(self):
        assert TrainConfig.from_text("epochs = 3\n", epochs=5, lr0=None).epochs == 5
        with pytest.raises(ValueError):
            TrainConfig.from_text("momentum = 0.9\n")


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = [np.array([1.0, -2.0])]
        new, _ = adamw_step(p, [np.zeros(2)], AdamState.zeros(p), 1, 0.1, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(new[0], p[0])

    def test_decay_only(self):
        p = [np.array([1.0, -2.0])]
        new, _ = adamw_step(p, [np.zeros(2)], AdamState.zeros(p), 1, 0.1, TrainConfig(weight_decay=0.1))
        np.testing.assert_allclose(new[0], 0.99 * p[0], rtol=1e-15)

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(1e-4, 0.1), st.floats(0, 0.1))
    def test_reference_recurrence(self, grads, lr, wd):
        cfg = TrainConfig(weight_decay=wd)
        p = [np.array([0.7])]
        state = AdamState.zeros(p)
        for t, g in enumerate(grads, 1):
            p, state = adamw_step(p, [np.array([g])], state, t, lr, cfg)
        want = reference_adamw(0.7, grads, lr, cfg.beta1, cfg.beta2, cfg.eps, wd)
        assert p[0][0] == pytest.approx(want, rel=1e-12, abs=1e-15)

    def test_tiny_lr_is_decay_bound(self, rng):
        cfg = TrainConfig(weight_decay=0.01)
        p = [rng.standard_normal(5)]
        new, _ = adamw_step(p, [rng.standard_normal(5)], AdamState.zeros(p), 1, 1e-12, cfg)
        assert np.abs(new[0] - p[0]).max() <= 1e-12 * (1 + 0.01 * np.abs(p[0]).max()) + 1e-18

    def test_non_finite(self):
        p = [np.zeros(2)]
        with pytest.raises(NonFiniteError):
            adamw_step(p, [np.array([np.nan, 0.0])], AdamState.zeros(p), 1, 0.1, TrainConfig())

    def test_bad_step_index(self):
        with pytest.raises(ValueError):
            adamw_step([np.zeros(1)], [np.zeros(1)], AdamState.zeros([np.zeros(1)]), 0, 0.1, TrainConfig())

    def test_optimizer_wrapper(self):
        w = T.Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        w.grad = np.array([0.5, -0.5], dtype=np.float32)
        opt = AdamW([w], TrainConfig(weight_decay=0.0))
        opt.step(0.1)
        np.testing.assert_allclose(w.data, [0.9, 2.1], rtol=1e-6)
        assert opt.state.t == 1

    def test_clip(self):
        w = T.Tensor(np.zeros(2), requires_grad=True)
        w.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([w], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(w.grad) == pytest.approx(1.0)


class TestSchedule:
    def test_values(self):
        assert cosine_lr(0, 5, 1e-3) == 1e-3
        assert cosine_lr(4, 5, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(2, 5, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
        assert cosine_lr(0, 1, 0.2) == 0.2

    def test_range(self):
        with pytest.raises(ValueError):
            cosine_lr(5, 5, 1e-3)

    @given(st.integers(2, 50), st.data())
    def test_monotone(self, epochs, data):
        e = data.draw(st.integers(0, epochs - 2))
        assert cosine_lr(e + 1, epochs, 1.0, 0.1) <= cosine_lr(e, epochs, 1.0, 0.1)


class TestLoss:
    def test_uniform_ce(self):
        labels = np.random.default_rng(0).integers(0, 4, (3, 3))
        full = seg_loss(np.zeros((4, 3, 3)), labels, dice_w=0.0).item()
        assert full == pytest.approx(math.log(4), rel=1e-6)

    def test_saturated(self):
        labels = np.array([[0, 1, 2], [3, 1, 2], [3, 3, 1]])
        logits = np.where(labels[None] == np.arange(4)[:, None, None], 50.0, -50.0)
        assert seg_loss(logits, labels).item() < 1e-6

    def test_gradient(self, f64, rng):
        logits = T.Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        labels = rng.integers(0, 4, (2, 4, 4))
        rep = grad_check(lambda: seg_loss(logits, labels), {"logits": logits}, tol=1e-6, max_entries=64)
        assert rep.passed

    def test_label_checks(self):
        with pytest.raises(ValueError):
            seg_loss(np.zeros((4, 2, 2)), np.full((2, 2), 4))
        with pytest.raises(ValueError):
            seg_loss(np.zeros((4, 2, 2)), np.zeros((3, 2)))


class TestLoop:
    def test_dry_run(self, dataset):
        net = tiny_net()
        before = net.state_dict()
        hist = train_loop(net, dataset, TrainConfig(), dry_run=True)
        assert len(hist) == 1
        assert all(before[k].tobytes() == v.tobytes() for k, v in net.state_dict().items())

    def test_determinism_and_bookkeeping(self, dataset):
        cfg = TrainConfig(lr0=2e-3, epochs=3, batch_size=3, seed=5)
        h1 = train_loop(tiny_net(), dataset, cfg)
        h2 = train_loop(tiny_net(), dataset, cfg)
        assert h1.comparable() == h2.comparable()
        assert h1.lr == [cosine_lr(e, 3, 2e-3) for e in range(3)]
        assert len(h1.val_dice[0]) == 3 and len(h1) == 3
        assert h1.best_dice == max(h1.mean_val_dice)

    def test_keeps_best_weights(self, dataset, tmp_path):
        net = tiny_net()
        cfg = TrainConfig(lr0=2e-3, epochs=2, checkpoint_dir=str(tmp_path))
        hist = train_loop(net, dataset, cfg)
        va = dataset.splits["val"]
        _, vd, _ = evaluate(net, dataset.images[va], dataset.labels[va], cfg)
        assert np.mean(vd) == pytest.approx(hist.best_dice, abs=1e-9)
        other = tiny_net(seed=1)
        meta = load_checkpoint(other, tmp_path / "best.ckpt")
        assert int(meta["epoch"]) == hist.best_epoch
        _, vd2, _ = evaluate(other, dataset.images[va], dataset.labels[va], cfg)
        assert vd2 == vd

    def test_loss_decreases_first_epoch(self, dataset):
        wins = 0
        for seed in range(3):
            net = tiny_net(seed=seed)
            va = dataset.splits["val"]
            before, _, _ = evaluate(net, dataset.images[va], dataset.labels[va])
            hist = train_loop(net, dataset, TrainConfig(lr0=3e-3, epochs=1, batch_size=2, seed=seed))
            wins += hist.val_loss[0] < before
        assert wins >= 2

    def test_non_finite_abort(self, dataset):
        net = tiny_net()
        net.head.classify.bias.data[:] = np.nan
        hist = train_loop(net, dataset, TrainConfig(epochs=2))
        assert hist.aborted and len(hist) == 0

    def test_stop_at_dice(self, dataset):
        hist = train_loop(tiny_net(), dataset, TrainConfig(epochs=4, stop_at_dice=1e-9))
        assert len(hist) == 1

    def test_empty_split(self, dataset):
        with pytest.raises(ValueError):
            train_loop(tiny_net(), dataset, TrainConfig(), val_idx=[])

    def test_history_csv(self, tmp_path):
        h = History()
        h.epoch, h.lr, h.train_loss, h.val_loss = [0], [1e-3], [1.0], [0.9]
        h.val_dice, h.param_l2, h.seconds = [[0.5, 0.6, 0.7]], [0.1], [1.0]
        h.to_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0].split(",")[-3:] == ["val_dice_mean", "param_l2", "seconds"]
        assert lines[1].split(",")[7] == "0.600000"
