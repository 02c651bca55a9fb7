import json

import numpy as np
import pytest

from rsslab import training
from rsslab.attacks import AttackConfig
from rsslab.augment import AugmentSpec
from rsslab.data import ContentStyleSpec, generate
from rsslab.errors import ConfigError, NonFiniteLoss
from rsslab.losses import TcrConfig
from rsslab.models import EncoderSpec, ParameterStore, load_params
from rsslab.optim import Adam, SgdMomentum, make_optimizer, optimizer_step
from rsslab.training import TrainConfig, pretrain


def tiny_data(n_per_class=10, seed=0):
    spec = ContentStyleSpec(num_classes=4, per_class=n_per_class, height=4,
                            width=4, channels=1, content_margin=1.0,
                            style_color=0.05, style_texture=0.05,
                            pixel_noise=0.01, seed=seed)
    return generate(spec)


def tiny_config(scheme="empssl_free", total_epochs=30, replays=3, crops=2,
                batch_size=4, epsilon=8 / 255, **kw):
    mode = "crop" if not scheme.startswith("simclr") else "crop"
    return TrainConfig(
        scheme=scheme,
        total_epochs=total_epochs,
        replays=replays,
        crops=crops,
        batch_size=batch_size,
        attack=AttackConfig(epsilon=epsilon, steps=2),
        loss=TcrConfig(eps_sq=0.2, lam=1.0, tau=0.5),
        encoder=EncoderSpec(input_dim=16, hidden=(8,), activation="relu",
                            embed_dim=4),
        augment=AugmentSpec(mode=mode, scales=(0.5, 1.0), ratios=(1.0, 1.0),
                            crop_count=crops, out_size=(4, 4)),
        seed=7,
        lr=1e-3,
        rank_probe=16,
        **kw,
    )


class TestAccounting:
    def test_free_scheme_epoch_division(self, tmp_path):
        # 30 total epochs, 3 replays, 10 batches/epoch: 10 outer epochs,
        # 300 optimizer steps, 300 delta updates
        data = tiny_data()  # 40 images, batch 4 -> 10 batches
        cfg = tiny_config("empssl_free", total_epochs=30, replays=3)
        encoder, manifest = pretrain(data, cfg, tmp_path / "run")
        assert manifest.outer_epochs == 10
        assert manifest.optimizer_steps == 300
        assert manifest.delta_updates == 300
        assert encoder.store.step_count == 300
        metrics = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        assert metrics[0] == "epoch,scheme,loss_mean,tcr_mean,invariance_mean,effective_rank"
        assert len(metrics) == 11  # header + one row per outer epoch

    def test_free_m1_matches_pgd_step_count(self, tmp_path):
        data = tiny_data()
        free = tiny_config("empssl_free", total_epochs=3, replays=1)
        pgds = tiny_config("empssl_pgd", total_epochs=3, replays=1)
        _, mf = pretrain(data, free, tmp_path / "free")
        _, mp = pretrain(data, pgds, tmp_path / "pgd")
        assert mf.optimizer_steps == mp.optimizer_steps == 30
        assert mf.outer_epochs == mp.outer_epochs == 3
        assert mf.delta_updates == 30 and mp.delta_updates == 0
        assert mp.attack_grad_evals == 30 * pgds.attack.steps

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            tiny_config("empssl_free", total_epochs=10, replays=3).validate()

    def test_existing_manifest_refused(self, tmp_path):
        data = tiny_data()
        cfg = tiny_config("empssl_free", total_epochs=2, replays=1)
        pretrain(data, cfg, tmp_path / "run")
        with pytest.raises(ConfigError):
            pretrain(data, cfg, tmp_path / "run")

    def test_pgd_fixes_replays(self):
        with pytest.raises(ConfigError):
            tiny_config("empssl_pgd", total_epochs=4, replays=2).validate()

    def test_simclr_needs_two_views(self):
        with pytest.raises(ConfigError):
            tiny_config("simclr_pgd", crops=3, replays=1).validate()


class TestDeterminism:
    def test_identical_seed_identical_artifacts(self, tmp_path):
        data = tiny_data()
        cfg = tiny_config("empssl_free", total_epochs=4, replays=2)
        pretrain(data, cfg, tmp_path / "a")
        pretrain(data, cfg, tmp_path / "b")
        wa = (tmp_path / "a" / "weights.rssl1").read_bytes()
        wb = (tmp_path / "b" / "weights.rssl1").read_bytes()
        assert wa == wb
        ma = (tmp_path / "a" / "metrics.csv").read_bytes()
        mb = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert ma == mb

    def test_seed_changes_weights(self, tmp_path):
        data = tiny_data()
        cfg = tiny_config("empssl_free", total_epochs=2, replays=1)
        cfg2 = tiny_config("empssl_free", total_epochs=2, replays=1)
        cfg2 = TrainConfig(**{**cfg2.__dict__, "seed": 8})
        pretrain(data, cfg, tmp_path / "a")
        pretrain(data, cfg2, tmp_path / "b")
        wa = (tmp_path / "a" / "weights.rssl1").read_bytes()
        wb = (tmp_path / "b" / "weights.rssl1").read_bytes()
        assert wa != wb


class TestSchemes:
    @pytest.mark.parametrize("scheme", ["empssl_pgd", "simclr_pgd",
                                        "empssl_free", "simclr_free"])
    def test_all_schemes_run_and_learn_finite(self, tmp_path, scheme):
        data = tiny_data()
        crops = 2
        replays = 2 if scheme.endswith("free") else 1
        cfg = tiny_config(scheme, total_epochs=2, replays=replays, crops=crops)
        encoder, manifest = pretrain(data, cfg, tmp_path / scheme)
        assert manifest.status == "done"
        assert manifest.optimizer_steps == 2 * 10
        assert (tmp_path / scheme / "weights.rssl1").exists()
        loaded = load_params(tmp_path / scheme / "weights.rssl1")
        assert loaded.names() == encoder.store.names()

    def test_shared_delta_mode(self, tmp_path):
        data = tiny_data()
        cfg = tiny_config("empssl_free", total_epochs=2, replays=2,
                          share_delta=True)
        _, manifest = pretrain(data, cfg, tmp_path / "shared")
        assert manifest.status == "done"
        assert manifest.delta_updates == 2 // 2 * 10 * 2

    def test_standard_training_via_zero_epsilon(self, tmp_path):
        data = tiny_data()
        cfg = tiny_config("empssl_pgd", total_epochs=2, replays=1, epsilon=0.0)
        _, manifest = pretrain(data, cfg, tmp_path / "std")
        assert manifest.status == "done"
        assert manifest.attack_grad_evals == 0

    def test_manifest_contents(self, tmp_path):
        data = tiny_data()
        cfg = tiny_config("empssl_free", total_epochs=2, replays=1)
        _, manifest = pretrain(data, cfg, tmp_path / "run")
        blob = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert blob["status"] == "done"
        assert blob["config"]["scheme"] == "empssl_free"
        assert blob["optimizer_steps"] == 20
        assert len(blob["epoch_seconds"]) == 2
        assert (tmp_path / "run" / blob["metrics_path"].split("/")[-1]).exists()
        assert (tmp_path / "run" / blob["weights_path"].split("/")[-1]).exists()

    def test_non_finite_loss_marks_manifest_failed(self, tmp_path, monkeypatch):
        data = tiny_data()
        cfg = tiny_config("empssl_free", total_epochs=2, replays=1)

        def poisoned(*args, **kwargs):
            return (float("nan"), 0.0, 0.0,
                    [np.zeros((16, 4)) for _ in range(2)],
                    {name: np.zeros_like(val) for name, val in
                     zip(["b0", "b1", "w0", "w1"],
                         [np.zeros((8, 1)), np.zeros((4, 1)),
                          np.zeros((8, 16)), np.zeros((4, 8))])})

        monkeypatch.setattr(training, "_empssl_train_step", poisoned)
        with pytest.raises(NonFiniteLoss):
            pretrain(data, cfg, tmp_path / "bad")
        blob = json.loads((tmp_path / "bad" / "manifest.json").read_text())
        assert blob["status"] == "failed"


class TestOptimizers:
    def test_zero_gradient_keeps_parameters(self):
        store = ParameterStore({"w": np.ones((2, 2))})
        opt = SgdMomentum(lr=0.1, momentum=0.0)
        optimizer_step(store, {"w": np.zeros((2, 2))}, opt)
        assert np.allclose(store["w"], 1.0)
        assert store.step_count == 1

    def test_sgd_on_quadratic(self):
        # f(t) = t^2/2, grad = t; from t=1 with lr 0.1: t -> 0.9
        store = ParameterStore({"t": np.array([[1.0]])})
        opt = SgdMomentum(lr=0.1, momentum=0.0)
        optimizer_step(store, {"t": store["t"].copy()}, opt)
        assert store["t"][0, 0] == pytest.approx(0.9)

    def test_adam_three_steps_matches_scalar_recurrence(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        store = ParameterStore({"t": np.array([[1.0]])})
        opt = Adam(lr=lr, betas=(b1, b2), eps=eps)
        theta = 1.0
        m = v = 0.0
        for t in range(1, 4):
            g = theta  # gradient of theta^2/2
            optimizer_step(store, {"t": store["t"].copy()}, opt)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
            assert store["t"][0, 0] == pytest.approx(theta, abs=1e-12)

    def test_momentum_accumulates(self):
        store = ParameterStore({"t": np.array([[0.0]])})
        opt = SgdMomentum(lr=1.0, momentum=0.5)
        optimizer_step(store, {"t": np.array([[1.0]])}, opt)
        assert store["t"][0, 0] == pytest.approx(-1.0)
        optimizer_step(store, {"t": np.array([[1.0]])}, opt)
        # v = 0.5*1 + 1 = 1.5 -> t = -1 - 1.5
        assert store["t"][0, 0] == pytest.approx(-2.5)

    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError):
            make_optimizer("lars", 0.1)
