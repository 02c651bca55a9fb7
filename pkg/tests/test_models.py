import numpy as np
import pytest

from rsslab import autodiff as ad
from rsslab import models
from rsslab.errors import FormatError, ShapeMismatch
from rsslab.models import Encoder, EncoderSpec, LinearHead, ParameterStore

from oracles import assert_grad_close, central_diff_grad


def tiny_encoder(seed=0, input_dim=12, hidden=(8,), d=4):
    return Encoder.initialized(EncoderSpec(input_dim, hidden, "relu", d), seed)


class TestEmbed:
    def test_columns_unit_norm(self):
        enc = tiny_encoder()
        x = ad.constant(np.random.default_rng(0).uniform(size=(12, 5)))
        z, _ = enc.embed(x)
        assert np.allclose(np.linalg.norm(z.value, axis=0), 1.0)

    def test_zero_projector_falls_back_to_basis_vector(self):
        enc = tiny_encoder()
        last = len(enc.spec.layer_dims()) - 1
        enc.store[f"w{last}"] = np.zeros_like(enc.store[f"w{last}"])
        enc.store[f"b{last}"] = np.zeros_like(enc.store[f"b{last}"])
        x = ad.constant(np.random.default_rng(1).uniform(size=(12, 3)))
        z, _ = enc.embed(x)
        expected = np.zeros((4, 3))
        expected[0] = 1.0
        assert np.allclose(z.value, expected)

    def test_single_linear_layer_is_normalized_input(self):
        spec = EncoderSpec(input_dim=4, hidden=(), activation="relu", embed_dim=4)
        store = ParameterStore({"w0": np.eye(4), "b0": np.zeros((4, 1))})
        enc = Encoder(spec, store)
        v = np.array([[3.0], [0.0], [4.0], [0.0]])
        z, _ = enc.embed(ad.constant(v))
        assert np.allclose(z.value, v / 5.0)

    def test_duplicated_inputs_give_duplicated_outputs(self):
        enc = tiny_encoder(seed=2)
        col = np.random.default_rng(3).uniform(size=(12, 1))
        x = ad.constant(np.hstack([col, col, col]))
        z, _ = enc.embed(x)
        assert np.allclose(z.value[:, 0], z.value[:, 1])
        assert np.allclose(z.value[:, 0], z.value[:, 2])

    def test_shape_mismatch(self):
        enc = tiny_encoder()
        with pytest.raises(ShapeMismatch):
            enc.embed(ad.constant(np.zeros((5, 2))))

    def test_pixel_gradient_matches_fd(self):
        enc = tiny_encoder(seed=4)
        rng = np.random.default_rng(5)
        x_val = rng.uniform(0.2, 0.8, size=(12, 3))

        def scalar_of(xv):
            z, _ = enc.embed(ad.constant(xv))
            w = np.arange(z.value.size).reshape(z.shape) / z.value.size
            return float((z.value * w).sum())

        x = ad.leaf(x_val)
        z, _ = enc.embed(x)
        w = np.arange(z.value.size).reshape(z.shape) / z.value.size
        root = ad.sum_all(ad.mul(z, ad.constant(w)))
        grads = ad.backward(root)
        assert_grad_close(grads[x], central_diff_grad(scalar_of, x_val))

    def test_param_gradient_matches_fd(self):
        enc = tiny_encoder(seed=6)
        rng = np.random.default_rng(7)
        x_val = rng.uniform(size=(12, 4))
        x = ad.constant(x_val)
        z, params = enc.embed(x, trainable=True)
        root = ad.sum_all(ad.mul(z, z))
        grads = ad.backward(root)

        w0 = enc.store["w0"].copy()

        def f(wv):
            enc.store["w0"] = wv
            zz, _ = enc.embed(ad.constant(x_val))
            enc.store["w0"] = w0
            return float((zz.value * zz.value).sum())

        assert_grad_close(grads[params["w0"]], central_diff_grad(f, w0))


class TestHead:
    def test_zero_head_uniform_logits_tie_to_class_zero(self):
        head = LinearHead.initialized(4, 3)
        z = np.random.default_rng(8).uniform(size=(4, 6))
        logits, _ = head.logits(ad.constant(z))
        assert np.allclose(logits.value, 0.0)
        assert (head.predict(z) == 0).all()

    def test_one_hot_rows_pick_matching_class(self):
        head = LinearHead(ParameterStore({"w": np.eye(3), "b": np.zeros((3, 1))}))
        z = np.eye(3)
        logits, _ = head.logits(ad.constant(z))
        assert np.allclose(logits.value, np.eye(3))
        assert np.array_equal(head.predict(z), [0, 1, 2])

    def test_random_case_matches_matmul(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 1))
        head = LinearHead(ParameterStore({"w": w, "b": b}))
        z = rng.standard_normal((5, 7))
        logits, _ = head.logits(ad.constant(z))
        assert np.allclose(logits.value, w.T @ z + b)

    def test_cross_entropy_matches_manual(self):
        rng = np.random.default_rng(10)
        logits_val = rng.standard_normal((3, 5))
        labels = rng.integers(0, 3, size=5)
        ce = models.cross_entropy(ad.constant(logits_val), labels).item()
        probs = np.exp(logits_val - logits_val.max(axis=0))
        probs /= probs.sum(axis=0)
        manual = -np.log(probs[labels, np.arange(5)]).mean()
        assert ce == pytest.approx(manual, abs=1e-10)


class TestSerialization:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        store = ParameterStore({
            "w0": rng.standard_normal((3, 4)),
            "b0": rng.standard_normal((3, 1)),
            "w1": rng.standard_normal((2, 3)),
        })
        path = tmp_path / "weights.rssl1"
        models.save_params(store, path)
        loaded = models.load_params(path)
        assert loaded.names() == store.names()
        for name in store.names():
            assert loaded[name].tobytes() == store[name].tobytes()

    def test_truncated_rejected(self, tmp_path):
        store = ParameterStore({"w": np.ones((4, 4))})
        path = tmp_path / "weights.rssl1"
        models.save_params(store, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(FormatError):
            models.load_params(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "weights.rssl1"
        path.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(FormatError):
            models.load_params(path)

    def test_empty_store(self, tmp_path):
        path = tmp_path / "weights.rssl1"
        models.save_params(ParameterStore(), path)
        assert path.read_bytes() == b"RSSL1"
        assert models.load_params(path).names() == []

    def test_deterministic_bytes(self, tmp_path):
        store = ParameterStore({"a": np.arange(6.0).reshape(2, 3)})
        p1, p2 = tmp_path / "a.rssl1", tmp_path / "b.rssl1"
        models.save_params(store, p1)
        models.save_params(store, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestStore:
    def test_tensor_shapes_immutable(self):
        store = ParameterStore({"w": np.zeros((2, 3))})
        store["w"] = np.ones((2, 3))  # same shape: allowed
        with pytest.raises(ShapeMismatch):
            store["w"] = np.zeros((3, 2))


class TestInit:
    def test_seeded_init_reproducible(self):
        a = models.init_encoder(EncoderSpec(10, (6,), "relu", 4), seed=3)
        b = models.init_encoder(EncoderSpec(10, (6,), "relu", 4), seed=3)
        c = models.init_encoder(EncoderSpec(10, (6,), "relu", 4), seed=4)
        assert a["w0"].tobytes() == b["w0"].tobytes()
        assert a["w0"].tobytes() != c["w0"].tobytes()

    def test_he_uniform_bound(self):
        store = models.init_encoder(EncoderSpec(100, (50,), "relu", 8), seed=0)
        assert np.abs(store["w0"]).max() <= np.sqrt(6.0 / 100)
        assert np.abs(store["w1"]).max() <= np.sqrt(6.0 / 50)
        assert np.allclose(store["b0"], 0.0)
