"""Network builder contracts: shapes, determinism, serialization."""

import io

import numpy as np
import pytest

import fedcg.tensor as T
from fedcg import serialize
from fedcg.gradcheck import finite_difference_check
from fedcg.models import (ModelSpec, NetworkBundle, build_classifier, build_discriminator,
                          build_extractor, build_generator, one_hot)
from fedcg.tensor import ShapeError, Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    T.set_default_dtype(np.float64)
    yield


SPEC = ModelSpec(image_channels=3, classes=10)
SMALL = ModelSpec(image_channels=1, classes=3, noise_dim=8,
                  generator_channels=(16, 12, 10), discriminator_channels=(8, 10))


class TestExtractor:
    def test_output_shape(self):
        ext = build_extractor(SPEC, seed=0)
        out = ext(Tensor(np.random.default_rng(0).random((2, 3, 32, 32))))
        assert out.shape == (2, 16, 5, 5)
        assert SPEC.feature_dim == 400

    def test_deterministic_init(self):
        a = build_extractor(SPEC, seed=7).state()
        b = build_extractor(SPEC, seed=7).state()
        for k in a:
            assert np.array_equal(a[k], b[k])
        c = build_extractor(SPEC, seed=8).state()
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_zero_image_zero_bias_gives_zero_features(self):
        ext = build_extractor(SPEC, seed=0)
        for name in ("conv1.bias", "conv2.bias"):
            ext.params[name].data = np.zeros_like(ext.params[name].data)
        out = ext(Tensor(np.zeros((1, 3, 32, 32))))
        assert np.all(out.data == 0.0)


class TestClassifier:
    def test_logit_shape(self):
        cls = build_classifier(SPEC, seed=1)
        out = cls(Tensor(np.random.default_rng(0).random((16, 16, 5, 5))))
        assert out.shape == (16, 10)

    def test_deterministic_init(self):
        a = build_classifier(SPEC, seed=3).state()
        b = build_classifier(SPEC, seed=3).state()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_end_to_end_gradient(self):
        ext = build_extractor(SMALL, seed=2)
        cls = build_classifier(SMALL, seed=2)
        x = Tensor(np.random.default_rng(1).random((2, 1, 32, 32)))
        y = np.array([0, 2])
        params = ([(f"E.{n}", p) for n, p in ext.named_parameters()]
                  + [(f"C.{n}", p) for n, p in cls.named_parameters()])
        rep = finite_difference_check(lambda: T.cross_entropy(cls(ext(x)), y), params,
                                      h=1e-6, max_coords_per_param=8,
                                      rng=np.random.default_rng(0))
        assert rep.passed, rep.per_param


class TestGenerator:
    def test_output_matches_extractor_shape(self):
        gen = build_generator(SPEC, seed=4)
        z = Tensor(np.random.default_rng(0).standard_normal((5, SPEC.noise_dim)))
        out = gen(z, np.arange(5) % SPEC.classes)
        assert tuple(out.shape) == (5,) + SPEC.feature_shape

    def test_label_conditioning_changes_output(self):
        gen = build_generator(SPEC, seed=4)
        z = Tensor(np.random.default_rng(1).standard_normal((1, SPEC.noise_dim)))
        a = gen(z, np.array([0])).data
        b = gen(z, np.array([1])).data
        assert not np.allclose(a, b)

    def test_deterministic_init(self):
        a = build_generator(SPEC, seed=5).state()
        b = build_generator(SPEC, seed=5).state()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestDiscriminator:
    def test_output_in_unit_interval(self):
        disc = build_discriminator(SPEC, seed=6)
        feats = Tensor(np.random.default_rng(2).standard_normal((16, 16, 5, 5)))
        out = disc(feats, np.random.default_rng(3).integers(0, 10, 16))
        assert out.shape == (16, 1)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_zero_head_outputs_half(self):
        disc = build_discriminator(SPEC, seed=6)
        disc.params["fc.weight"].data = np.zeros_like(disc.params["fc.weight"].data)
        disc.params["fc.bias"].data = np.zeros_like(disc.params["fc.bias"].data)
        feats = Tensor(np.random.default_rng(2).standard_normal((4, 16, 5, 5)))
        out = disc(feats, np.zeros(4, dtype=np.int64))
        np.testing.assert_array_equal(out.data, np.full((4, 1), 0.5))

    def test_gradient_through_generator_discriminator(self):
        gen = build_generator(SMALL, seed=7)
        disc = build_discriminator(SMALL, seed=7)
        z = Tensor(np.random.default_rng(4).standard_normal((2, SMALL.noise_dim)))
        y = np.array([0, 1])
        params = ([(f"G.{n}", p) for n, p in gen.named_parameters()]
                  + [(f"D.{n}", p) for n, p in disc.named_parameters()])
        rep = finite_difference_check(lambda: T.tsum(disc(gen(z, y), y)), params,
                                      h=1e-6, max_coords_per_param=6,
                                      rng=np.random.default_rng(1))
        assert rep.passed, rep.per_param


class TestModelSpecValidation:
    def test_rejects_tiny_class_count(self):
        with pytest.raises(ShapeError):
            ModelSpec(classes=1)

    def test_one_hot_validates_range(self):
        with pytest.raises(T.DomainError):
            one_hot(np.array([4]), 4)
        oh = one_hot(np.array([1, 0]), 3)
        np.testing.assert_array_equal(oh, [[0, 1, 0], [1, 0, 0]])


class TestBundleSerialization:
    def test_round_trip_via_checkpoint(self, tmp_path):
        T.set_default_dtype(np.float32)
        bundle = NetworkBundle.build(SMALL, seed=9)
        path = tmp_path / "bundle.fcg1"
        bundle.save(path)
        loaded = NetworkBundle.load(path, SMALL)
        for k, v in bundle.named_state().items():
            np.testing.assert_array_equal(loaded.named_state()[k], v)

    def test_canonical_names(self):
        names = NetworkBundle.build(SMALL, seed=9).named_state().keys()
        assert "E.conv1.weight" in names
        assert "C.fc1.bias" in names
        assert "G.deconv1.weight" in names
        assert "D.conv2.bias" in names

    def test_checkpoint_bytes_stable(self):
        state = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3)}
        blob = serialize.dump_bytes(state)
        reloaded = serialize.load_bytes(blob)
        assert serialize.dump_bytes(reloaded) == blob

    def test_checkpoint_bad_magic(self):
        with pytest.raises(serialize.CheckpointError):
            serialize.load_bytes(b"NOPE" + b"\x00" * 10)

    def test_checkpoint_truncation(self):
        blob = serialize.dump_bytes({"w": np.ones(4, dtype=np.float32)})
        with pytest.raises(serialize.CheckpointError):
            serialize.load_bytes(blob[:-3])
