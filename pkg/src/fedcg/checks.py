"""Finite-difference verification suite covering every layer op and every
composite training/attack objective."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attack import generator_feature_stats, observe_gradients
from .gradcheck import GradCheckReport, finite_difference_check
from .models import ModelSpec, NetworkBundle
from .tensor import Tensor


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 99])))


def _merge(worst: GradCheckReport | None, rep: GradCheckReport) -> GradCheckReport:
    if worst is None or rep.max_rel_error > worst.max_rel_error:
        return rep
    return worst


def check_layer_ops(seeds: int = 20, tolerance: float = 1e-4, h: float = 1e-5) -> dict[str, GradCheckReport]:
    """Per-op finite-difference checks over fresh random instances."""
    results: dict[str, GradCheckReport] = {}

    def run(name, builder):
        worst = None
        for s in range(seeds):
            f, params = builder(_rng(s))
            rep = finite_difference_check(f, params, h=h, tolerance=tolerance)
            worst = _merge(worst, rep)
        results[name] = worst

    def conv_case(rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        return (lambda: T.tsum(T.tanh(T.conv2d(x, k, b))), [("x", x), ("k", k), ("b", b)])

    def conv_strided_case(rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True)
        return (lambda: T.tsum(T.sigmoid(T.conv2d(x, k, stride=2, padding=1))),
                [("x", x), ("k", k)])

    def convt_case(rng):
        x = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
        b = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
        return (lambda: T.tsum(T.tanh(T.conv_transpose2d(x, k, b, stride=2, padding=1))),
                [("x", x), ("k", k), ("b", b)])

    def affine_case(rng):
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 6)) * 0.4, requires_grad=True)
        b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
        return (lambda: T.tsum(T.tanh(T.affine(x, w, b))), [("x", x), ("w", w), ("b", b)])

    def activation_case(kind):
        def build(rng):
            x = Tensor(rng.standard_normal((4, 7)) + 0.05, requires_grad=True)
            return (lambda: T.tsum(T.mul(T.activation(x, kind), T.activation(x, kind))),
                    [("x", x)])
        return build

    def pool_case(rng):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        return (lambda: T.tsum(T.mul(T.avg_pool2d(x, 2), T.avg_pool2d(x, 2))), [("x", x)])

    def softmax_case(rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 5)))
        return (lambda: T.tsum(T.mul(T.softmax(x), w)), [("x", x)])

    def cross_entropy_case(rng):
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        y = rng.integers(0, 5, size=4)
        return (lambda: T.cross_entropy(x, y), [("logits", x)])

    def mse_case(rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        return (lambda: T.mse(a, b), [("a", a), ("b", b)])

    def gan_case(mode, which):
        def build(rng):
            raw_r = Tensor(rng.standard_normal((5, 1)), requires_grad=True)
            raw_f = Tensor(rng.standard_normal((5, 1)), requires_grad=True)
            def f():
                losses = T.gan_losses(T.sigmoid(raw_r), T.sigmoid(raw_f), mode)
                return losses[which]
            return f, [("raw_real", raw_r), ("raw_fake", raw_f)]
        return build

    def kl_case(rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        return (lambda: T.kl_divergence(T.softmax(a), T.softmax(b)), [("a", a), ("b", b)])

    run("conv2d", conv_case)
    run("conv2d_strided", conv_strided_case)
    run("conv_transpose2d", convt_case)
    run("affine", affine_case)
    for kind in ("relu", "leaky_relu", "sigmoid", "tanh"):
        run(f"activation_{kind}", activation_case(kind))
    run("avg_pool2d", pool_case)
    run("softmax", softmax_case)
    run("cross_entropy", cross_entropy_case)
    run("mse", mse_case)
    run("gan_disc_loss", gan_case("saturating", 0))
    run("gan_gen_saturating", gan_case("saturating", 1))
    run("gan_gen_non_saturating", gan_case("non_saturating", 1))
    run("kl_divergence", kl_case)
    return results


def check_composite_losses(seeds: int = 20, tolerance: float = 1e-4, h: float = 1e-6,
                           coords: int = 6) -> dict[str, GradCheckReport]:
    """End-to-end objectives: task loss, GAN pair, distillation KL, and the
    two gradient-matching attack objectives.

    The probe step is smaller than for single ops: these networks have
    thousands of relu activations, so a wider step has a realistic chance of
    straddling a kink and corrupting the central difference.
    """
    spec = ModelSpec(image_channels=1, classes=3, noise_dim=8,
                     generator_channels=(16, 12, 10), discriminator_channels=(8, 10))
    results: dict[str, GradCheckReport] = {}

    def run(name, builder, n_seeds):
        worst = None
        for s in range(n_seeds):
            f, params = builder(s)
            rep = finite_difference_check(f, params, h=h, tolerance=tolerance,
                                          max_coords_per_param=coords, rng=_rng(1000 + s))
            worst = _merge(worst, rep)
        results[name] = worst

    def task_loss_case(s):
        rng = _rng(s)
        bundle = NetworkBundle.build(spec, seed=s)
        x = Tensor(rng.random((2, 1, 32, 32)))
        y = rng.integers(0, spec.classes, size=2)
        z = Tensor(rng.standard_normal((2, spec.noise_dim)))
        gamma = 0.7
        bundle.generator.set_requires_grad(False)
        def f():
            feats = bundle.extractor(x)
            loss_cls = T.cross_entropy(bundle.classifier(feats), y)
            loss_mse = T.mse(feats, bundle.generator(z, y))
            return T.add(loss_cls, T.mul(loss_mse, gamma))
        params = ([(f"E.{n}", p) for n, p in bundle.extractor.named_parameters()]
                  + [(f"C.{n}", p) for n, p in bundle.classifier.named_parameters()])
        return f, params

    def gan_pair_case(s):
        rng = _rng(s)
        bundle = NetworkBundle.build(spec, seed=s)
        feats = Tensor(rng.random((2,) + spec.feature_shape))
        z = Tensor(rng.standard_normal((2, spec.noise_dim)))
        y = rng.integers(0, spec.classes, size=2)
        def f():
            d_real = bundle.discriminator(feats, y)
            d_fake = bundle.discriminator(bundle.generator(z, y), y)
            disc, gen = T.gan_losses(d_real, d_fake, "non_saturating")
            return T.add(disc, gen)
        params = ([(f"G.{n}", p) for n, p in bundle.generator.named_parameters()]
                  + [(f"D.{n}", p) for n, p in bundle.discriminator.named_parameters()])
        return f, params

    def distill_case(s):
        rng = _rng(s)
        global_bundle = NetworkBundle.build(spec, seed=s)
        client = NetworkBundle.build(spec, seed=s + 1)
        client.generator.set_requires_grad(False)
        client.classifier.set_requires_grad(False)
        z = Tensor(rng.standard_normal((3, spec.noise_dim)))
        y = rng.integers(0, spec.classes, size=3)
        def f():
            with T.no_grad():
                ens = client.classifier(client.generator(z, y)).data
            p_c = T.softmax(Tensor(ens))
            p_s = T.softmax(global_bundle.classifier(global_bundle.generator(z, y)))
            return T.kl_divergence(p_c, p_s)
        params = ([(f"G.{n}", p) for n, p in global_bundle.generator.named_parameters()]
                  + [(f"C.{n}", p) for n, p in global_bundle.classifier.named_parameters()])
        return f, params

    def dlg_full_case(s):
        rng = _rng(s)
        bundle = NetworkBundle.build(spec, seed=s)
        image = rng.random((1, 32, 32))
        label = int(rng.integers(0, spec.classes))
        observed = observe_gradients(bundle.extractor, bundle.classifier, image, label, "full")
        dummy = Tensor(rng.random((1, 1, 32, 32)), requires_grad=True)
        named = ([(f"E.{n}", p) for n, p in bundle.extractor.named_parameters()]
                 + [(f"C.{n}", p) for n, p in bundle.classifier.named_parameters()])
        def f():
            loss = T.cross_entropy(bundle.classifier(bundle.extractor(dummy)), [label])
            grads = T.grad(loss, [p for _, p in named], create_graph=True)
            total = None
            for g, (name, _) in zip(grads, named):
                diff = T.add(g, T.neg(Tensor(observed[name])))
                term = T.tsum(T.mul(diff, diff))
                total = term if total is None else T.add(total, term)
            return total
        return f, [("dummy", dummy)]

    def dlg_stats_case(s):
        rng = _rng(s)
        bundle = NetworkBundle.build(spec, seed=s)
        surrogate = NetworkBundle.build(spec, seed=s + 7).extractor
        surrogate.set_requires_grad(False)
        image = rng.random((1, 32, 32))
        label = int(rng.integers(0, spec.classes))
        observed = observe_gradients(bundle.extractor, bundle.classifier, image, label,
                                     "classifier")
        stats = generator_feature_stats(bundle.generator, label, 16, _rng(s + 13))
        mu, sigma_t = Tensor(stats.mean), Tensor(stats.std)
        dummy = Tensor(rng.random((1, 1, 32, 32)), requires_grad=True)
        named = [(f"C.{n}", p) for n, p in bundle.classifier.named_parameters()]
        def f():
            feats = surrogate(dummy)
            loss = T.cross_entropy(bundle.classifier(feats), [label])
            grads = T.grad(loss, [p for _, p in named], create_graph=True)
            total = None
            for g, (name, _) in zip(grads, named):
                diff = T.add(g, T.neg(Tensor(observed[name])))
                term = T.tsum(T.mul(diff, diff))
                total = term if total is None else T.add(total, term)
            mean_c = T.tmean(feats, axis=(0, 2, 3))
            centered = T.add(feats, T.neg(T.reshape(mean_c, (1, -1, 1, 1))))
            var = T.tmean(T.mul(centered, centered), axis=(0, 2, 3))
            std_c = T.pow_const(T.add(var, 1e-12), 0.5)
            mgap = T.add(mean_c, T.neg(mu))
            sgap = T.add(std_c, T.neg(sigma_t))
            stats_term = T.add(T.tsum(T.mul(mgap, mgap)), T.tsum(T.mul(sgap, sgap)))
            return T.add(total, stats_term)
        return f, [("dummy", dummy)]

    run("task_loss", task_loss_case, seeds)
    run("gan_pair", gan_pair_case, seeds)
    run("distill_kl", distill_case, seeds)
    run("dlg_gradient_match_full", dlg_full_case, seeds)
    run("dlg_gradient_match_stats", dlg_stats_case, seeds)
    return results


def full_suite(seeds: int = 20, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    results = check_layer_ops(seeds=seeds, tolerance=tolerance)
    results.update(check_composite_losses(seeds=seeds, tolerance=tolerance))
    return results
