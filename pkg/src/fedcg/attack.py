"""Gradient-inversion attack harness with PSNR scoring.

The attacker observes the gradient of the classification loss for one
sample with respect to the parameters it knows (the full split network for
fedavg, the classifier only for fedsplit/fedcg) and optimizes a dummy image
whose gradients match. Against fedcg the objective additionally aligns
per-channel feature statistics estimated from the victim's shared generator
through a randomly initialized surrogate extractor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import Classifier, Extractor, Generator, ModelSpec, build_extractor
from .optim import AdamState
from .tensor import ShapeError, Tensor

ATTACK_VARIANTS = ("fedavg", "fedsplit", "fedcg")

_TAG_SURROGATE = 31
_TAG_INIT = 32
_TAG_STATS = 33
_TAG_OBSERVE_NOISE = 34

PSNR_CAP_DB = 100.0


@dataclass
class AttackConfig:
    variant: str = "fedavg"
    budget: int = 2000
    lr: float = 0.1
    alpha: float = 1.0
    restarts: int = 3
    init: str = "uniform"           # dummy-image initialization scheme
    labels_known: bool = True
    co_optimize_surrogate: bool = False
    dp_noise_variance: float = 0.0  # Gaussian noise added to observed gradients
    stats_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ATTACK_VARIANTS:
            raise ValueError(f"unknown attack variant '{self.variant}'")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init not in ("uniform", "gaussian"):
            raise ValueError(f"unknown init scheme '{self.init}'")
        if not self.labels_known:
            raise ValueError("label reconstruction is out of scope; labels_known must be True")


@dataclass
class FeatureStats:
    """Per-channel moments of generator outputs for one class."""

    mean: np.ndarray
    std: np.ndarray
    samples: int

    def __post_init__(self):
        if np.any(self.std < 0):
            raise ValueError("standard deviations must be >= 0")


@dataclass
class AttackResult:
    image: np.ndarray
    loss_trace: list[float]
    psnr_db: float
    wall_clock_s: float
    config: AttackConfig
    restarts_used: int = 1
    extra: dict = field(default_factory=dict)


def psnr(reference: np.ndarray, candidate: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; zero-MSE is capped at 100 dB."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ShapeError(f"psnr shape mismatch: {reference.shape} vs {candidate.shape}")
    for name, arr in (("reference", reference), ("candidate", candidate)):
        if arr.min() < 0.0 or arr.max() > max_value:
            raise ValueError(f"{name} values outside [0, {max_value}]")
    mse_val = float(np.mean((reference - candidate) ** 2))
    if mse_val == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(max_value * max_value / mse_val), PSNR_CAP_DB)


def observe_gradients(extractor: Extractor, classifier: Classifier,
                      image: np.ndarray, label: int, scope: str = "full",
                      noise_variance: float = 0.0,
                      rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Gradient snapshot of the classification loss the server would see.

    scope 'full' covers extractor+classifier (fedavg); 'classifier' covers
    the classifier only (fedsplit/fedcg). Optional Gaussian noise simulates
    a differentially-private client.
    """
    if scope not in ("full", "classifier"):
        raise ValueError(f"unknown gradient scope '{scope}'")
    x = Tensor(np.asarray(image)[None] if np.asarray(image).ndim == 3 else np.asarray(image))
    labels = np.asarray([label] if np.isscalar(label) else label, dtype=np.int64)
    loss = T.cross_entropy(classifier(extractor(x)), labels)
    named = ([(f"E.{n}", p) for n, p in extractor.named_parameters()] if scope == "full" else [])
    named += [(f"C.{n}", p) for n, p in classifier.named_parameters()]
    grads = T.grad(loss, [p for _, p in named])
    snapshot = {name: g.data.copy() for (name, _), g in zip(named, grads)}
    if noise_variance > 0.0:
        if rng is None:
            raise ValueError("noise_variance > 0 requires an rng")
        sigma = math.sqrt(noise_variance)
        snapshot = {name: g + rng.normal(0.0, sigma, size=g.shape).astype(g.dtype)
                    for name, g in snapshot.items()}
    return snapshot


def generator_feature_stats(generator: Generator, label: int, samples: int,
                            rng: np.random.Generator, batch: int = 64) -> FeatureStats:
    """Monte-Carlo per-channel mean and std of G(z, y) at a fixed class."""
    if samples < 2:
        raise ValueError(f"need at least 2 samples, got {samples}")
    spec = generator.spec
    sums = np.zeros(spec.feature_shape[0])
    sumsq = np.zeros(spec.feature_shape[0])
    count = 0
    with T.no_grad():
        remaining = samples
        while remaining > 0:
            b = min(batch, remaining)
            z = Tensor(rng.standard_normal((b, spec.noise_dim)))
            feats = generator(z, np.full(b, label, dtype=np.int64)).data
            sums += feats.sum(axis=(0, 2, 3))
            sumsq += (feats ** 2).sum(axis=(0, 2, 3))
            count += b * feats.shape[2] * feats.shape[3]
            remaining -= b
    mean = sums / count
    var = np.maximum(sumsq / count - mean ** 2, 0.0)
    return FeatureStats(mean=mean, std=np.sqrt(var), samples=samples)


def _init_dummy(shape: tuple[int, ...], scheme: str, rng: np.random.Generator) -> np.ndarray:
    if scheme == "uniform":
        return rng.uniform(0.0, 1.0, size=shape)
    return np.clip(0.5 + 0.25 * rng.standard_normal(shape), 0.0, 1.0)


def _channel_moments(feats: Tensor) -> tuple[Tensor, Tensor]:
    mean = T.tmean(feats, axis=(0, 2, 3))
    centered = T.add(feats, T.neg(T.reshape(mean, (1, -1, 1, 1))))
    var = T.tmean(T.mul(centered, centered), axis=(0, 2, 3))
    std = T.pow_const(T.add(var, 1e-12), 0.5)
    return mean, std


def dlg_reconstruct(classifier: Classifier, observed: dict[str, np.ndarray],
                    config: AttackConfig, spec: ModelSpec, label: int,
                    extractor: Extractor | None = None,
                    feature_stats: FeatureStats | None = None,
                    ground_truth: np.ndarray | None = None) -> AttackResult:
    """Iteratively match observed gradients from a dummy image.

    fedavg requires the victim's true extractor; fedsplit/fedcg build a
    randomly initialized surrogate instead (the server never saw the real
    one). fedcg additionally penalizes per-channel feature-moment deviation
    from the generator-derived statistics, weighted by alpha. The dummy
    image is clamped to [0,1] after every step and the best-loss iterate is
    returned.
    """
    start = time.perf_counter()
    if config.variant == "fedavg":
        if extractor is None:
            raise ValueError("fedavg attack needs the victim extractor")
        surrogate = extractor
    else:
        surrogate = build_extractor(
            spec, _derive(config.seed, _TAG_SURROGATE))
    if config.variant == "fedcg" and feature_stats is None:
        raise ValueError("fedcg attack needs generator feature statistics")

    co_optimize = config.co_optimize_surrogate and config.variant != "fedavg"
    if config.variant != "fedavg" and not co_optimize:
        surrogate.set_requires_grad(False)

    matched = ([(f"E.{n}", p) for n, p in surrogate.named_parameters()]
               if config.variant == "fedavg" else [])
    matched += [(f"C.{n}", p) for n, p in classifier.named_parameters()]
    missing = [name for name, _ in matched if name not in observed]
    if missing:
        raise ShapeError(f"observed snapshot lacks gradients for {missing}")
    targets = [Tensor(observed[name]) for name, _ in matched]
    labels = np.asarray([label], dtype=np.int64)
    mu = Tensor(feature_stats.mean) if feature_stats is not None else None
    sigma_t = Tensor(feature_stats.std) if feature_stats is not None else None

    image_shape = (1, spec.image_channels, spec.image_size, spec.image_size)
    best_loss = math.inf
    best_image: np.ndarray | None = None
    trace: list[float] = []
    restarts_used = 0

    for restart in range(config.restarts):
        restarts_used = restart + 1
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(config.seed), _TAG_INIT, restart])))
        dummy = Tensor(_init_dummy(image_shape, config.init, rng), requires_grad=True)
        opt_targets = [dummy] + (surrogate.parameters() if co_optimize else [])
        optimizer = AdamState(opt_targets, lr=config.lr)
        trace = []
        diverged = False

        for _ in range(config.budget):
            feats = surrogate(dummy)
            loss_cls = T.cross_entropy(classifier(feats), labels)
            grads = T.grad(loss_cls, [p for _, p in matched], create_graph=True)
            objective = None
            for g, target in zip(grads, targets):
                diff = T.add(g, T.neg(target))
                term = T.tsum(T.mul(diff, diff))
                objective = term if objective is None else T.add(objective, term)
            if config.variant == "fedcg" and config.alpha > 0.0:
                mean_c, std_c = _channel_moments(feats)
                mean_gap = T.add(mean_c, T.neg(mu))
                std_gap = T.add(std_c, T.neg(sigma_t))
                stats_term = T.add(T.tsum(T.mul(mean_gap, mean_gap)),
                                   T.tsum(T.mul(std_gap, std_gap)))
                objective = T.add(objective, T.mul(stats_term, config.alpha))
            value = objective.item()
            if not math.isfinite(value):
                diverged = True
                break
            if value < best_loss:
                best_loss = value
                best_image = dummy.data.copy()
            trace.append(best_loss)
            step_grads = T.grad(objective, opt_targets)
            optimizer.step([g.data if g is not None else np.zeros_like(p.data)
                            for g, p in zip(step_grads, opt_targets)])
            np.clip(dummy.data, 0.0, 1.0, out=dummy.data)
        if not diverged:
            break
    if best_image is None:
        raise RuntimeError(
            f"attack objective was non-finite on all {restarts_used} restart(s)")

    result_psnr = float("nan")
    if ground_truth is not None:
        result_psnr = psnr(np.asarray(ground_truth).reshape(best_image.shape), best_image)
    return AttackResult(image=best_image, loss_trace=trace, psnr_db=result_psnr,
                        wall_clock_s=time.perf_counter() - start, config=config,
                        restarts_used=restarts_used,
                        extra={"best_loss": best_loss})


def _derive(seed: int, tag: int, *parts: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(tag), *[int(p) for p in parts]])
    return int(ss.generate_state(1, np.uint64)[0])
