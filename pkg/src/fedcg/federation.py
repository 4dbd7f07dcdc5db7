"""Federated protocol engine: two-stage client update, data-free server
distillation, and the baseline strategies (local, fedavg, fedprox, fedsplit,
fedavg_dp).

Determinism contract: every random draw comes from a generator seeded by
(base seed, stream tag, round, client id), so clients can run sequentially
or on worker threads with identical results; aggregation always iterates in
ascending client id order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset, Partition
from .models import (Classifier, Extractor, Generator, ModelSpec, NetworkBundle,
                     build_classifier, build_extractor, build_generator)
from .optim import AdamState
from .tensor import Tensor

STRATEGIES = ("local", "fedavg", "fedprox", "fedsplit", "fedcg", "fedavg_dp")

# distillation loss below this is numerical noise; stepping on it would let
# Adam's scale-invariant updates random-walk the global nets off a converged
# ensemble (any KL this small has gradients of order 1e-15)
DISTILL_KL_TOL = 1e-12

# seed-stream tags
_TAG_CLIENT_INIT = 21
_TAG_SERVER_INIT = 22
_TAG_SHUFFLE = 23
_TAG_NOISE = 24
_TAG_SERVER_DISTILL = 25
_TAG_DP = 26


class ProtocolError(RuntimeError):
    """Protocol-level failure (non-finite loss, inconsistent shapes)."""


@dataclass
class RoundConfig:
    """Hyperparameters of one federated experiment."""

    rounds: int = 100
    local_epochs: int = 20
    batch_size: int = 16
    server_iters: int = 2000
    server_batch: int = 16
    lr_task: float = 3e-4
    lr_gan: float = 3e-4
    lr_server: float = 3e-4
    weight_decay: float = 1e-4
    gamma_kind: str = "linear"
    mu_prox: float = 0.0
    dp_noise_variance: float = 0.0
    dp_clip: float = math.inf
    diversity_weight: float = 1.0
    gen_loss_mode: str = "non_saturating"
    patience: int = 10
    eval_every: int = 1

    def __post_init__(self):
        for name in ("rounds", "local_epochs", "batch_size", "server_iters",
                     "server_batch", "patience", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_task", "lr_gan", "lr_server"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "mu_prox", "dp_noise_variance", "diversity_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dp_clip <= 0:
            raise ValueError("dp_clip must be positive")
        if self.gamma_kind not in ("linear", "cosine"):
            raise ValueError(f"unknown gamma schedule '{self.gamma_kind}'")
        if self.gen_loss_mode not in ("saturating", "non_saturating"):
            raise ValueError(f"unknown generator loss mode '{self.gen_loss_mode}'")


def gamma_schedule(round_idx: int, total_rounds: int, kind: str = "linear") -> float:
    """Feature-matching weight ramp from 0 to 1 over the global rounds."""
    if not 0 <= round_idx < total_rounds:
        raise ValueError(f"round {round_idx} outside [0, {total_rounds})")
    if total_rounds == 1:
        return 0.0
    frac = round_idx / (total_rounds - 1)
    if kind == "linear":
        return frac
    if kind == "cosine":
        return 0.5 * (1.0 - math.cos(math.pi * frac))
    raise ValueError(f"unknown gamma schedule '{kind}'")


# ---------------------------------------------------------------------------
# messages: what crosses the client/server boundary
# ---------------------------------------------------------------------------

@dataclass
class FedCGUpload:
    """FedCG round upload; structurally has no extractor/discriminator slots."""

    client_id: int
    num_samples: int
    generator: dict[str, np.ndarray]
    classifier: dict[str, np.ndarray]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {f"G.{k}": v for k, v in self.generator.items()}
        out.update({f"C.{k}": v for k, v in self.classifier.items()})
        return out


@dataclass
class FedCGDownload:
    generator: dict[str, np.ndarray]
    classifier: dict[str, np.ndarray]


@dataclass
class BaselineUpload:
    """Baseline upload: the strategy-dependent shared parameter subset."""

    client_id: int
    num_samples: int
    params: dict[str, np.ndarray]


RoundMessage = FedCGUpload  # the protocol's privacy-audited message type


# ---------------------------------------------------------------------------
# participant state
# ---------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    bundle: NetworkBundle
    dataset: Dataset
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    adam_task: AdamState
    adam_gen: AdamState
    adam_disc: AdamState
    history: list = field(default_factory=list)

    @property
    def num_samples(self) -> int:
        return len(self.train_idx)


@dataclass
class ServerState:
    spec: ModelSpec
    global_extractor: Extractor
    global_classifier: Classifier
    global_generator: Generator
    adam_distill: AdamState
    weights: np.ndarray | None = None

    def baseline_params(self, include_extractor: bool) -> dict[str, np.ndarray]:
        params = {f"C.{k}": v for k, v in self.global_classifier.state().items()}
        if include_extractor:
            params.update({f"E.{k}": v for k, v in self.global_extractor.state().items()})
        return params

    def fedcg_download(self) -> FedCGDownload:
        return FedCGDownload(generator=self.global_generator.state(),
                             classifier=self.global_classifier.state())


def make_client(client_id: int, spec: ModelSpec, dataset: Dataset, part: Partition,
                config: RoundConfig, seed: int) -> ClientState:
    bundle = NetworkBundle.build(spec, seed=_derive_seed(seed, _TAG_CLIENT_INIT, client_id))
    split = part.clients[client_id]
    task_params = bundle.extractor.parameters() + bundle.classifier.parameters()
    return ClientState(
        client_id=client_id, bundle=bundle, dataset=dataset,
        train_idx=np.asarray(split.train), val_idx=np.asarray(split.val),
        test_idx=np.asarray(split.test),
        adam_task=AdamState(task_params, lr=config.lr_task, weight_decay=config.weight_decay),
        adam_gen=AdamState(bundle.generator.parameters(), lr=config.lr_gan,
                           weight_decay=config.weight_decay),
        adam_disc=AdamState(bundle.discriminator.parameters(), lr=config.lr_gan,
                            weight_decay=config.weight_decay),
    )


def make_server(spec: ModelSpec, config: RoundConfig, seed: int) -> ServerState:
    init_seed = _derive_seed(seed, _TAG_SERVER_INIT, 0)
    generator = build_generator(spec, init_seed)
    classifier = build_classifier(spec, init_seed)
    extractor = build_extractor(spec, init_seed)
    return ServerState(
        spec=spec, global_extractor=extractor, global_classifier=classifier,
        global_generator=generator,
        adam_distill=AdamState(generator.parameters() + classifier.parameters(),
                               lr=config.lr_server, weight_decay=config.weight_decay),
    )


def _derive_seed(seed: int, tag: int, *parts: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(tag), *[int(p) for p in parts]])
    return int(ss.generate_state(1, np.uint64)[0])


def _stream(seed: int, tag: int, *parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), int(tag), *[int(p) for p in parts]])))


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk):
            yield chunk


def _check_finite(value: float, context: str, client_id: int) -> None:
    if not math.isfinite(value):
        raise ProtocolError(f"non-finite {context} on client {client_id}: {value}")


# ---------------------------------------------------------------------------
# client updates
# ---------------------------------------------------------------------------

def client_update_fedcg(state: ClientState, download: FedCGDownload, gamma: float,
                        config: RoundConfig, round_idx: int, seed: int) -> tuple[FedCGUpload, dict]:
    """Two-stage local update: task training then local conditional GAN."""
    bundle = state.bundle
    spec = bundle.spec
    images, labels = state.dataset.images, state.dataset.labels
    shuffle_rng = _stream(seed, _TAG_SHUFFLE, round_idx, state.client_id)
    noise_rng = _stream(seed, _TAG_NOISE, round_idx, state.client_id)

    # stage 1: classifier replaced by the global one; extractor+classifier
    # minimize classification loss plus gamma-weighted feature matching
    # against the frozen global generator
    bundle.classifier.load_state(download.classifier)
    global_gen = Generator(spec, _stream(0, 0))
    global_gen.load_state(download.generator)
    global_gen.set_requires_grad(False)

    cls_losses, mse_losses, task_losses = [], [], []
    for _ in range(config.local_epochs):
        for batch in _batches(state.train_idx, config.batch_size, shuffle_rng):
            x = Tensor(images[batch])
            y = labels[batch]
            feats = bundle.extractor(x)
            loss_cls = T.cross_entropy(bundle.classifier(feats), y)
            if gamma != 0.0:
                z = Tensor(noise_rng.standard_normal((len(batch), spec.noise_dim)))
                target = global_gen(z, y)
                loss_mse = T.mse(feats, target)
                loss_task = T.add(loss_cls, T.mul(loss_mse, gamma))
                mse_losses.append(loss_mse.item())
            else:
                loss_task = loss_cls
                mse_losses.append(0.0)
            _check_finite(loss_task.item(), "task loss", state.client_id)
            loss_task.backward()
            state.adam_task.step()
            state.adam_task.zero_grad()
            cls_losses.append(loss_cls.item())
            task_losses.append(loss_task.item())

    # stage 2: generator replaced by the global one; with the extractor
    # frozen, alternate discriminator and generator steps per batch
    bundle.generator.load_state(download.generator)
    disc_losses, gen_losses = [], []
    for _ in range(config.local_epochs):
        for batch in _batches(state.train_idx, config.batch_size, shuffle_rng):
            x = Tensor(images[batch])
            y = labels[batch]
            with T.no_grad():
                real_feats = bundle.extractor(x)
            z = Tensor(noise_rng.standard_normal((len(batch), spec.noise_dim)))

            with T.no_grad():
                fake_const = bundle.generator(z, y)
            d_real = bundle.discriminator(real_feats, y)
            d_fake = bundle.discriminator(fake_const, y)
            loss_disc, _ = T.gan_losses(d_real, d_fake, config.gen_loss_mode)
            _check_finite(loss_disc.item(), "discriminator loss", state.client_id)
            loss_disc.backward()
            state.adam_disc.step()
            state.adam_disc.zero_grad()

            bundle.discriminator.set_requires_grad(False)
            fake = bundle.generator(z, y)
            d_fake_gen = bundle.discriminator(fake, y)
            _, loss_gen = T.gan_losses(d_real.detach(), d_fake_gen, config.gen_loss_mode)
            if config.diversity_weight > 0.0:
                z_alt = Tensor(noise_rng.standard_normal((len(batch), spec.noise_dim)))
                fake_alt = bundle.generator(z_alt, y)
                out_gap = T.tmean(T.tsum(T.pow_const(T.add(fake, T.neg(fake_alt)), 2.0),
                                         axis=(1, 2, 3)))
                noise_gap = float(np.mean(np.sum((z.data - z_alt.data) ** 2, axis=1)))
                ratio = T.mul(out_gap, 1.0 / max(noise_gap, 1e-8))
                diversity = T.div(Tensor(np.asarray(1.0)), T.add(ratio, 1e-5))
                loss_gen_total = T.add(loss_gen, T.mul(diversity, config.diversity_weight))
            else:
                loss_gen_total = loss_gen
            _check_finite(loss_gen_total.item(), "generator loss", state.client_id)
            loss_gen_total.backward()
            state.adam_gen.step()
            state.adam_gen.zero_grad()
            bundle.discriminator.set_requires_grad(True)

            disc_losses.append(loss_disc.item())
            gen_losses.append(loss_gen.item())

    upload = FedCGUpload(client_id=state.client_id, num_samples=state.num_samples,
                         generator=bundle.generator.state(),
                         classifier=bundle.classifier.state())
    metrics = {
        "loss_cls": float(np.mean(cls_losses)),
        "loss_mse": float(np.mean(mse_losses)),
        "loss_task": float(np.mean(task_losses)),
        "loss_disc": float(np.mean(disc_losses)),
        "loss_gen": float(np.mean(gen_losses)),
    }
    return upload, metrics


def _l2_norm(arrays: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


def client_update_baseline(state: ClientState, download: dict[str, np.ndarray] | None,
                           strategy: str, config: RoundConfig, round_idx: int,
                           seed: int) -> tuple[BaselineUpload | None, dict]:
    """One local update for the non-generative strategies."""
    bundle = state.bundle
    images, labels = state.dataset.images, state.dataset.labels
    shuffle_rng = _stream(seed, _TAG_SHUFFLE, round_idx, state.client_id)

    if strategy in ("fedavg", "fedprox", "fedavg_dp"):
        bundle.extractor.load_state({k[2:]: v for k, v in download.items() if k.startswith("E.")})
        bundle.classifier.load_state({k[2:]: v for k, v in download.items() if k.startswith("C.")})
    elif strategy == "fedsplit":
        bundle.classifier.load_state({k[2:]: v for k, v in download.items() if k.startswith("C.")})
    elif strategy != "local":
        raise ValueError(f"unknown baseline strategy '{strategy}'")

    prox_refs = None
    if strategy == "fedprox" and config.mu_prox != 0.0:
        prox_refs = [(p, Tensor(p.data.copy()))
                     for p in bundle.extractor.parameters() + bundle.classifier.parameters()]
    global_snapshot = None
    if strategy == "fedavg_dp":
        global_snapshot = {k: v.copy() for k, v in download.items()}

    cls_losses = []
    for _ in range(config.local_epochs):
        for batch in _batches(state.train_idx, config.batch_size, shuffle_rng):
            x = Tensor(images[batch])
            y = labels[batch]
            loss = T.cross_entropy(bundle.classifier(bundle.extractor(x)), y)
            cls_losses.append(loss.item())
            if prox_refs is not None:
                penalty = None
                for p, ref in prox_refs:
                    diff = T.add(p, T.neg(ref))
                    term = T.tsum(T.mul(diff, diff))
                    penalty = term if penalty is None else T.add(penalty, term)
                loss = T.add(loss, T.mul(penalty, 0.5 * config.mu_prox))
            _check_finite(loss.item(), "classification loss", state.client_id)
            loss.backward()
            state.adam_task.step()
            state.adam_task.zero_grad()

    metrics = {"loss_cls": float(np.mean(cls_losses)),
               "loss_task": float(np.mean(cls_losses))}

    if strategy == "local":
        return None, metrics
    if strategy == "fedsplit":
        params = {f"C.{k}": v for k, v in bundle.classifier.state().items()}
        return BaselineUpload(state.client_id, state.num_samples, params), metrics

    params = {f"E.{k}": v for k, v in bundle.extractor.state().items()}
    params.update({f"C.{k}": v for k, v in bundle.classifier.state().items()})
    if strategy == "fedavg_dp" and (config.dp_noise_variance > 0.0
                                    or math.isfinite(config.dp_clip)):
        # clip the round's parameter delta in global L2 norm, perturb with
        # Gaussian noise, and re-express as full parameters
        dp_rng = _stream(seed, _TAG_DP, round_idx, state.client_id)
        delta = {k: params[k] - global_snapshot[k] for k in params}
        norm = _l2_norm(list(delta.values()))
        if math.isfinite(config.dp_clip) and norm > config.dp_clip:
            factor = config.dp_clip / norm
            delta = {k: v * factor for k, v in delta.items()}
        if config.dp_noise_variance > 0.0:
            sigma = math.sqrt(config.dp_noise_variance)
            delta = {k: v + dp_rng.normal(0.0, sigma, size=v.shape).astype(v.dtype)
                     for k, v in delta.items()}
        params = {k: global_snapshot[k] + delta[k] for k in params}
    return BaselineUpload(state.client_id, state.num_samples, params), metrics


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def weighted_average(param_sets: list[dict[str, np.ndarray]], weights) -> dict[str, np.ndarray]:
    """Elementwise convex combination of named parameter sets."""
    if not param_sets:
        raise ValueError("nothing to average")
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(param_sets):
        raise ValueError("weights count mismatches parameter sets")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must be nonnegative and sum to 1, got sum {weights.sum()!r}")
    keys = list(param_sets[0].keys())
    for ps in param_sets[1:]:
        if list(ps.keys()) != keys:
            raise ValueError("parameter sets have mismatching names")
    out: dict[str, np.ndarray] = {}
    for key in keys:
        acc = weights[0] * param_sets[0][key]
        for w, ps in zip(weights[1:], param_sets[1:]):
            if ps[key].shape != acc.shape:
                raise ValueError(f"shape mismatch for '{key}'")
            acc = acc + w * ps[key]
        out[key] = acc.astype(param_sets[0][key].dtype)
    return out


def server_aggregate_fedcg(uploads: list[FedCGUpload], server: ServerState,
                           config: RoundConfig, round_idx: int, seed: int) -> dict:
    """Weighted-average the uploads, then distill the client ensemble into
    the global generator+classifier without touching any real data."""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    uploads = sorted(uploads, key=lambda u: u.client_id)
    sizes = np.array([u.num_samples for u in uploads], dtype=np.float64)
    weights = sizes / sizes.sum()
    server.weights = weights

    server.global_generator.load_state(weighted_average([u.generator for u in uploads], weights))
    server.global_classifier.load_state(weighted_average([u.classifier for u in uploads], weights))

    spec = server.spec
    client_gens, client_clss = [], []
    for u in uploads:
        gen = Generator(spec, _stream(0, 0))
        gen.load_state(u.generator)
        gen.set_requires_grad(False)
        cls = Classifier(spec, _stream(0, 0))
        cls.load_state(u.classifier)
        cls.set_requires_grad(False)
        client_gens.append(gen)
        client_clss.append(cls)

    rng = _stream(seed, _TAG_SERVER_DISTILL, round_idx)
    kl_trace = []
    for _ in range(config.server_iters):
        z = rng.standard_normal((config.server_batch, spec.noise_dim))
        y = rng.integers(0, spec.classes, size=config.server_batch)
        with T.no_grad():
            ensemble_logits = None
            for w, gen, cls in zip(weights, client_gens, client_clss):
                logits = cls(gen(Tensor(z), y)).data
                ensemble_logits = w * logits if ensemble_logits is None else ensemble_logits + w * logits
        p_c = T.softmax(Tensor(ensemble_logits))
        p_s = T.softmax(server.global_classifier(server.global_generator(Tensor(z), y)))
        loss = T.kl_divergence(p_c, p_s)
        value = loss.item()
        if not math.isfinite(value):
            raise ProtocolError(f"non-finite distillation KL at round {round_idx}: {value}")
        kl_trace.append(value)
        if value < DISTILL_KL_TOL:
            continue
        loss.backward()
        server.adam_distill.step()
        server.adam_distill.zero_grad()

    return {"kl_first": kl_trace[0], "kl_last": kl_trace[-1],
            "kl_mean": float(np.mean(kl_trace))}


# ---------------------------------------------------------------------------
# rounds and experiments
# ---------------------------------------------------------------------------

def _run_client(strategy: str, state: ClientState, download, gamma: float,
                config: RoundConfig, round_idx: int, seed: int):
    if strategy == "fedcg":
        return client_update_fedcg(state, download, gamma, config, round_idx, seed)
    return client_update_baseline(state, download, strategy, config, round_idx, seed)


def run_round(clients: list[ClientState], server: ServerState, strategy: str,
              round_idx: int, config: RoundConfig, seed: int,
              max_workers: int = 1) -> dict:
    """One synchronous federated round: broadcast, client updates, aggregate."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy '{strategy}'")
    gamma = gamma_schedule(round_idx, config.rounds, config.gamma_kind) if strategy == "fedcg" else 0.0

    if strategy == "fedcg":
        download = server.fedcg_download()
    elif strategy in ("fedavg", "fedprox", "fedavg_dp"):
        download = server.baseline_params(include_extractor=True)
    elif strategy == "fedsplit":
        download = server.baseline_params(include_extractor=False)
    else:
        download = None

    results: dict[int, tuple] = {}
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {
                pool.submit(_run_client, strategy, st, download, gamma, config,
                            round_idx, seed): st.client_id
                for st in clients
            }
            for fut, cid in futures.items():
                results[cid] = fut.result()
    else:
        for st in clients:
            try:
                results[st.client_id] = _run_client(strategy, st, download, gamma,
                                                    config, round_idx, seed)
            except ProtocolError as exc:
                raise ProtocolError(f"round {round_idx} aborted: {exc}") from exc

    uploads = [results[st.client_id][0] for st in sorted(clients, key=lambda s: s.client_id)]
    client_metrics = {st.client_id: results[st.client_id][1] for st in clients}
    server_metrics: dict = {"gamma": gamma}

    if strategy == "fedcg":
        server_metrics.update(server_aggregate_fedcg(uploads, server, config, round_idx, seed))
    elif strategy in ("fedavg", "fedprox", "fedavg_dp"):
        sizes = np.array([u.num_samples for u in uploads], dtype=np.float64)
        merged = weighted_average([u.params for u in uploads], sizes / sizes.sum())
        server.global_extractor.load_state({k[2:]: v for k, v in merged.items() if k.startswith("E.")})
        server.global_classifier.load_state({k[2:]: v for k, v in merged.items() if k.startswith("C.")})
    elif strategy == "fedsplit":
        sizes = np.array([u.num_samples for u in uploads], dtype=np.float64)
        merged = weighted_average([u.params for u in uploads], sizes / sizes.sum())
        server.global_classifier.load_state({k[2:]: v for k, v in merged.items() if k.startswith("C.")})

    return {"round": round_idx, "client_metrics": client_metrics,
            "server_metrics": server_metrics, "uploads": uploads}


def evaluate_accuracy(extractor: Extractor, classifier: Classifier, dataset: Dataset,
                      indices: np.ndarray, batch_size: int = 64) -> float:
    if len(indices) == 0:
        return float("nan")
    correct = 0
    with T.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            logits = classifier(extractor(Tensor(dataset.images[chunk])))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == dataset.labels[chunk]))
    return correct / len(indices)


@dataclass
class ClientProgress:
    """Early-stopping bookkeeping: the reported metric freezes at the round
    with the best validation accuracy once patience runs out; protocol
    participation continues."""

    best_val: float = -1.0
    best_test: float = 0.0
    best_round: int = -1
    rounds_since_improvement: int = 0
    stopped: bool = False

    def observe(self, val_acc: float, test_acc: float, round_idx: int, patience: int) -> None:
        if self.stopped:
            return
        if val_acc > self.best_val:
            self.best_val = val_acc
            self.best_test = test_acc
            self.best_round = round_idx
            self.rounds_since_improvement = 0
        else:
            self.rounds_since_improvement += 1
            if self.rounds_since_improvement > patience:
                self.stopped = True


@dataclass
class SeedRunResult:
    seed: int
    records: list       # MetricsRecord rows (built lazily by the harness)
    best_accuracy: dict[int, float]
    mean_best_accuracy: float
    uploads_log: list | None = None


def run_seed(dataset: Dataset, part: Partition, spec: ModelSpec, config: RoundConfig,
             strategy: str, seed: int, max_workers: int = 1,
             collect_uploads: bool = False, progress=None) -> SeedRunResult:
    """One full R-round federated run for a single seed."""
    clients = [make_client(cid, spec, dataset, part, config, seed)
               for cid in range(part.num_clients)]
    server = make_server(spec, config, seed)
    trackers = {c.client_id: ClientProgress() for c in clients}
    rows: list[tuple] = []
    uploads_log: list = [] if collect_uploads else None

    for r in range(config.rounds):
        outcome = run_round(clients, server, strategy, r, config, seed, max_workers)
        if collect_uploads:
            uploads_log.append(outcome["uploads"])
        for cid, metrics in sorted(outcome["client_metrics"].items()):
            for name, value in metrics.items():
                rows.append((r, f"client{cid}", name, value))
        for name, value in outcome["server_metrics"].items():
            rows.append((r, "server", name, value))

        if (r + 1) % config.eval_every == 0 or r == config.rounds - 1:
            for c in clients:
                val_acc = evaluate_accuracy(c.bundle.extractor, c.bundle.classifier,
                                            dataset, c.val_idx)
                test_acc = evaluate_accuracy(c.bundle.extractor, c.bundle.classifier,
                                             dataset, c.test_idx)
                trackers[c.client_id].observe(val_acc, test_acc, r, config.patience)
                rows.append((r, f"client{c.client_id}", "val_accuracy", val_acc))
                rows.append((r, f"client{c.client_id}", "test_accuracy", test_acc))
        if progress is not None:
            progress(strategy, seed, r)

    best = {c.client_id: trackers[c.client_id].best_test for c in clients}
    for cid, acc in sorted(best.items()):
        rows.append((config.rounds - 1, f"client{cid}", "best_test_accuracy", acc))
    mean_best = float(np.mean(list(best.values())))
    rows.append((config.rounds - 1, "server", "mean_best_test_accuracy", mean_best))
    return SeedRunResult(seed=seed, records=rows, best_accuracy=best,
                         mean_best_accuracy=mean_best, uploads_log=uploads_log)
