"""Data partitioning, the communication-round protocol and baselines.

A "batch" here is one data silo. Homogeneous partitions split every class
evenly; heterogeneous partitions draw per-class batch proportions from a
symmetric Dirichlet (concentration 0.5 by default), which deliberately
leaves some batches without examples of some classes. The matched-fusion
protocol trains locals, fuses them into a global network, and on later
rounds re-initializes every local neuron with its matched global atom
before training again with a decayed learning rate and a fresh optimizer.
Federated averaging, output ensembling and k-means clustering of neuron
vectors serve as comparison aggregators.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist

from .datasets import Dataset
from .deep import GlobalNetwork, forward_global, local_params_from_global, \
    match_multilayer
from .matching import MatchSchedule, MatchTimings
from .nets import MLPParams, TrainConfig, evaluate, forward, from_atoms, \
    init_params, to_atoms, train
from .validation import as_float_matrix

__all__ = [
    "DEFAULT_SIGMA_GRID",
    "Partition",
    "RoundLog",
    "partition_homogeneous",
    "partition_heterogeneous",
    "train_local_batches",
    "federate_pfnm",
    "aggregate_ensemble",
    "ensemble_proba",
    "aggregate_fedavg",
    "aggregate_kmeans",
    "lloyd_kmeans",
]

# Candidate observation variances for the optional grid search; the chosen
# value maximizes the fused model's training accuracy.
DEFAULT_SIGMA_GRID = (0.1, 1.0, 10.0)


@dataclass(frozen=True)
class Partition:
    """Disjoint per-batch index lists covering a dataset."""

    indices: tuple
    strategy: str
    seed: int
    concentration: float | None = None

    def __post_init__(self):
        idx = tuple(np.asarray(i, dtype=np.int64) for i in self.indices)
        total = np.concatenate(idx) if idx else np.empty(0, dtype=np.int64)
        if np.unique(total).size != total.size:
            raise ValueError("partition index lists overlap")
        object.__setattr__(self, "indices", idx)

    @property
    def num_batches(self) -> int:
        return len(self.indices)

    def sizes(self) -> tuple:
        return tuple(int(i.size) for i in self.indices)

    def check_covers(self, n: int) -> None:
        total = np.sort(np.concatenate(self.indices))
        if total.size != n or not np.array_equal(total, np.arange(n)):
            raise ValueError(f"partition does not cover 0..{n - 1} exactly")


def partition_homogeneous(dataset: Dataset, num_batches: int, seed) -> Partition:
    """Per-class shuffled split into near-equal parts.

    Within every class the per-batch counts differ by at most one. Warns
    when a class has fewer examples than batches (some batches then miss
    that class).
    """
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(num_batches)]
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y == k)
        if idx.size < num_batches:
            warnings.warn(
                f"class {k} has {idx.size} examples for {num_batches} batches; "
                "some batches will miss it",
                stacklevel=2,
            )
        rng.shuffle(idx)
        for j, chunk in enumerate(np.array_split(idx, num_batches)):
            parts[j].append(chunk)
    indices = tuple(np.sort(np.concatenate(p)) for p in parts)
    part = Partition(indices, strategy="homogeneous", seed=seed)
    part.check_covers(len(dataset))
    return part


def partition_heterogeneous(dataset: Dataset, num_batches: int,
                            concentration: float = 0.5, seed=None) -> Partition:
    """Dirichlet-proportioned split; batch sizes and class mixes vary.

    Per class, proportions are drawn from Dir(concentration, ..) and
    converted to integer counts by largest-remainder rounding, so class
    totals are exact. A batch that ends up empty is an error (it cannot
    train a network); re-run with a different seed.
    """
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(num_batches)]
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y == k)
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(num_batches, float(concentration)))
        quota = np.floor(p * idx.size).astype(np.int64)
        remainder = idx.size - int(quota.sum())
        if remainder:
            frac = p * idx.size - quota
            quota[np.argsort(-frac, kind="stable")[:remainder]] += 1
        stop = np.cumsum(quota)
        start = stop - quota
        for j in range(num_batches):
            parts[j].append(idx[start[j]:stop[j]])
    indices = tuple(np.sort(np.concatenate(p)) for p in parts)
    empty = [j for j, i in enumerate(indices) if i.size == 0]
    if empty:
        raise ValueError(
            f"batches {empty} received no examples under Dirichlet"
            f"({concentration}) with seed {seed}; an empty batch cannot train "
            "a network, try another seed"
        )
    part = Partition(indices, strategy="heterogeneous", seed=seed,
                     concentration=float(concentration))
    part.check_covers(len(dataset))
    return part


@dataclass(frozen=True)
class RoundLog:
    """Metrics of one communication round."""

    round_index: int
    layer_sizes: tuple
    global_accuracy: float
    local_accuracies: tuple
    log_size_ratio: float
    seconds: float


def _train_seed(base_seed, round_index: int, batch: int):
    return np.random.SeedSequence(base_seed, spawn_key=(round_index, batch))


def _init_seed(base_seed, batch: int):
    return np.random.SeedSequence(base_seed, spawn_key=(0, batch))


def train_local_batches(train_data: Dataset, partition: Partition,
                        hidden_sizes, cfg: TrainConfig,
                        activation: str = "relu",
                        round_index: int = 1,
                        initial: list | None = None) -> list:
    """Independently train one network per batch (round 1 of any protocol).

    Initializations and epoch shuffles are derived from cfg.seed per
    (round, batch), so re-running with the same inputs is bit-identical.
    """
    locals_out = []
    for j, idx in enumerate(partition.indices):
        if initial is not None:
            params = initial[j]
        else:
            params = init_params(train_data.input_dim, hidden_sizes,
                                 train_data.num_classes,
                                 seed=_init_seed(cfg.seed, j),
                                 activation=activation,
                                 init_scale=cfg.init_scale,
                                 init_scale_is_variance=cfg.init_scale_is_variance,
                                 bias_init=cfg.bias_init)
        cfg_j = replace(cfg, seed=_train_seed(cfg.seed, round_index, j))
        locals_out.append(train(params, train_data.X[idx], train_data.y[idx], cfg_j))
    return locals_out


def _fuse(local_models, priors, schedule, sigma_grid, train_data, timings):
    """Match once, or grid-search sigma_sq on fused training accuracy."""
    if not sigma_grid:
        return match_multilayer(local_models, priors, schedule, timings), None
    if sigma_grid is True:
        sigma_grid = DEFAULT_SIGMA_GRID
    base = priors if isinstance(priors, (list, tuple)) else [priors]
    best = None
    for s2 in sigma_grid:
        cand_priors = [replace(p, sigma_sq=float(s2)) for p in base]
        if len(cand_priors) == 1:
            cand_priors = cand_priors[0]
        net = match_multilayer(local_models, cand_priors, schedule, timings)
        acc = evaluate(net.params, train_data.X, train_data.y)
        if best is None or acc > best[0]:
            best = (acc, net, float(s2))
    return best[1], best[2]


def federate_pfnm(train_data: Dataset, test_data: Dataset, partition: Partition,
                  hidden_sizes, cfg: TrainConfig, priors,
                  rounds: int = 1, later_epochs: int = 5,
                  lr_decay: float = 0.99, activation: str = "relu",
                  sigma_grid=None, initial_locals: list | None = None,
                  timings: MatchTimings | None = None,
                  match_seed=None, max_passes: int = 10):
    """Train-and-match communication protocol.

    Round 1 trains locals from scratch (or adopts ``initial_locals`` as the
    already-trained round-1 models, so callers can reuse a shared cache) and
    fuses them; each later round re-initializes every local with its
    matched slice of the global network, trains ``later_epochs`` epochs
    with the learning rate decayed by ``lr_decay`` per completed round and
    a fresh optimizer, then re-matches. Local layer widths stay constant
    across rounds. Returns the final global network and one RoundLog per
    round.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    match_seed = cfg.seed if match_seed is None else match_seed
    n_batches = partition.num_batches
    total_local = None
    logs = []
    network = None
    local_models = None

    for t in range(1, rounds + 1):
        tic = time.perf_counter()
        lr_t = cfg.learning_rate * (lr_decay ** (t - 1))
        if t == 1:
            if initial_locals is not None:
                local_models = list(initial_locals)
            else:
                cfg_t = replace(cfg, learning_rate=lr_t)
                local_models = train_local_batches(train_data, partition,
                                                   hidden_sizes, cfg_t,
                                                   activation, round_index=1)
            total_local = sum(sum(p.hidden_sizes) for p in local_models)
        else:
            widths = [p.hidden_sizes for p in local_models]
            reinit = [local_params_from_global(network, j) for j in range(n_batches)]
            for j, p in enumerate(reinit):
                if p.hidden_sizes != widths[j]:
                    raise AssertionError(
                        f"batch {j} width changed across rounds: "
                        f"{widths[j]} -> {p.hidden_sizes}"
                    )
            cfg_t = replace(cfg, epochs=later_epochs, learning_rate=lr_t)
            local_models = train_local_batches(train_data, partition, hidden_sizes,
                                               cfg_t, activation,
                                               round_index=t, initial=reinit)
        schedule = MatchSchedule(
            seed=np.random.SeedSequence(match_seed, spawn_key=(t,)),
            max_passes=max_passes,
        )
        network, _ = _fuse(local_models, priors, schedule, sigma_grid,
                           train_data, timings)
        seconds = time.perf_counter() - tic
        logs.append(RoundLog(
            round_index=t,
            layer_sizes=network.layer_sizes,
            global_accuracy=evaluate(network.params, test_data.X, test_data.y),
            local_accuracies=tuple(evaluate(p, test_data.X, test_data.y)
                                   for p in local_models),
            log_size_ratio=float(np.log(sum(network.layer_sizes) / total_local)),
            seconds=seconds,
        ))
    return network, logs


def _member_proba(member, X):
    if isinstance(member, MLPParams):
        return forward(member, X)
    if isinstance(member, GlobalNetwork):
        return forward_global(member, X)
    proba = getattr(member, "predict_proba", None)
    if proba is not None:
        return np.asarray(proba(X), dtype=np.float64)
    params = getattr(member, "params", None)
    if isinstance(params, MLPParams):
        return forward(params, X)
    raise TypeError(f"cannot get probabilities from {type(member).__name__}")


def ensemble_proba(members, X) -> np.ndarray:
    """Mean of the members' class-probability outputs."""
    if len(members) == 0:
        raise ValueError("members must be non-empty")
    probs = np.stack([_member_proba(m, X) for m in members])
    if probs.ndim != 3 or len({p.shape for p in probs}) > 1:
        raise ValueError("members disagree on output shape")
    return probs.mean(axis=0)


def aggregate_ensemble(members, X) -> np.ndarray:
    """Predicted class = argmax of the averaged member probabilities."""
    return np.argmax(ensemble_proba(members, X), axis=1)


def aggregate_fedavg(train_data: Dataset, partition: Partition, hidden_sizes,
                     cfg: TrainConfig, rounds: int = 1, later_epochs: int = 5,
                     weighted: bool = True, activation: str = "relu",
                     on_round=None) -> MLPParams:
    """Coordinate-wise averaging of identically initialized locals.

    Every round broadcasts the current global parameters, trains each batch
    locally, and replaces the global with the data-size-weighted average of
    the locals (``weighted=False`` selects the plain mean). All batches
    participate every round.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    sizes = np.asarray(partition.sizes(), dtype=np.float64)
    weights = sizes / sizes.sum() if weighted else np.full(len(sizes), 1.0 / len(sizes))

    global_params = init_params(train_data.input_dim, hidden_sizes,
                                train_data.num_classes,
                                seed=_init_seed(cfg.seed, 0),
                                activation=activation,
                                init_scale=cfg.init_scale,
                                init_scale_is_variance=cfg.init_scale_is_variance,
                                bias_init=cfg.bias_init)
    for t in range(1, rounds + 1):
        epochs_t = cfg.epochs if t == 1 else later_epochs
        cfg_t = replace(cfg, epochs=epochs_t)
        local_models = train_local_batches(
            train_data, partition, hidden_sizes, cfg_t, activation,
            round_index=t, initial=[global_params] * partition.num_batches)
        merged = global_params.copy()
        for i in range(len(merged.weights)):
            merged.weights[i] = np.tensordot(
                weights, np.stack([p.weights[i] for p in local_models]), axes=1)
            merged.biases[i] = np.tensordot(
                weights, np.stack([p.biases[i] for p in local_models]), axes=1)
        global_params = merged
        if on_round is not None:
            on_round(t, global_params, local_models)
    return global_params


def lloyd_kmeans(points, n_clusters: int, seed, max_iter: int = 300,
                 rel_tol: float = 1e-6):
    """Seeded farthest-point initialization plus Lloyd iterations.

    Stops when the relative inertia improvement drops below ``rel_tol`` or
    after ``max_iter`` rounds; a cluster that empties keeps its previous
    center. Returns (centers, labels, inertia).
    """
    points = as_float_matrix(points, "points")
    n = points.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters must be in 1..{n}, got {n_clusters}")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    d2 = cdist(points, points[chosen[-1]][None, :], "sqeuclidean").ravel()
    while len(chosen) < n_clusters:
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, cdist(points, points[nxt][None, :], "sqeuclidean").ravel())
    centers = points[chosen].copy()

    labels = None
    prev_inertia = np.inf
    for _ in range(max_iter):
        dist = cdist(points, centers, "sqeuclidean")
        labels = np.argmin(dist, axis=1)
        inertia = float(dist[np.arange(n), labels].sum())
        for c in range(n_clusters):
            members = labels == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
        if prev_inertia - inertia <= rel_tol * max(prev_inertia, 1e-300):
            break
        prev_inertia = inertia
    dist = cdist(points, centers, "sqeuclidean")
    labels = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(n), labels].sum())
    return centers, labels, inertia


def aggregate_kmeans(local_models, n_clusters: int | None = None,
                     seed=0) -> GlobalNetwork:
    """Cluster pooled neuron vectors of single-hidden-layer locals.

    Unlike matching, clustering may merge several neurons of one batch.
    The default cluster count is min(500, 50 J); it is clamped (with a
    warning) when it exceeds the pooled neuron count. Cluster centroids
    become the global hidden layer; empty clusters are dropped and the
    output bias is the mean of the locals' output biases.
    """
    if not local_models:
        raise ValueError("at least one local network is required")
    for j, p in enumerate(local_models):
        if len(p.weights) != 2:
            raise ValueError(
                f"batch {j} has {len(p.weights) - 1} hidden layers; the "
                "clustering baseline is defined for single-hidden-layer nets"
            )
    n_batches = len(local_models)
    pool = np.vstack([to_atoms(p)[0] for p in local_models])
    if n_clusters is None:
        n_clusters = min(500, 50 * n_batches)
    if n_clusters > pool.shape[0]:
        warnings.warn(
            f"n_clusters {n_clusters} exceeds the {pool.shape[0]} pooled "
            "neurons; clamping",
            stacklevel=2,
        )
        n_clusters = pool.shape[0]

    centers, labels, _ = lloyd_kmeans(pool, n_clusters, seed)
    occupied = np.isin(np.arange(n_clusters), labels)
    centers = centers[occupied]
    counts = np.bincount(labels, minlength=n_clusters)[occupied]

    d_in = local_models[0].input_dim
    d_out = local_models[0].output_dim
    out_bias = np.mean([p.biases[-1] for p in local_models], axis=0)
    params = from_atoms([centers], d_in, d_out, out_bias,
                        local_models[0].activation)
    return GlobalNetwork(params=params, layer_sizes=(centers.shape[0],),
                         match_counts=(counts,), layer_assignments=None)
