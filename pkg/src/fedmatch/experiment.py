"""Config-driven experiment orchestration, persistence and benchmarks.

A run is: for each seed, partition the data, train the local networks
(cached so every method in the run compares against identical locals),
apply the requested aggregation method(s), and log per-round metrics. The
normalized model size is ln(L / sum_j L_j), the natural log of the global
neuron count over the pooled local neuron count.

Outputs: ``results.json`` (full record, includes real wall-clock),
``rounds.csv`` (one row per seed/method/round; the seconds column is
zeroed unless record_wall_clock is set, so identical configs produce
byte-identical files) and ``model.json`` (the first fused model with
enough metadata to reproduce its recorded accuracy exactly).
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset, generate_synthetic, load_mnist
from .federation import Partition, aggregate_ensemble, aggregate_fedavg, \
    aggregate_kmeans, federate_pfnm, partition_heterogeneous, \
    partition_homogeneous, train_local_batches
from .matching import MatchSchedule, MatchTimings, PriorConfig, \
    match_single_layer
from .nets import MLPParams, TrainConfig, evaluate
from .validation import check_positive

__all__ = [
    "ExperimentConfig",
    "ResultRecord",
    "run_experiment",
    "emit_results",
    "save_model",
    "load_model",
    "adversarial_atom_sets",
    "benchmark_matching",
    "loglog_slope",
]

METHODS = ("pfnm", "pfnm_rounds", "fedavg", "ensemble", "kmeans", "local")
_MODEL_METHODS = ("pfnm", "pfnm_rounds", "kmeans", "fedavg")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; JSON-serializable."""

    dataset: str = "synthetic"
    data_dir: str | None = None
    subset: int | None = None
    subset_test: int | None = None
    partition: str = "homogeneous"
    batches: int = 5
    concentration: float = 0.5
    methods: tuple = ("pfnm",)
    layers: int = 1
    neurons: int = 100
    rounds: int = 1
    sigma0_sq: float = 10.0
    sigma_sq: float = 1.0
    gamma0: float = 1.0
    sigma_sq_grid: tuple | None = None
    seeds: tuple = (0,)
    out: str | None = None
    learning_rate: float = 0.01
    l2: float = 1e-6
    batch_size: int = 32
    epochs: int = 10
    later_epochs: int = 5
    lr_decay: float = 0.99
    optimizer: str = "amsgrad"
    fedavg_optimizer: str = "sgd"
    activation: str = "relu"
    max_passes: int = 10
    weighted_fedavg: bool = True
    kmeans_clusters: int | None = None
    synthetic_dim: int = 50
    synthetic_classes: int = 10
    synthetic_per_class: int = 150
    synthetic_test_per_class: int = 50
    synthetic_spread: float = 1.0
    synthetic_seed: int = 7
    record_wall_clock: bool = False

    def validate(self) -> None:
        if self.dataset not in ("mnist", "synthetic"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "mnist":
            if not self.data_dir:
                raise ValueError("dataset=mnist requires data_dir")
            if not Path(self.data_dir).is_dir():
                raise ValueError(f"data_dir {self.data_dir} does not exist")
        if self.partition not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown partition {self.partition!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.batches < 1 or self.layers < 1 or self.neurons < 1 or self.rounds < 1:
            raise ValueError("batches, layers, neurons and rounds must be >= 1")
        check_positive(self.sigma0_sq, "sigma0_sq")
        check_positive(self.sigma_sq, "sigma_sq")
        check_positive(self.gamma0, "gamma0")
        check_positive(self.concentration, "concentration")

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        kwargs = dict(data)
        for key in ("methods", "seeds", "sigma_sq_grid"):
            if key in kwargs and kwargs[key] is not None \
                    and not isinstance(kwargs[key], bool):
                kwargs[key] = tuple(kwargs[key])
        unknown = set(kwargs) - set(ExperimentConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("methods", "seeds", "sigma_sq_grid"):
            if out[key] is not None and not isinstance(out[key], bool):
                out[key] = list(out[key])
        return out


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class ResultRecord:
    """Per-seed, per-round metrics plus aggregates, all JSON-ready."""

    config: dict
    config_hash: str
    rows: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    model: dict | None = None


def _dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.X).tobytes())
    h.update(np.ascontiguousarray(ds.y).tobytes())
    h.update(str(ds.num_classes).encode())
    return h.hexdigest()[:16]


_LOCALS_CACHE: "OrderedDict[tuple, list]" = OrderedDict()
_LOCALS_CACHE_LIMIT = 8


def _cached_locals(train_data: Dataset, partition: Partition, hidden_sizes,
                   cfg: TrainConfig, activation: str, data_key: str) -> list:
    key = (data_key, partition.strategy, partition.seed, partition.concentration,
           partition.num_batches, tuple(hidden_sizes), activation,
           cfg.seed, cfg.learning_rate, cfg.l2, cfg.batch_size, cfg.epochs,
           cfg.optimizer, cfg.init_scale, cfg.init_scale_is_variance,
           cfg.bias_init)
    if key in _LOCALS_CACHE:
        _LOCALS_CACHE.move_to_end(key)
        return _LOCALS_CACHE[key]
    models = train_local_batches(train_data, partition, hidden_sizes, cfg,
                                 activation, round_index=1)
    _LOCALS_CACHE[key] = models
    while len(_LOCALS_CACHE) > _LOCALS_CACHE_LIMIT:
        _LOCALS_CACHE.popitem(last=False)
    return models


def clear_locals_cache() -> None:
    _LOCALS_CACHE.clear()


def load_experiment_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Resolve the configured dataset into (train, test), subsets applied."""
    if cfg.dataset == "mnist":
        train_data, test_data = load_mnist(cfg.data_dir)
    else:
        per_class = cfg.synthetic_per_class + cfg.synthetic_test_per_class
        full = generate_synthetic(cfg.synthetic_dim, cfg.synthetic_classes,
                                  per_class, cfg.synthetic_spread,
                                  cfg.synthetic_seed)
        n_train = cfg.synthetic_per_class * cfg.synthetic_classes
        train_data = full.head(n_train)
        test_data = full.subset(np.arange(n_train, len(full)))
    if cfg.subset is not None:
        train_data = train_data.head(int(cfg.subset))
    if cfg.subset_test is not None:
        test_data = test_data.head(int(cfg.subset_test))
    return train_data, test_data


def _make_partition(cfg: ExperimentConfig, train_data: Dataset, seed: int) -> Partition:
    if cfg.partition == "homogeneous":
        return partition_homogeneous(train_data, cfg.batches, seed)
    return partition_heterogeneous(train_data, cfg.batches, cfg.concentration, seed)


def _train_cfg(cfg: ExperimentConfig, seed: int, optimizer: str) -> TrainConfig:
    return TrainConfig(seed=seed, learning_rate=cfg.learning_rate, l2=cfg.l2,
                       batch_size=cfg.batch_size, epochs=cfg.epochs,
                       optimizer=optimizer)


def _row(seed, round_index, method, accuracy, global_size, total_local, seconds):
    return {
        "seed": int(seed),
        "round": int(round_index),
        "method": method,
        "accuracy": float(accuracy),
        "global_size": int(global_size),
        "log_size_ratio": float(np.log(global_size / total_local)),
        "seconds": float(seconds),
    }


def _run_method(cfg, method, train_data, test_data, partition, seed, data_key):
    """One aggregation method on one seed; returns (rows, detail, model|None)."""
    hidden = (cfg.neurons,) * cfg.layers
    total_local = cfg.batches * cfg.neurons * cfg.layers
    prior = PriorConfig(sigma0_sq=cfg.sigma0_sq, sigma_sq=cfg.sigma_sq,
                        gamma0=cfg.gamma0, num_batches=partition.num_batches)
    base_cfg = _train_cfg(cfg, seed, cfg.optimizer)

    if method == "fedavg":
        fed_cfg = _train_cfg(cfg, seed, cfg.fedavg_optimizer)
        rows = []
        tic = time.perf_counter()

        def on_round(t, params, _locals):
            nonlocal tic
            acc = evaluate(params, test_data.X, test_data.y)
            rows.append(_row(seed, t, method, acc, sum(hidden), total_local,
                             time.perf_counter() - tic))
            tic = time.perf_counter()

        final = aggregate_fedavg(train_data, partition, hidden, fed_cfg,
                                 rounds=cfg.rounds, later_epochs=cfg.later_epochs,
                                 weighted=cfg.weighted_fedavg,
                                 activation=cfg.activation, on_round=on_round)
        return rows, {}, final

    locals_models = _cached_locals(train_data, partition, hidden, base_cfg,
                                   cfg.activation, data_key)
    local_accs = [evaluate(p, test_data.X, test_data.y) for p in locals_models]

    if method == "local":
        t0 = time.perf_counter()
        rows = [_row(seed, 1, method, float(np.mean(local_accs)),
                     total_local, total_local, time.perf_counter() - t0)]
        return rows, {"local_accuracies": local_accs}, None

    if method == "ensemble":
        t0 = time.perf_counter()
        preds = aggregate_ensemble(locals_models, test_data.X)
        acc = float(np.mean(preds == test_data.y))
        rows = [_row(seed, 1, method, acc, total_local, total_local,
                     time.perf_counter() - t0)]
        return rows, {"local_accuracies": local_accs}, None

    if method == "kmeans":
        t0 = time.perf_counter()
        net = aggregate_kmeans(locals_models, n_clusters=cfg.kmeans_clusters,
                               seed=seed)
        acc = evaluate(net.params, test_data.X, test_data.y)
        rows = [_row(seed, 1, method, acc, sum(net.layer_sizes), total_local,
                     time.perf_counter() - t0)]
        return rows, {"local_accuracies": local_accs}, net

    if method in ("pfnm", "pfnm_rounds"):
        rounds = cfg.rounds if method == "pfnm_rounds" else 1
        network, logs = federate_pfnm(
            train_data, test_data, partition, hidden, base_cfg, prior,
            rounds=rounds, later_epochs=cfg.later_epochs, lr_decay=cfg.lr_decay,
            activation=cfg.activation, sigma_grid=cfg.sigma_sq_grid,
            initial_locals=locals_models, max_passes=cfg.max_passes)
        rows = [_row(seed, log.round_index, method, log.global_accuracy,
                     sum(log.layer_sizes), total_local, log.seconds)
                for log in logs]
        detail = {
            "local_accuracies": [list(log.local_accuracies) for log in logs],
            "layer_sizes": [list(log.layer_sizes) for log in logs],
        }
        return rows, detail, network

    raise ValueError(f"unknown method {method!r}")


def run_experiment(cfg: ExperimentConfig) -> ResultRecord:
    """Execute every (seed, method) cell; failures skip the seed's remainder.

    The record's rows are ordered by seed, then method (in config order),
    then round, and are fully reproducible for a fixed config.
    """
    cfg.validate()
    record = ResultRecord(config=cfg.to_dict(), config_hash=config_hash(cfg))
    train_data, test_data = load_experiment_data(cfg)
    data_key = _dataset_fingerprint(train_data)

    for seed in cfg.seeds:
        try:
            partition = _make_partition(cfg, train_data, seed)
            seed_rows = []
            seed_details = {}
            for method in cfg.methods:
                rows, detail, model = _run_method(
                    cfg, method, train_data, test_data, partition, seed, data_key)
                seed_rows.extend(rows)
                if detail:
                    seed_details[method] = detail
                if (record.model is None and model is not None
                        and method in _MODEL_METHODS):
                    record.model = {
                        "seed": int(seed),
                        "method": method,
                        "round": rows[-1]["round"],
                        "accuracy": rows[-1]["accuracy"],
                        "network": _network_to_dict(model),
                    }
        except Exception as exc:  # noqa: BLE001 - a failed seed must not kill the run
            record.failures.append({"seed": int(seed), "error": f"{type(exc).__name__}: {exc}"})
            continue
        record.rows.extend(seed_rows)
        if seed_details:
            record.details[str(seed)] = seed_details

    for method in cfg.methods:
        finals = {}
        for r in record.rows:
            if r["method"] == method:
                finals[r["seed"]] = r["accuracy"]  # overwritten -> last round
        if finals:
            vals = np.asarray(list(finals.values()))
            record.summary[method] = {
                "mean_accuracy": float(vals.mean()),
                "std_accuracy": float(vals.std()),
                "n_seeds": int(vals.size),
            }
    return record


def _network_to_dict(model) -> dict:
    params = model if isinstance(model, MLPParams) else model.params
    layer_sizes = (list(getattr(model, "layer_sizes", ())) or
                   list(params.hidden_sizes))
    return {
        "activation": params.activation,
        "input_dim": params.input_dim,
        "output_dim": params.output_dim,
        "layer_sizes": layer_sizes,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def _network_from_dict(data: dict) -> MLPParams:
    return MLPParams([np.asarray(w, dtype=np.float64) for w in data["weights"]],
                     [np.asarray(b, dtype=np.float64) for b in data["biases"]],
                     data["activation"])


def save_model(model, path, metadata: dict | None = None) -> None:
    """Serialize a network as JSON with full float64 round-trip precision."""
    payload = dict(metadata or {})
    payload["network"] = _network_to_dict(model)
    Path(path).write_text(json.dumps(payload, indent=1))


def load_model(path) -> tuple[MLPParams, dict]:
    payload = json.loads(Path(path).read_text())
    params = _network_from_dict(payload["network"])
    meta = {k: v for k, v in payload.items() if k != "network"}
    return params, meta


CSV_HEADER = "seed,round,method,accuracy,global_size,log_size_ratio,seconds"


def emit_results(record: ResultRecord, out_dir) -> dict:
    """Write results.json, rounds.csv and model.json into out_dir."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValueError(f"output directory {out} is not writable: {exc}") from exc

    paths = {"results": out / "results.json", "rounds": out / "rounds.csv"}
    paths["results"].write_text(json.dumps(
        {k: getattr(record, k) for k in
         ("config", "config_hash", "rows", "details", "summary", "failures")},
        indent=1))

    keep_seconds = bool(record.config.get("record_wall_clock", False))
    lines = [CSV_HEADER]
    for r in record.rows:
        seconds = r["seconds"] if keep_seconds else 0.0
        lines.append(",".join([
            repr(r["seed"]), repr(r["round"]), r["method"],
            repr(r["accuracy"]), repr(r["global_size"]),
            repr(r["log_size_ratio"]), repr(float(seconds)),
        ]))
    paths["rounds"].write_text("\n".join(lines) + "\n")

    if record.model is not None:
        paths["model"] = out / "model.json"
        meta = {k: v for k, v in record.model.items() if k != "network"}
        paths["model"].write_text(json.dumps(
            {**meta, "network": record.model["network"]}, indent=1))
    return paths


def adversarial_atom_sets(num_batches: int, per_batch: int, dim: int, seed=0):
    """Random atom sets scaled so that no cross-batch match is ever optimal."""
    rng = np.random.default_rng(seed)
    scale = 10.0
    return [rng.normal(0.0, scale, size=(per_batch, dim))
            for _ in range(num_batches)]


def benchmark_matching(per_batch_sizes, num_batches: int = 4, dim: int = 256,
                       seed: int = 0, sigma0_sq: float = 10.0,
                       repeats: int = 1) -> list:
    """Time cost construction and assignment solving on no-match inputs.

    Worst-case inputs keep every neuron unmatched, so the global atom count
    reaches its maximum and the per-layer costs scale with J * L_j. With
    repeats > 1 each size is run several times and the fastest timing kept,
    the usual defense against scheduler noise.
    """
    results = []
    for per_batch in per_batch_sizes:
        atom_sets = adversarial_atom_sets(num_batches, per_batch, dim, seed)
        prior = PriorConfig(sigma0_sq=sigma0_sq, sigma_sq=1.0, gamma0=1.0,
                            num_batches=num_batches)
        best = None
        for _ in range(max(1, repeats)):
            timings = MatchTimings()
            result = match_single_layer(atom_sets, prior,
                                        MatchSchedule(seed=seed, max_passes=2),
                                        timings)
            if result.num_atoms != num_batches * per_batch:
                raise AssertionError(
                    "benchmark inputs matched unexpectedly: "
                    f"{result.num_atoms} atoms for {num_batches * per_batch} neurons"
                )
            if best is None or timings.cost_seconds + timings.solve_seconds < \
                    best.cost_seconds + best.solve_seconds:
                best = timings
        results.append({
            "per_batch": int(per_batch),
            "n_total": int(num_batches * per_batch),
            "cost_seconds": best.cost_seconds,
            "solve_seconds": best.solve_seconds,
            "num_solves": best.num_solves,
        })
    return results


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs = np.log(np.asarray(xs, dtype=np.float64))
    ys = np.log(np.asarray(ys, dtype=np.float64))
    return float(np.polyfit(xs, ys, 1)[0])
