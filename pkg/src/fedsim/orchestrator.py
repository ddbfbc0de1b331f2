"""Federated round loop: sampling, local updates, weighted aggregation.

A run is a pure function of (config, seed). Every random draw comes from a
generator keyed by (seed, purpose, round, client), never from shared mutable
state, so client updates can run serially or in a process pool with bitwise
identical results, and a run resumed from a checkpoint continues exactly the
trajectory of an uninterrupted one.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .data import LabeledDataset, Partition, dirichlet_partition, \
    make_synthetic_mixture, train_test_split
from .methods import ClientContext, MethodConfig, client_update
from .models import BlockNet, BlockNetSpec, count_cost
from .tensor import OptimizerState, ParamVector, softmax_cross_entropy

CHECKPOINT_VERSION = 1

# substream tags so independent draws never share a generator
_DATA, _SPLIT, _PARTITION, _INIT, _SAMPLE, _CLIENT_DATA, _CLIENT_METHOD = range(7)


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class CheckpointError(IOError):
    """Unreadable, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 8
    dims: tuple[int, ...] = (16,)
    samples_per_class: int = 50
    separation: float = 3.0
    test_fraction: float = 0.5

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "dims": list(self.dims),
                "samples_per_class": self.samples_per_class,
                "separation": self.separation,
                "test_fraction": self.test_fraction}

    @staticmethod
    def from_dict(d: dict) -> "DatasetConfig":
        known = {"num_classes", "dims", "samples_per_class", "separation",
                 "test_fraction"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        out = dict(d)
        if "dims" in out:
            dims = out["dims"]
            out["dims"] = (dims,) if isinstance(dims, int) else tuple(dims)
        return DatasetConfig(**out)


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (16, 16, 32)
    slim_granularity: int = 1
    projection_dim: int = 64

    def to_dict(self) -> dict:
        return {"widths": list(self.widths),
                "slim_granularity": self.slim_granularity,
                "projection_dim": self.projection_dim}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {"widths", "slim_granularity", "projection_dim"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        out = dict(d)
        if "widths" in out:
            out["widths"] = tuple(out["widths"])
        return ModelConfig(**out)


@dataclass(frozen=True)
class ExperimentConfig:
    rounds: int = 20
    num_clients: int = 8
    sample_fraction: float = 1.0
    local_epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    alpha: float = 0.5
    seed: int = 0
    eval_every: int = 1
    output_dir: str | None = None
    workers: int = 1
    method: MethodConfig = field(default_factory=MethodConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.num_clients < 1:
            raise ConfigError("need at least one client")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must be in (0, 1]")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds, "num_clients": self.num_clients,
            "sample_fraction": self.sample_fraction,
            "local_epochs": self.local_epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "momentum": self.momentum,
            "clip_norm": self.clip_norm, "alpha": self.alpha,
            "seed": self.seed, "eval_every": self.eval_every,
            "output_dir": self.output_dir, "workers": self.workers,
            "method": self.method.to_dict(), "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {"rounds", "num_clients", "sample_fraction", "local_epochs",
                 "batch_size", "learning_rate", "momentum", "clip_norm",
                 "alpha", "seed", "eval_every", "output_dir", "workers",
                 "method", "dataset", "model"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        out = dict(d)
        try:
            if "method" in out:
                out["method"] = MethodConfig.from_dict(out["method"])
            if "dataset" in out:
                out["dataset"] = DatasetConfig.from_dict(out["dataset"])
            if "model" in out:
                out["model"] = ModelConfig.from_dict(out["model"])
            return ExperimentConfig(**out)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e

    @staticmethod
    def from_json_file(path: str) -> "ExperimentConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return ExperimentConfig.from_dict(d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def trajectory_hash(self) -> str:
        """Hash of the fields that determine the parameter trajectory.

        Round count, eval cadence, worker count, and output paths change how
        long or where a run executes but not what it computes, so checkpoints
        remain loadable across those choices (resuming with more rounds is
        the whole point).
        """
        d = self.to_dict()
        for k in ("rounds", "eval_every", "output_dir", "workers"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def model_spec(self) -> BlockNetSpec:
        dims = self.dataset.dims
        shape = dims if len(dims) in (1, 3) else (int(np.prod(dims)),)
        return BlockNetSpec(input_shape=shape,
                            num_classes=self.dataset.num_classes,
                            widths=self.model.widths,
                            slim_granularity=self.model.slim_granularity,
                            projection_dim=self.model.projection_dim)


@dataclass
class RoundMetrics:
    round: int
    test_acc: float | None
    test_loss: float | None
    comm_bits_cum: float
    flops_cum: float
    sampled_ids: list[int]
    train_loss: dict[int, float] = field(default_factory=dict)

    CSV_HEADER = "round,test_acc,test_loss,comm_bits_cum,flops_cum,sampled_ids"

    def csv_row(self) -> str:
        acc = "" if self.test_acc is None else repr(self.test_acc)
        loss = "" if self.test_loss is None else repr(self.test_loss)
        ids = ";".join(str(i) for i in self.sampled_ids)
        return f"{self.round},{acc},{loss},{repr(self.comm_bits_cum)},{repr(self.flops_cum)},{ids}"

    def to_dict(self) -> dict:
        return {"round": self.round, "test_acc": self.test_acc,
                "test_loss": self.test_loss,
                "comm_bits_cum": self.comm_bits_cum,
                "flops_cum": self.flops_cum,
                "sampled_ids": list(self.sampled_ids),
                "train_loss": {str(k): v for k, v in self.train_loss.items()}}

    @staticmethod
    def from_dict(d: dict) -> "RoundMetrics":
        return RoundMetrics(
            round=int(d["round"]), test_acc=d["test_acc"],
            test_loss=d["test_loss"], comm_bits_cum=float(d["comm_bits_cum"]),
            flops_cum=float(d["flops_cum"]),
            sampled_ids=[int(i) for i in d["sampled_ids"]],
            train_loss={int(k): float(v) for k, v in d.get("train_loss", {}).items()},
        )


# -- core server-side ops -----------------------------------------------------


def aggregate(client_vectors: list[ParamVector], counts: list[int]) -> ParamVector:
    """Sample-count weighted average, summed in the given (caller-sorted) order."""
    if not client_vectors:
        raise ValueError("nothing to aggregate")
    if len(client_vectors) != len(counts):
        raise ValueError("weights do not match vectors")
    if any(c <= 0 for c in counts):
        raise ValueError("sample counts must be positive")
    layout = client_vectors[0].layout
    for v in client_vectors[1:]:
        if v.layout != layout:
            raise ValueError("parameter layout mismatch across clients")
    total = float(sum(counts))
    out = np.zeros_like(client_vectors[0].data)
    for v, c in zip(client_vectors, counts):
        out += (c / total) * v.data
    return ParamVector(data=out, layout=layout)


def sample_clients(num_clients: int, sample_fraction: float, round_idx: int,
                   seed: int) -> list[int]:
    """ceil(fraction * C) distinct ids, ascending, keyed by (seed, round)."""
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction must be in (0, 1]")
    m = ceil(sample_fraction * num_clients)
    rng = np.random.default_rng([seed, _SAMPLE, round_idx])
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def comm_cost(param_count: int, rounds_completed: int,
              clients_per_round: int) -> float:
    """Total transferred bits: one 32-bit copy of the model per sampled
    client per round (the accounting convention the reference totals use)."""
    if param_count < 0 or rounds_completed < 0 or clients_per_round < 0:
        raise ValueError("counts must be non-negative")
    return float(param_count) * 32.0 * clients_per_round * rounds_completed


def evaluate(model: BlockNet, ds: LabeledDataset) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) over a dataset, single batch."""
    logits = model.forward(ds.inputs)
    loss = softmax_cross_entropy(logits, ds.labels)
    acc = float((logits.data.argmax(axis=1) == ds.labels).mean())
    return acc, loss.item()


# -- experiment state ----------------------------------------------------------


@dataclass
class ExperimentState:
    config: ExperimentConfig
    train: LabeledDataset
    test: LabeledDataset
    partition: Partition
    model: BlockNet
    global_vector: ParamVector
    initial_vector: ParamVector
    round_idx: int = 0
    comm_bits: float = 0.0
    flops: float = 0.0
    prev_client_vectors: dict[int, np.ndarray] = field(default_factory=dict)
    flops_per_forward: float = 0.0


def build_state(config: ExperimentConfig) -> ExperimentState:
    """Materialize dataset, partition, and the seed-initialized global model."""
    ds = make_synthetic_mixture(
        config.dataset.num_classes, config.dataset.dims,
        config.dataset.samples_per_class, config.dataset.separation,
        seed=_derive_seed(config.seed, _DATA))
    train, test = train_test_split(ds, config.dataset.test_fraction,
                                   seed=_derive_seed(config.seed, _SPLIT))
    partition = dirichlet_partition(train.labels, config.num_clients,
                                    config.alpha,
                                    seed=_derive_seed(config.seed, _PARTITION))
    spec = config.model_spec()
    rng = np.random.default_rng([config.seed, _INIT])
    model = BlockNet(spec, rng=rng,
                     with_projection=config.method.needs_projection)
    fpf, _ = count_cost(spec, config.method)
    vec = model.get_vector()
    return ExperimentState(
        config=config, train=train, test=test, partition=partition,
        model=model, global_vector=vec,
        initial_vector=ParamVector(data=vec.data.copy(), layout=vec.layout),
        flops_per_forward=fpf)


def _derive_seed(seed: int, tag: int) -> int:
    # stable scalar sub-seed for APIs that take a single integer
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# -- client execution (top level so a process pool can pickle it) --------------


@dataclass
class _ClientTask:
    client_id: int
    seed: int
    round_idx: int
    spec_dict: dict
    with_projection: bool
    method: dict
    learning_rate: float
    momentum: float
    clip_norm: float
    epochs: int
    batch_size: int
    global_data: np.ndarray
    global_layout: tuple
    prev_data: np.ndarray | None
    inputs: np.ndarray
    labels: np.ndarray


def _run_client(task: _ClientTask):
    spec = BlockNetSpec.from_dict(task.spec_dict)
    method = MethodConfig.from_dict(task.method)
    model = BlockNet(spec, rng=None, with_projection=task.with_projection)
    global_vec = ParamVector(data=task.global_data, layout=task.global_layout)
    model.load_vector(global_vec)
    global_weights = model.state()
    prev_weights = None
    if method.method == "moon":
        if task.prev_data is None:
            raise RuntimeError("moon task is missing previous-round weights")
        model.load_vector(ParamVector(data=task.prev_data, layout=task.global_layout))
        prev_weights = model.state()
        model.load_vector(global_vec)
    ctx = ClientContext(
        model=model, inputs=task.inputs, labels=task.labels,
        data_rng=np.random.default_rng(
            [task.seed, _CLIENT_DATA, task.round_idx, task.client_id]),
        method_rng=np.random.default_rng(
            [task.seed, _CLIENT_METHOD, task.round_idx, task.client_id]),
        global_weights=global_weights, prev_weights=prev_weights)
    opt = OptimizerState(learning_rate=task.learning_rate,
                         momentum=task.momentum, clip_norm=task.clip_norm)
    try:
        _, stats = client_update(ctx, method, task.epochs, task.batch_size, opt)
    except Exception as e:
        raise RuntimeError(f"client {task.client_id} failed in round "
                           f"{task.round_idx}: {e}") from e
    return task.client_id, model.get_vector().data, stats


def run_round(state: ExperimentState, pool: ProcessPoolExecutor | None = None) -> RoundMetrics:
    """One communication round; updates state in place and returns metrics."""
    config = state.config
    r = state.round_idx
    sampled = sample_clients(config.num_clients, config.sample_fraction, r,
                             config.seed)
    tasks = []
    for cid in sampled:
        idx = state.partition.assignments[cid]
        prev = state.prev_client_vectors.get(cid)
        if prev is None and config.method.method == "moon":
            prev = state.initial_vector.data  # never sampled: initial model
        tasks.append(_ClientTask(
            client_id=cid, seed=config.seed, round_idx=r,
            spec_dict=state.model.spec.to_dict(),
            with_projection=config.method.needs_projection,
            method=config.method.to_dict(),
            learning_rate=config.learning_rate, momentum=config.momentum,
            clip_norm=config.clip_norm, epochs=config.local_epochs,
            batch_size=config.batch_size,
            global_data=state.global_vector.data,
            global_layout=state.global_vector.layout,
            prev_data=prev,
            inputs=state.train.inputs[idx], labels=state.train.labels[idx]))
    if pool is not None:
        results = list(pool.map(_run_client, tasks))
    else:
        results = [_run_client(t) for t in tasks]
    results.sort(key=lambda t: t[0])  # aggregation order is ascending client id

    vectors = [ParamVector(data=vec, layout=state.global_vector.layout)
               for _, vec, _ in results]
    counts = [len(state.partition.assignments[cid]) for cid, _, _ in results]
    state.global_vector = aggregate(vectors, counts)
    state.model.load_vector(state.global_vector)

    if config.method.method == "moon":
        for cid, vec, _ in results:
            state.prev_client_vectors[cid] = vec

    samples_this_round = sum(counts)
    state.flops += samples_this_round * config.local_epochs * state.flops_per_forward
    state.comm_bits += comm_cost(state.global_vector.size, 1, len(sampled))

    test_acc = test_loss = None
    if (r + 1) % config.eval_every == 0 or r == config.rounds - 1:
        test_acc, test_loss = evaluate(state.model, state.test)
        test_acc, test_loss = float(test_acc), float(test_loss)

    train_loss = {cid: stats[-1]["loss"] if stats else float("nan")
                  for cid, _, stats in results}
    state.round_idx = r + 1
    return RoundMetrics(round=r, test_acc=test_acc, test_loss=test_loss,
                        comm_bits_cum=state.comm_bits, flops_cum=state.flops,
                        sampled_ids=sampled, train_loss=train_loss)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path: str, state: ExperimentState) -> None:
    """Single-file container: one JSON manifest line, then raw little-endian
    float64 arrays at the offsets the manifest declares."""
    arrays: list[tuple[str, np.ndarray]] = [("global", state.global_vector.data)]
    for cid in sorted(state.prev_client_vectors):
        arrays.append((f"prev_client_{cid}", state.prev_client_vectors[cid]))
    offset = 0
    entries = []
    for name, arr in arrays:
        entries.append({"name": name, "length": int(arr.size), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "version": CHECKPOINT_VERSION,
        "round": state.round_idx,
        "config_hash": state.config.trajectory_hash(),
        "layout": [[n, list(s), o] for n, s, o in state.global_vector.layout],
        "arrays": entries,
        "comm_bits": state.comm_bits,
        "flops": state.flops,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(manifest).encode() + b"\n")
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str, config: ExperimentConfig) -> ExperimentState:
    """Rebuild run state from a checkpoint; everything else is re-derived
    deterministically from the config."""
    try:
        with open(path, "rb") as f:
            header = f.readline()
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    try:
        manifest = json.loads(header.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint manifest is corrupt: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} is not supported "
            f"(expected {CHECKPOINT_VERSION})")
    if manifest.get("config_hash") != config.trajectory_hash():
        raise CheckpointError("checkpoint was produced by a different config")
    state = build_state(config)
    expect_layout = tuple((n, tuple(s), o) for n, s, o in manifest["layout"])
    if expect_layout != state.global_vector.layout:
        raise CheckpointError("checkpoint layout does not match the model")
    arrays = {}
    for entry in manifest["arrays"]:
        name, length, offset = entry["name"], entry["length"], entry["offset"]
        end = offset + length * 8
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated in array {name!r}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64)
    if "global" not in arrays:
        raise CheckpointError("checkpoint has no global parameter array")
    state.global_vector = ParamVector(data=arrays.pop("global"),
                                      layout=state.global_vector.layout)
    state.model.load_vector(state.global_vector)
    for name, arr in arrays.items():
        if not name.startswith("prev_client_"):
            raise CheckpointError(f"unexpected checkpoint array {name!r}")
        state.prev_client_vectors[int(name.split("_")[-1])] = arr
    state.round_idx = int(manifest["round"])
    state.comm_bits = float(manifest.get("comm_bits", 0.0))
    state.flops = float(manifest.get("flops", 0.0))
    return state


# -- metrics files ----------------------------------------------------------------


def emit_metrics(metrics: list[RoundMetrics], out_dir: str) -> None:
    """Append new rows to metrics.csv and keep metrics.json an exact mirror.

    Appending is keyed on round numbers already present, so a resumed run
    extends the files without duplicating the header or earlier rows.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    json_path = os.path.join(out_dir, "metrics.json")
    existing: list[dict] = []
    if os.path.exists(json_path):
        with open(json_path) as f:
            existing = json.load(f)
    have = {int(d["round"]) for d in existing}
    new = [m for m in metrics if m.round not in have]
    all_records = existing + [m.to_dict() for m in new]
    all_records.sort(key=lambda d: d["round"])
    with open(json_path, "w") as f:
        json.dump(all_records, f, indent=1)
    write_header = not os.path.exists(csv_path)
    with open(csv_path, "a") as f:
        if write_header:
            f.write(RoundMetrics.CSV_HEADER + "\n")
        for m in new:
            f.write(m.csv_row() + "\n")


def read_metrics(out_dir: str) -> list[RoundMetrics]:
    with open(os.path.join(out_dir, "metrics.json")) as f:
        return [RoundMetrics.from_dict(d) for d in json.load(f)]


# -- the full loop ----------------------------------------------------------------


def run_experiment(config: ExperimentConfig,
                   resume_from: str | None = None) -> tuple[ExperimentState, list[RoundMetrics]]:
    """Run all configured rounds (or the remainder, when resuming).

    With an output_dir set, persists config echo, checkpoints every
    eval_every rounds plus at completion, and metrics after every round.
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from, config)
    else:
        state = build_state(config)
    out = config.output_dir
    if out is not None:
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
        with open(os.path.join(out, "config_echo.json"), "w") as f:
            json.dump(config.to_dict(), f, indent=1, sort_keys=True)
    pool = None
    metrics: list[RoundMetrics] = []
    try:
        if config.workers > 1:
            pool = ProcessPoolExecutor(max_workers=config.workers)
        while state.round_idx < config.rounds:
            m = run_round(state, pool)
            metrics.append(m)
            if out is not None:
                emit_metrics([m], out)
                last = state.round_idx == config.rounds
                if state.round_idx % config.eval_every == 0 or last:
                    save_checkpoint(
                        os.path.join(out, "checkpoints",
                                     f"round_{state.round_idx:04d}.ckpt"),
                        state)
    finally:
        if pool is not None:
            pool.shutdown()
    return state, metrics
