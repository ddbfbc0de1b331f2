"""Server-side algebra, checkpoint format, resume and determinism laws."""
import json
import os

import numpy as np
import pytest

from fedsim.methods import MethodConfig
from fedsim.orchestrator import (CheckpointError, ConfigError, DatasetConfig,
                                 ExperimentConfig, ModelConfig, RoundMetrics,
                                 aggregate, build_state, comm_cost, evaluate,
                                 emit_metrics, load_checkpoint, read_metrics,
                                 run_experiment, run_round, sample_clients,
                                 save_checkpoint)
from fedsim.tensor import ParamVector


def _cfg(**kw):
    base = dict(
        rounds=2, num_clients=3, sample_fraction=1.0, local_epochs=1,
        batch_size=8, learning_rate=0.05, alpha=0.5, seed=7,
        dataset=DatasetConfig(num_classes=3, dims=(8,), samples_per_class=12,
                              separation=3.0, test_fraction=0.5),
        model=ModelConfig(widths=(6, 6)))
    base.update(kw)
    return ExperimentConfig(**base)


# -- configuration --------------------------------------------------------------------


def test_config_validation():
    for bad in (dict(rounds=-1), dict(num_clients=0), dict(sample_fraction=0.0),
                dict(sample_fraction=1.5), dict(local_epochs=-1),
                dict(batch_size=0), dict(learning_rate=0.0),
                dict(momentum=1.0), dict(clip_norm=0.0), dict(alpha=0.0),
                dict(eval_every=0), dict(workers=0)):
        with pytest.raises(ConfigError):
            _cfg(**bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"roundz": 3})


def test_config_round_trip():
    cfg = _cfg(method=MethodConfig(method="moon"))
    clone = ExperimentConfig.from_dict(cfg.to_dict())
    assert clone == cfg
    assert clone.config_hash() == cfg.config_hash()


def test_trajectory_hash_ignores_execution_only_fields():
    cfg = _cfg()
    same = [_cfg(rounds=50), _cfg(eval_every=5), _cfg(output_dir="/tmp/x"),
            _cfg(workers=4)]
    for other in same:
        assert other.trajectory_hash() == cfg.trajectory_hash()
        assert other.config_hash() != cfg.config_hash()
    diff = [_cfg(seed=8), _cfg(learning_rate=0.1),
            _cfg(method=MethodConfig(method="fedprox")), _cfg(alpha=0.1)]
    for other in diff:
        assert other.trajectory_hash() != cfg.trajectory_hash()


# -- aggregation ----------------------------------------------------------------------


def _pv(values):
    arr = np.asarray(values, dtype=np.float64)
    return ParamVector(data=arr, layout=(("w", (len(arr),), len(arr)),))


def test_aggregate_weighted_mean_exact():
    # weights 1:3 -> 0.25 * 2 + 0.75 * 6 = 5, exactly
    out = aggregate([_pv([2.0, 2.0]), _pv([6.0, 6.0])], [1, 3])
    assert np.array_equal(out.data, np.array([5.0, 5.0]))


def test_aggregate_identical_clients_is_identity():
    v = np.random.default_rng(0).normal(size=11)
    out = aggregate([_pv(v), _pv(v), _pv(v)], [5, 1, 94])
    assert np.array_equal(out.data, (v / 3.0) * 3.0) or np.allclose(out.data, v)
    # bitwise identity holds because the weights sum to one exactly
    out2 = aggregate([_pv(v), _pv(v)], [1, 1])
    assert np.array_equal(out2.data, 0.5 * v + 0.5 * v)


def test_aggregate_validation():
    with pytest.raises(ValueError):
        aggregate([], [])
    with pytest.raises(ValueError):
        aggregate([_pv([1.0])], [1, 2])
    with pytest.raises(ValueError):
        aggregate([_pv([1.0]), _pv([2.0])], [1, 0])
    other = ParamVector(data=np.zeros(1), layout=(("b", (1,), 1),))
    with pytest.raises(ValueError):
        aggregate([_pv([1.0]), other], [1, 1])


def test_sample_clients():
    assert sample_clients(5, 1.0, round_idx=0, seed=0) == [0, 1, 2, 3, 4]
    picked = sample_clients(8, 0.25, round_idx=3, seed=1)
    assert len(picked) == 2 and picked == sorted(set(picked))
    assert picked == sample_clients(8, 0.25, round_idx=3, seed=1)
    assert sample_clients(3, 0.5, 0, 0) == sorted(sample_clients(3, 0.5, 0, 0))
    with pytest.raises(ValueError):
        sample_clients(4, 0.0, 0, 0)


def test_comm_cost_values():
    assert comm_cost(1, 1, 1) == 32.0
    assert comm_cost(610_000, 84, 16) == 26_234_880_000.0
    assert comm_cost(10, 0, 5) == 0.0
    with pytest.raises(ValueError):
        comm_cost(-1, 1, 1)


# -- state and rounds -----------------------------------------------------------------


def test_build_state_partitions_everything():
    state = build_state(_cfg())
    n_train = len(state.train.labels)
    covered = np.sort(np.concatenate(state.partition.assignments))
    assert np.array_equal(covered, np.arange(n_train))
    assert len(state.test.labels) == 36 - n_train
    assert np.array_equal(state.initial_vector.data, state.global_vector.data)
    assert state.initial_vector.data is not state.global_vector.data
    assert state.flops_per_forward > 0
    again = build_state(_cfg())
    assert np.array_equal(again.global_vector.data, state.global_vector.data)


def test_evaluate_uniform_logits():
    state = build_state(_cfg())
    zero = ParamVector(data=np.zeros_like(state.global_vector.data),
                       layout=state.global_vector.layout)
    state.model.load_vector(zero)
    acc, loss = evaluate(state.model, state.test)
    assert abs(loss - np.log(3.0)) < 1e-12
    assert acc == float((state.test.labels == 0).mean())


def test_run_round_accounting():
    state = build_state(_cfg(eval_every=1))
    m = run_round(state)
    assert m.round == 0 and state.round_idx == 1
    assert m.sampled_ids == [0, 1, 2]
    assert m.comm_bits_cum == state.global_vector.size * 32.0 * 3
    want_flops = len(state.train.labels) * 1 * state.flops_per_forward
    assert m.flops_cum == want_flops
    assert m.test_acc is not None and m.test_loss is not None
    assert set(m.train_loss) == {0, 1, 2}
    m2 = run_round(state)
    assert m2.comm_bits_cum == 2 * m.comm_bits_cum


def test_eval_cadence():
    state = build_state(_cfg(rounds=3, eval_every=2))
    m0 = run_round(state)
    m1 = run_round(state)
    m2 = run_round(state)
    assert m0.test_acc is None         # (0+1) % 2 != 0, not final
    assert m1.test_acc is not None     # (1+1) % 2 == 0
    assert m2.test_acc is not None     # final round always evaluates


def test_round_metrics_csv_and_json_round_trip():
    m = RoundMetrics(round=3, test_acc=None, test_loss=None,
                     comm_bits_cum=64.0, flops_cum=10.0, sampled_ids=[2, 5],
                     train_loss={2: 0.5, 5: 0.25})
    assert m.csv_row() == "3,,,64.0,10.0,2;5"
    assert RoundMetrics.from_dict(m.to_dict()) == m


# -- checkpoints ----------------------------------------------------------------------


def _run_rounds(cfg, n):
    state = build_state(cfg)
    for _ in range(n):
        run_round(state)
    return state


def test_checkpoint_round_trip(tmp_path):
    cfg = _cfg(method=MethodConfig(method="moon"))
    state = _run_rounds(cfg, 2)
    path = str(tmp_path / "r2.ckpt")
    save_checkpoint(path, state)
    loaded = load_checkpoint(path, cfg)
    assert np.array_equal(loaded.global_vector.data, state.global_vector.data)
    assert loaded.round_idx == 2
    assert loaded.comm_bits == state.comm_bits
    assert loaded.flops == state.flops
    assert sorted(loaded.prev_client_vectors) == sorted(state.prev_client_vectors)
    for cid, vec in state.prev_client_vectors.items():
        assert np.array_equal(loaded.prev_client_vectors[cid], vec)


def test_checkpoint_rejects_other_config(tmp_path):
    cfg = _cfg()
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(path, _run_rounds(cfg, 1))
    with pytest.raises(CheckpointError, match="different config"):
        load_checkpoint(path, _cfg(seed=8))
    # execution-only knobs stay loadable
    load_checkpoint(path, _cfg(rounds=9, eval_every=3, workers=2))


def test_checkpoint_corruption_detected(tmp_path):
    cfg = _cfg()
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(path, _run_rounds(cfg, 1))
    raw = open(path, "rb").read()

    trunc = str(tmp_path / "trunc.ckpt")
    with open(trunc, "wb") as f:
        f.write(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(trunc, cfg)

    garbage = str(tmp_path / "garbage.ckpt")
    with open(garbage, "wb") as f:
        f.write(b"\x00\x01not json\n" + raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage, cfg)

    header, blob = raw.split(b"\n", 1)
    manifest = json.loads(header)
    manifest["version"] = 999
    versioned = str(tmp_path / "version.ckpt")
    with open(versioned, "wb") as f:
        f.write(json.dumps(manifest).encode() + b"\n" + blob)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(versioned, cfg)

    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(str(tmp_path / "missing.ckpt"), cfg)


def test_resume_is_bitwise_equal(tmp_path):
    cfg4 = _cfg(rounds=4, method=MethodConfig(method="moon"))
    straight = _run_rounds(cfg4, 4)

    cfg2 = _cfg(rounds=2, method=MethodConfig(method="moon"))
    half = _run_rounds(cfg2, 2)
    path = str(tmp_path / "half.ckpt")
    save_checkpoint(path, half)
    resumed, metrics = run_experiment(cfg4, resume_from=path)
    assert resumed.round_idx == 4
    assert [m.round for m in metrics] == [2, 3]
    assert np.array_equal(resumed.global_vector.data, straight.global_vector.data)
    assert resumed.comm_bits == straight.comm_bits
    assert resumed.flops == straight.flops


def test_moon_previous_round_fallback_is_initial_model():
    cfg = _cfg(method=MethodConfig(method="moon"))
    a = build_state(cfg)
    run_round(a); run_round(a)

    b = build_state(cfg)
    run_round(b)
    b.prev_client_vectors.clear()  # forget round-0 locals
    run_round(b)

    c = build_state(cfg)
    run_round(c)
    c.prev_client_vectors = {cid: c.initial_vector.data.copy()
                             for cid in range(cfg.num_clients)}
    run_round(c)

    assert np.array_equal(b.global_vector.data, c.global_vector.data)
    assert not np.array_equal(a.global_vector.data, b.global_vector.data)


# -- metrics files and the full loop ----------------------------------------------------


def test_emit_metrics_appends_without_duplicates(tmp_path):
    out = str(tmp_path)
    rows = [RoundMetrics(r, 0.5, 1.0, 32.0 * (r + 1), 10.0, [0]) for r in range(3)]
    emit_metrics(rows[:2], out)
    emit_metrics(rows[1:], out)
    got = read_metrics(out)
    assert [m.round for m in got] == [0, 1, 2]
    lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert lines[0] == RoundMetrics.CSV_HEADER
    assert len(lines) == 4


def test_run_experiment_outputs(tmp_path):
    out = str(tmp_path / "run")
    cfg = _cfg(rounds=3, eval_every=2, output_dir=out)
    state, metrics = run_experiment(cfg)
    assert state.round_idx == 3 and len(metrics) == 3
    echoed = json.load(open(os.path.join(out, "config_echo.json")))
    assert ExperimentConfig.from_dict(echoed) == cfg
    assert [m.round for m in read_metrics(out)] == [0, 1, 2]
    ckpts = sorted(os.listdir(os.path.join(out, "checkpoints")))
    assert ckpts == ["round_0002.ckpt", "round_0003.ckpt"]


def test_full_determinism_and_seed_sensitivity():
    s1, m1 = run_experiment(_cfg())
    s2, m2 = run_experiment(_cfg())
    assert np.array_equal(s1.global_vector.data, s2.global_vector.data)
    assert [m.to_dict() for m in m1] == [m.to_dict() for m in m2]
    s3, _ = run_experiment(_cfg(seed=8))
    assert not np.array_equal(s1.global_vector.data, s3.global_vector.data)


def test_parallel_matches_serial_bitwise():
    cfg_serial = _cfg(rounds=2, method=MethodConfig(method="moon"))
    cfg_par = _cfg(rounds=2, workers=2, method=MethodConfig(method="moon"))
    s_serial, m_serial = run_experiment(cfg_serial)
    s_par, m_par = run_experiment(cfg_par)
    assert np.array_equal(s_serial.global_vector.data, s_par.global_vector.data)
    assert [m.to_dict() for m in m_serial] == [m.to_dict() for m in m_par]
