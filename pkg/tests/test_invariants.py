"""Randomized runs with the engine's invariant checks switched on."""

import numpy as np
import pytest

from kvsim.config import EngineConfig, PolicyConfig
from kvsim.engine import Simulator, run
from kvsim.metrics import compute_report
from kvsim.perfmodel import EfficiencyFactors, InstanceSpec, get_device, get_model
from kvsim.policy import create_policy
from kvsim.workload import Trace, TraceRequest, load_trace

POLICIES = ["accellm", "splitwise_static", "unified"]


def random_case(seed):
    rng = np.random.default_rng(seed)
    policy_name = POLICIES[seed % len(POLICIES)]
    num_instances = int(rng.choice([2, 4]))
    count = int(rng.integers(1, 51))
    times = np.sort(rng.uniform(0.0, 2.0, size=count))
    if rng.random() < 0.3:
        times = np.round(times, 1)
    requests = [
        TraceRequest(
            id=i,
            arrival_time=float(times[i]),
            prompt_len=int(rng.integers(1, 301)),
            decode_len=int(rng.integers(1, 61)),
        )
        for i in range(count)
    ]
    policy_config = PolicyConfig(
        name=policy_name,
        high_load_cobatch=bool(rng.random() < 0.5),
        overflow_threshold_tokens=int(rng.choice([0, 500, 16384])),
        steal_prefill=bool(rng.random() < 0.8),
        timer_period_s=float(rng.choice([0.1, 1.0])),
        degraded_ticks=int(rng.integers(1, 4)),
        leveling_imbalance_threshold=float(rng.choice([0.1, 0.25])),
    )
    engine_config = EngineConfig(
        prefill_token_budget=int(rng.choice([300, 1024, 8192])),
        first_token_mode=str(rng.choice(["prefill", "decode"])),
        check_invariants=True,
    )
    device = get_device(str(rng.choice(["H100", "910B2"])))
    cluster = [InstanceSpec(device=device, num_devices=4, tensor_parallel=4)] * num_instances
    return Trace(requests=requests, duration=2.0), cluster, policy_config, engine_config


@pytest.mark.parametrize("seed", range(100))
def test_random_run_keeps_invariants(seed):
    """Test that random small runs finish every request with consistent bookkeeping."""
    trace, cluster, policy_config, engine_config = random_case(seed)
    raw = run(
        trace,
        cluster,
        create_policy(policy_config),
        get_model("llama-2-70b"),
        EfficiencyFactors(),
        seed=seed,
        engine_config=engine_config,
        drain_s=300.0,
    )

    for record in raw.requests:
        assert record.state == "complete"
        assert record.tokens_emitted == record.decode_len
        assert len(record.token_times) == record.decode_len
        assert record.first_token_time >= record.arrival_time
        assert record.prefill_start_time >= record.arrival_time

    report = compute_report(raw)
    assert report.completed == len(trace)
    assert sum(1 + len(m.tbt_samples) for m in report.requests) == sum(
        r.decode_len for r in raw.requests
    )
    for used, capacity in zip(raw.peak_kv_tokens, raw.capacity_tokens):
        assert used <= capacity
    if policy_config.name == "unified":
        assert sum(raw.traffic_bytes.values()) == 0
    if policy_config.name != "accellm":
        assert raw.traffic_bytes["mirror"] == 0
        assert raw.rebalance_moves == 0


@pytest.mark.parametrize("seed", range(0, 100, 10))
def test_random_run_is_deterministic(seed):
    """Test that a rerun with a fresh policy gives byte-identical results."""
    trace, cluster, policy_config, engine_config = random_case(seed)

    def once():
        return run(
            trace,
            cluster,
            create_policy(policy_config),
            get_model("llama-2-70b"),
            EfficiencyFactors(),
            seed=seed,
            engine_config=engine_config,
            drain_s=300.0,
        ).to_json()

    assert once() == once()


@pytest.mark.parametrize("seed", range(0, 100, 3))
def test_rebalance_moves_transfer_no_bytes(monkeypatch, seed):
    """Test that moving a request between holders of a fresh copy touches no link."""
    trace, cluster, policy_config, engine_config = random_case(seed)
    assert policy_config.name == "accellm"
    unchanged = []
    plain_move = Simulator._move

    def move(self, decision):
        before = (self.links.total_bytes, self.links.transfer_count)
        applied = plain_move(self, decision)
        unchanged.append(before == (self.links.total_bytes, self.links.transfer_count))
        return applied

    monkeypatch.setattr(Simulator, "_move", move)
    raw = run(
        trace,
        cluster,
        create_policy(policy_config),
        get_model("llama-2-70b"),
        EfficiencyFactors(),
        seed=seed,
        engine_config=engine_config,
        drain_s=300.0,
    )

    assert all(unchanged)
    assert len(unchanged) >= raw.rebalance_moves


@pytest.mark.parametrize("seed", range(100))
def test_random_trace_round_trips(tmp_path, seed):
    """Test that saving and reloading a trace changes nothing."""
    trace, *_ = random_case(seed)
    path = tmp_path / "case.trace"
    trace.save(path)

    loaded = load_trace(path)
    assert loaded.requests == trace.requests
    assert loaded.duration == trace.duration
    assert loaded.fingerprint() == trace.fingerprint()
