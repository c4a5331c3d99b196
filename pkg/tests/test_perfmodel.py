"""Tests for the analytical performance model."""

import pytest

from kvsim.perfmodel import (
    DeviceSpec,
    EfficiencyFactors,
    InstanceSpec,
    LinkMode,
    ModelDoesNotFitError,
    Phase,
    decode_bandwidth_limit,
    decode_step_latency,
    get_device,
    get_model,
    kv_bytes_per_token,
    kv_capacity_tokens,
    prefill_latency,
    throughput_curves,
    transfer_latency,
    weight_bytes,
)


@pytest.fixture
def llama70b():
    return get_model("llama-2-70b")


@pytest.fixture
def h100_instance():
    return InstanceSpec(device=get_device("H100"), num_devices=4, tensor_parallel=4)


@pytest.fixture
def eff():
    return EfficiencyFactors(compute_eff=0.5, mem_bw_eff=1.0, link_eff=1.0)


def test_kv_bytes_per_token(llama70b):
    """Test KV bytes per token for llama-2-70b (80 layers, 8 KV heads, head dim 128)."""
    assert kv_bytes_per_token(llama70b) == 327680
    assert weight_bytes(llama70b) == pytest.approx(140e9)


def test_prefill_latency_single_prompt(llama70b, h100_instance, eff):
    """Test prefill latency of a 512-token prompt on 4 H100s."""
    latency = prefill_latency(llama70b, h100_instance, eff, [512])
    expected = (2 * 70e9 * 512 + 4 * 512 * 512 * 8192 * 80) / (4 * 989e12 * 0.5)
    assert latency == pytest.approx(expected, rel=1e-12)
    assert 0.0365 < latency < 0.0367


def test_prefill_latency_is_additive(llama70b, h100_instance, eff):
    """Test that a batched prefill costs the sum of its prompts."""
    batched = prefill_latency(llama70b, h100_instance, eff, [100, 700, 300])
    separate = sum(prefill_latency(llama70b, h100_instance, eff, [n]) for n in (100, 700, 300))
    assert batched == pytest.approx(separate, rel=1e-12)


def test_prefill_latency_rejects_empty_batch(llama70b, h100_instance, eff):
    """Test that an empty or invalid prefill batch is rejected."""
    with pytest.raises(ValueError):
        prefill_latency(llama70b, h100_instance, eff, [])
    with pytest.raises(ValueError):
        prefill_latency(llama70b, h100_instance, eff, [10, 0])


def test_decode_step_single_request(llama70b, h100_instance, eff):
    """Test the bandwidth-bound decode step of one 512-token request."""
    latency = decode_step_latency(llama70b, h100_instance, eff, [512])
    assert 0.01046 <= latency <= 0.01049


def test_decode_step_rejects_empty_batch(llama70b, h100_instance, eff):
    """Test that decode rejects an empty batch and zero-length KV."""
    with pytest.raises(ValueError):
        decode_step_latency(llama70b, h100_instance, eff, [])
    with pytest.raises(ValueError):
        decode_step_latency(llama70b, h100_instance, eff, [0])


@pytest.mark.parametrize("length", [250, 500, 1000])
def test_decode_imbalance_penalty(llama70b, h100_instance, length):
    """Test that 20 extra requests cost exactly their KV reads when bandwidth-bound."""
    eff = EfficiencyFactors()
    kvb = kv_bytes_per_token(llama70b)
    step_20 = decode_step_latency(llama70b, h100_instance, eff, [length] * 20)
    step_40 = decode_step_latency(llama70b, h100_instance, eff, [length] * 40)
    expected = 20 * length * kvb / (4 * 3.35e12 * 0.8)
    assert step_40 - step_20 == pytest.approx(expected, rel=1e-9)


def test_decode_compute_ceiling(llama70b):
    """Test that a slow-compute device makes large decode batches compute-bound."""
    device = DeviceSpec(
        name="slow",
        peak_flops=1e12,
        hbm_capacity=80e9,
        hbm_bandwidth=3.35e12,
        link_bandwidth=900e9,
    )
    inst = InstanceSpec(device=device, num_devices=4, tensor_parallel=4)
    eff = EfficiencyFactors()
    latency = decode_step_latency(llama70b, inst, eff, [10] * 64)
    assert latency == pytest.approx(64 * 2 * 70e9 / (4 * 1e12 * 0.5), rel=1e-12)


def test_transfer_latency(h100_instance, eff):
    """Test transfer latency striping and the zero-byte case."""
    assert transfer_latency(0, h100_instance, eff) == 0.0
    assert transfer_latency(3.6e12, h100_instance, eff) == pytest.approx(1.0)

    single = InstanceSpec(
        device=get_device("H100"), num_devices=4, tensor_parallel=4, link_mode=LinkMode.SINGLE_LINK
    )
    assert transfer_latency(9e11, single, eff) == pytest.approx(1.0)

    with pytest.raises(ValueError):
        transfer_latency(-1, h100_instance, eff)


def test_kv_capacity_tokens(llama70b, h100_instance):
    """Test the KV token budget left after weights and the reserve."""
    expected = int((4 * 80e9 * 0.9 - 140e9) // 327680)
    assert kv_capacity_tokens(llama70b, h100_instance) == expected


def test_model_does_not_fit(llama70b):
    """Test that weights larger than usable memory raise ModelDoesNotFitError."""
    small = DeviceSpec(
        name="small",
        peak_flops=400e12,
        hbm_capacity=30e9,
        hbm_bandwidth=1.8e12,
        link_bandwidth=392e9,
    )
    inst = InstanceSpec(device=small, num_devices=4, tensor_parallel=4)
    with pytest.raises(ModelDoesNotFitError):
        kv_capacity_tokens(llama70b, inst)


def test_instance_requires_full_tensor_parallelism():
    """Test that tensor parallel degree must equal the device count."""
    with pytest.raises(ValueError):
        InstanceSpec(device=get_device("H100"), num_devices=4, tensor_parallel=2)


def test_unknown_presets():
    """Test that unknown preset names are rejected."""
    with pytest.raises(ValueError, match="Unknown device preset"):
        get_device("TPU")
    with pytest.raises(ValueError, match="Unknown model preset"):
        get_model("gpt-5")


def test_decode_throughput_non_decreasing(llama70b, h100_instance):
    """Test that decode throughput never drops as the batch grows."""
    eff = EfficiencyFactors()
    for length in (100, 500, 1000):
        rows = throughput_curves(
            llama70b, h100_instance, eff, [length], [1, 2, 4, 8, 16, 32, 64, 128, 256, 512],
            Phase.DECODE,
        )
        rates = [row.tokens_per_s for row in rows]
        assert all(b >= a for a, b in zip(rates, rates[1:]))


def test_decode_throughput_plateau(llama70b, h100_instance):
    """Test that decode throughput approaches the KV bandwidth limit for huge batches."""
    fast = get_device("H100").model_copy(update={"peak_flops": 1e18})
    inst = h100_instance.model_copy(update={"device": fast})
    eff = EfficiencyFactors()
    batch = 2**20
    plateaus = {}
    for length in (100, 1000):
        latency = decode_step_latency(llama70b, inst, eff, [length] * batch)
        plateaus[length] = batch / latency
        limit = decode_bandwidth_limit(llama70b, inst, eff, length)
        assert plateaus[length] == pytest.approx(limit, rel=0.02)
    assert plateaus[100] / plateaus[1000] == pytest.approx(10.0, abs=0.5)


def test_throughput_curves_prefill_counts_prompt_tokens(llama70b, h100_instance, eff):
    """Test that prefill throughput counts every prompt token."""
    rows = throughput_curves(llama70b, h100_instance, eff, [500], [1, 4], Phase.PREFILL)
    assert [(r.length, r.batch) for r in rows] == [(500, 1), (500, 4)]
    for row in rows:
        assert row.phase is Phase.PREFILL
        assert row.tokens_per_s == pytest.approx(row.batch * 500 / row.latency_s)
