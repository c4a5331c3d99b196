"""Analytical cost model for LLM inference on tensor-parallel instances.

Every latency the simulator charges comes from this module. Prefill is modeled as
compute-bound, decode as bandwidth-bound (with a compute ceiling), transfers as
link-bandwidth-bound. All functions are pure.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ModelDoesNotFitError(ValueError):
    """Raised when model weights exceed the usable memory of an instance."""


class Phase(str, Enum):
    """Inference phase."""

    PREFILL = "prefill"
    DECODE = "decode"


class LinkMode(str, Enum):
    """How an instance aggregates its devices' interconnect links."""

    STRIPED = "striped"
    SINGLE_LINK = "single-link"


class DeviceSpec(BaseModel):
    """One accelerator device. Units are decimal (GB = 1e9)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    peak_flops: float = Field(gt=0, description="fp16 FLOP/s")
    hbm_capacity: float = Field(gt=0, description="bytes")
    hbm_bandwidth: float = Field(gt=0, description="bytes/s")
    link_bandwidth: float = Field(gt=0, description="bytes/s per device")


class ModelSpec(BaseModel):
    """LLM architecture constants. Grouped-query attention is allowed."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    param_count: float = Field(gt=0)
    num_layers: int = Field(gt=0)
    hidden_dim: int = Field(gt=0)
    num_kv_heads: int = Field(gt=0)
    head_dim: int = Field(gt=0)
    bytes_per_value: int = Field(gt=0)


class InstanceSpec(BaseModel):
    """A group of devices holding one tensor-parallel model replica."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    device: DeviceSpec
    num_devices: int = Field(default=4, ge=1)
    tensor_parallel: int = Field(default=4, ge=1)
    memory_reserve_fraction: float = Field(default=0.10, ge=0.0, lt=1.0)
    link_mode: LinkMode = LinkMode.STRIPED

    @model_validator(mode="after")
    def _check_tp(self) -> "InstanceSpec":
        if self.tensor_parallel != self.num_devices:
            raise ValueError("tensor_parallel must equal num_devices")
        return self

    @property
    def link_count(self) -> int:
        """Number of device links a transfer is striped across."""
        return self.num_devices if self.link_mode is LinkMode.STRIPED else 1

    @property
    def link_capacity(self) -> float:
        """Raw inter-instance bandwidth in bytes/s."""
        return self.link_count * self.device.link_bandwidth


class EfficiencyFactors(BaseModel):
    """Achieved fractions of peak compute, HBM bandwidth and link bandwidth."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    compute_eff: float = Field(default=0.5, gt=0.0, le=1.0)
    mem_bw_eff: float = Field(default=0.8, gt=0.0, le=1.0)
    link_eff: float = Field(default=0.8, gt=0.0, le=1.0)


DEVICE_PRESETS = {
    "910B2": DeviceSpec(
        name="910B2",
        peak_flops=400e12,
        hbm_capacity=64e9,
        hbm_bandwidth=1.8e12,
        link_bandwidth=392e9,
    ),
    "H100": DeviceSpec(
        name="H100",
        peak_flops=989e12,
        hbm_capacity=80e9,
        hbm_bandwidth=3.35e12,
        link_bandwidth=900e9,
    ),
}

# Architecture constants from the public model cards.
MODEL_PRESETS = {
    "llama-2-70b": ModelSpec(
        name="llama-2-70b",
        param_count=70e9,
        num_layers=80,
        hidden_dim=8192,
        num_kv_heads=8,
        head_dim=128,
        bytes_per_value=2,
    ),
    "llama-2-7b": ModelSpec(
        name="llama-2-7b",
        param_count=7e9,
        num_layers=32,
        hidden_dim=4096,
        num_kv_heads=32,
        head_dim=128,
        bytes_per_value=2,
    ),
}


def get_device(name: str) -> DeviceSpec:
    """Look up a device preset by name."""
    try:
        return DEVICE_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"Unknown device preset: {name} (known: {', '.join(sorted(DEVICE_PRESETS))})"
        ) from None


def get_model(name: str) -> ModelSpec:
    """Look up a model preset by name."""
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"Unknown model preset: {name} (known: {', '.join(sorted(MODEL_PRESETS))})"
        ) from None


def kv_bytes_per_token(model: ModelSpec) -> int:
    """Bytes of keys and values stored per token across all layers."""
    return 2 * model.num_layers * model.num_kv_heads * model.head_dim * model.bytes_per_value


def weight_bytes(model: ModelSpec) -> float:
    """Bytes of model weights."""
    return model.param_count * model.bytes_per_value


def prefill_flops(model: ModelSpec, prompt_len: int) -> float:
    """FLOPs to prefill one prompt: dense matmuls plus the quadratic attention term."""
    return (
        2.0 * model.param_count * prompt_len
        + 4.0 * prompt_len * prompt_len * model.hidden_dim * model.num_layers
    )


def prefill_latency(
    model: ModelSpec,
    inst: InstanceSpec,
    eff: EfficiencyFactors,
    prompt_lengths: Sequence[int],
) -> float:
    """
    Latency of one batched prefill job.

    Args:
        model: Model architecture
        inst: Instance composition
        eff: Efficiency factors (only compute_eff is used)
        prompt_lengths: Token count of every prompt in the batch

    Returns:
        Seconds

    Raises:
        ValueError: If the batch is empty or contains a non-positive length
    """
    if not prompt_lengths:
        raise ValueError("empty prefill batch")
    total = 0.0
    for length in prompt_lengths:
        if length <= 0:
            raise ValueError(f"prompt length must be positive, got {length}")
        total += prefill_flops(model, length)
    return total / (inst.num_devices * inst.device.peak_flops * eff.compute_eff)


def decode_step_latency(
    model: ModelSpec,
    inst: InstanceSpec,
    eff: EfficiencyFactors,
    kv_lengths: Sequence[int],
) -> float:
    """
    Latency of one decode iteration over a batch.

    The step reads all weights once plus every request's KV cache; it is bounded
    below by the compute needed for one token per request.

    Args:
        model: Model architecture
        inst: Instance composition
        eff: Efficiency factors
        kv_lengths: KV length (tokens) read by each request in the batch

    Returns:
        Seconds

    Raises:
        ValueError: If the batch is empty or contains a length below 1
    """
    if not kv_lengths:
        raise ValueError("empty decode batch")
    total_kv = 0
    for length in kv_lengths:
        if length < 1:
            raise ValueError(f"kv length must be at least 1, got {length}")
        total_kv += length
    mem_time = (weight_bytes(model) + total_kv * kv_bytes_per_token(model)) / (
        inst.num_devices * inst.device.hbm_bandwidth * eff.mem_bw_eff
    )
    compute_time = (len(kv_lengths) * 2.0 * model.param_count) / (
        inst.num_devices * inst.device.peak_flops * eff.compute_eff
    )
    return max(mem_time, compute_time)


def transfer_latency(num_bytes: float, inst: InstanceSpec, eff: EfficiencyFactors) -> float:
    """Seconds to move num_bytes from this instance over its configured links."""
    if num_bytes < 0:
        raise ValueError(f"num_bytes must be non-negative, got {num_bytes}")
    if num_bytes == 0:
        return 0.0
    return num_bytes / (inst.link_count * inst.device.link_bandwidth * eff.link_eff)


def usable_memory_bytes(inst: InstanceSpec) -> float:
    """HBM bytes of the instance left after the reserve."""
    return inst.num_devices * inst.device.hbm_capacity * (1.0 - inst.memory_reserve_fraction)


def kv_capacity_tokens(model: ModelSpec, inst: InstanceSpec) -> int:
    """
    KV token budget of an instance once weights are resident.

    Raises:
        ModelDoesNotFitError: If the weights exceed usable memory
    """
    free = usable_memory_bytes(inst) - weight_bytes(model)
    if free < 0:
        raise ModelDoesNotFitError("model does not fit in instance memory")
    return int(math.floor(free / kv_bytes_per_token(model)))


@dataclass(frozen=True)
class CurvePoint:
    """One row of a latency/throughput table."""

    phase: Phase
    length: int
    batch: int
    latency_s: float
    tokens_per_s: float


def throughput_curves(
    model: ModelSpec,
    inst: InstanceSpec,
    eff: EfficiencyFactors,
    lengths: Sequence[int],
    batch_sizes: Sequence[int],
    phase: Phase,
) -> List[CurvePoint]:
    """
    Latency and throughput for every (length, batch) combination.

    Decode throughput counts one token per request per step; prefill throughput
    counts every prompt token. Memory capacity is not enforced.
    """
    rows: List[CurvePoint] = []
    for length in lengths:
        for batch in batch_sizes:
            if phase is Phase.DECODE:
                latency = decode_step_latency(model, inst, eff, [length] * batch)
                tokens = float(batch)
            else:
                latency = prefill_latency(model, inst, eff, [length] * batch)
                tokens = float(batch * length)
            rows.append(
                CurvePoint(
                    phase=phase,
                    length=length,
                    batch=batch,
                    latency_s=latency,
                    tokens_per_s=tokens / latency,
                )
            )
    return rows


def decode_bandwidth_limit(
    model: ModelSpec, inst: InstanceSpec, eff: EfficiencyFactors, length: int
) -> float:
    """Decode tokens/s as batch grows without bound, ignoring weights and compute."""
    return (inst.num_devices * inst.device.hbm_bandwidth * eff.mem_bw_eff) / (
        length * kv_bytes_per_token(model)
    )
