"""Federated averaging engine with quantized uplink/downlink communication.

Each round: the server broadcasts the global model to a sampled subset of
clients (optionally quantized, one draw shared by all recipients), every
selected client runs local mini-batch SGD, uploads either its weights or its
weight differential (optionally quantized), and the server averages the
uploads.  All randomness is drawn from per-(round, operation, client) streams
derived from the master seed, so results are independent of execution order.

Link cost accounting: a quantized vector costs ``dim * bits`` payload bits
plus a 17-byte gain header; unquantized vectors cost 32 bits per coordinate.
Downlink cost is counted once per round (broadcast), uplink once per client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import quantizer as qz
from .models import (
    ClientDataset,
    LossKind,
    LossModel,
    OptimumInfo,
    WeightVector,
    local_train,
    loss,
    pooled_dataset,
    solve_optimum,
)
from .data import gen_logistic_dataset, gen_quadratic_clients, partition_iid
from .streams import substream

__all__ = [
    "UplinkMode",
    "DownlinkMode",
    "ScheduleKind",
    "ScheduleSpec",
    "FederationConfig",
    "RoundRecord",
    "FederationState",
    "ConfigError",
    "AssumptionViolation",
    "StateError",
    "gamma_offset",
    "lr_schedule",
    "weight_uplink_bits",
    "downlink_log_bits",
    "step_log_bits",
    "schedule_bits",
    "sample_clients",
    "aggregate_weights",
    "aggregate_differentials",
    "broadcast",
    "build_problem",
    "init_state",
    "run_round",
    "run_federation",
    "sampling_stream",
    "broadcast_stream",
    "train_stream",
    "uplink_stream",
]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class AssumptionViolation(RuntimeError):
    """A runtime weight exceeded the configured magnitude bound."""


class StateError(RuntimeError):
    """Server state required by the transmission mode is missing."""


class UplinkMode(Enum):
    FLOAT = "float"
    WEIGHT = "weight"
    DIFFERENTIAL = "differential"


class DownlinkMode(Enum):
    # differential downlink is not representable: newly sampled clients have
    # no base model to reconstruct from
    FLOAT = "float"
    QUANTIZED = "quantized"
    LAYERED = "layered"


class ScheduleKind(Enum):
    CONSTANT = "constant"
    WEIGHT_LOG = "weight_log"
    DOWNLINK_LOG = "downlink_log"
    STEP_LOG = "step_log"


@dataclass(frozen=True)
class ScheduleSpec:
    """Bit-width schedule; every produced width is an integer >= 1."""

    kind: ScheduleKind
    bits: int | None = None
    f: float | None = None
    p: float | None = None

    def __post_init__(self) -> None:
        if self.kind is ScheduleKind.CONSTANT:
            if self.bits is None or self.bits < 1:
                raise ConfigError("constant schedule requires bits >= 1")
        elif self.kind is ScheduleKind.STEP_LOG:
            if self.f is None or self.f < 2:
                raise ConfigError("step_log schedule requires f >= 2")
            if self.p is None or not self.p > 0:
                raise ConfigError("step_log schedule requires p > 0")

    @classmethod
    def constant(cls, bits: int) -> "ScheduleSpec":
        return cls(ScheduleKind.CONSTANT, bits=bits)


@dataclass(frozen=True)
class FederationConfig:
    """All knobs of one experiment, including the synthetic problem recipe."""

    num_clients: int = 20
    clients_per_round: int = 5
    local_steps: int = 5
    rounds: int = 100
    batch_size: int = 5
    mu: float = 1.0
    lipschitz: float = 1.0
    uplink_mode: UplinkMode = UplinkMode.FLOAT
    downlink_mode: DownlinkMode = DownlinkMode.FLOAT
    uplink_schedule: ScheduleSpec = ScheduleSpec.constant(4)
    downlink_schedule: ScheduleSpec = ScheduleSpec.constant(4)
    rounding: qz.Rounding = qz.Rounding.STOCHASTIC
    structure: qz.Structure = qz.Structure.TUNED
    grid: qz.GridKind = qz.GridKind.SYMMETRIC
    weight_bound: float = 1.0
    one_bit_enhanced: bool = True
    lq_static: bool = False
    seed: int = 0
    model: LossKind = LossKind.QUADRATIC
    regularization: float = 0.0
    dimension: int = 10
    spread: float = 1.0
    samples_per_client: int = 20
    noise_std: float = 0.5
    layer_sizes: tuple[int, ...] | None = None
    layer_feature_scales: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(
                "clients_per_round must satisfy 1 <= clients_per_round <= num_clients"
            )
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.mu > 0:
            raise ConfigError("mu must be positive")
        if self.lipschitz < self.mu:
            raise ConfigError("lipschitz must be >= mu")
        if not self.weight_bound > 0:
            raise ConfigError("weight_bound must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if (self.grid is qz.GridKind.SYMMETRIC
                and self.rounding is not qz.Rounding.STOCHASTIC):
            raise ConfigError("grid=symmetric requires rounding=stochastic")
        if self.dimension < 1:
            raise ConfigError("dimension must be >= 1")
        if self.spread < 0:
            raise ConfigError("spread must be non-negative")
        if self.samples_per_client < 1:
            raise ConfigError("samples_per_client must be >= 1")
        if self.batch_size > self.samples_per_client:
            raise ConfigError("batch_size must be <= samples_per_client")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.layer_sizes is not None:
            if any(s < 1 for s in self.layer_sizes):
                raise ConfigError("layer_sizes entries must be >= 1")
            if sum(self.layer_sizes) != self.dimension:
                raise ConfigError("layer_sizes must sum to dimension")
        if self.layer_feature_scales is not None:
            if self.layer_sizes is None:
                raise ConfigError("layer_feature_scales requires layer_sizes")
            if len(self.layer_feature_scales) != len(self.layer_sizes):
                raise ConfigError("layer_feature_scales must match layer_sizes")
            if any(not s > 0 for s in self.layer_feature_scales):
                raise ConfigError("layer_feature_scales must be positive")

    def layer_bounds(self) -> tuple[tuple[int, int], ...]:
        if self.layer_sizes is None:
            return ((0, self.dimension),)
        bounds, cursor = [], 0
        for size in self.layer_sizes:
            bounds.append((cursor, cursor + size))
            cursor += size
        return tuple(bounds)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    eta: float
    bits_up: int
    bits_down: int
    train_loss: float
    gap: float
    uplink_bits_cum: int
    downlink_bits_cum: int


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def gamma_offset(mu: float, lipschitz: float, local_steps: int) -> float:
    """Schedule offset max(8 L / mu, E)."""
    return max(8.0 * lipschitz / mu, float(local_steps))


def lr_schedule(t: int, mu: float, gamma: float) -> float:
    """Decaying learning rate 2 / (mu * (gamma + t))."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return 2.0 / (mu * (gamma + t))


def weight_uplink_bits(t: int, mu: float, gamma: float) -> int:
    """Log-growing width for direct weight uploads: ceil(log2(mu(gamma+t-1)/2 + 1)).

    Equivalently ceil(log2(1/eta + 1)) for the learning rate of the previous
    index, which keeps the quantization noise shrinking with the step size.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    return max(1, math.ceil(math.log2(mu * (gamma + t - 1) / 2.0 + 1.0)))


def downlink_log_bits(t: int, mu: float, gamma: float) -> int:
    """Broadcast width ceil(log2(1 + sqrt(1 - eta*mu)/eta)) at round t."""
    eta = lr_schedule(t, mu, gamma)
    if eta * mu >= 1.0:
        raise ValueError("requires eta * mu < 1")
    return max(1, math.ceil(math.log2(1.0 + math.sqrt(1.0 - eta * mu) / eta)))


def step_log_bits(r: int, f: float, p: float) -> int:
    """Stepwise-logarithmic width floor(log2(f + (r-1)/p)) for 1-based round r."""
    if r < 1:
        raise ValueError("round index r must be >= 1")
    if f < 2 or not p > 0:
        raise ValueError("requires f >= 2 and p > 0")
    return max(1, math.floor(math.log2(f + (r - 1) / p)))


def schedule_bits(spec: ScheduleSpec, t: int, mu: float, gamma: float) -> int:
    """Bit-width for 0-based round ``t`` under a schedule."""
    if spec.kind is ScheduleKind.CONSTANT:
        return spec.bits
    if spec.kind is ScheduleKind.WEIGHT_LOG:
        return weight_uplink_bits(t + 1, mu, gamma)
    if spec.kind is ScheduleKind.DOWNLINK_LOG:
        return downlink_log_bits(t, mu, gamma)
    return step_log_bits(t + 1, spec.f, spec.p)


# ---------------------------------------------------------------------------
# Random-stream addressing (public so reference loops can reproduce runs)
# ---------------------------------------------------------------------------

_ROUND_DOMAIN = 1
_OP_SAMPLE, _OP_BROADCAST, _OP_TRAIN, _OP_UPLINK = 0, 1, 2, 3


def sampling_stream(seed: int, t: int) -> np.random.Generator:
    return substream(seed, _ROUND_DOMAIN, t, _OP_SAMPLE)


def broadcast_stream(seed: int, t: int) -> np.random.Generator:
    return substream(seed, _ROUND_DOMAIN, t, _OP_BROADCAST)


def train_stream(seed: int, t: int, client: int) -> np.random.Generator:
    return substream(seed, _ROUND_DOMAIN, t, _OP_TRAIN, client)


def uplink_stream(seed: int, t: int, client: int) -> np.random.Generator:
    return substream(seed, _ROUND_DOMAIN, t, _OP_UPLINK, client)


# ---------------------------------------------------------------------------
# Round primitives
# ---------------------------------------------------------------------------

def sample_clients(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform K-subset of [0, n) without replacement, sorted for determinism."""
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    return np.sort(rng.choice(n, size=k, replace=False))


def aggregate_weights(uploads: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean of the uploaded (dequantized) weight vectors."""
    if len(uploads) == 0:
        raise ValueError("no uploads to aggregate")
    stack = np.stack([np.asarray(u, dtype=np.float64) for u in uploads])
    if stack.ndim != 2:
        raise ValueError("uploads must share one dimension")
    return stack.mean(axis=0)


def aggregate_differentials(prev_global: np.ndarray | None,
                            uploads: Sequence[np.ndarray]) -> np.ndarray:
    """Previous global plus the mean of the uploaded differentials."""
    if prev_global is None:
        raise StateError("differential aggregation requires the retained global model")
    return np.asarray(prev_global, dtype=np.float64) + aggregate_weights(uploads)


def _single_gain(config: FederationConfig, values: np.ndarray, bits: int) -> float:
    """Whole-vector pipeline gain: native fixes 2^(bits-1); tuned adds the
    percentile-matched extra gain (the one-layer case of layered gains)."""
    if config.structure is qz.Structure.NATIVE:
        return 2.0 ** (bits - 1)
    base, extras = qz.layered_gains(values, ((0, values.size),), bits)
    return base * float(extras[0])


def _pipeline_spec(config: FederationConfig, gain: float, bits: int) -> qz.QuantizerSpec:
    structure = config.structure
    if structure is qz.Structure.NATIVE and gain != 2.0 ** (bits - 1):
        structure = qz.Structure.TUNED
    return qz.QuantizerSpec(
        bits=bits, gain=gain, structure=structure, rounding=config.rounding,
        one_bit_enhanced=(bits == 1 and config.one_bit_enhanced),
    )


def broadcast(
    w_global: WeightVector,
    config: FederationConfig,
    bits: int,
    rng: np.random.Generator,
    frozen_extra_gains: np.ndarray | None = None,
) -> tuple[WeightVector, int, np.ndarray | None]:
    """Produce the model delivered to every selected client this round.

    One quantization draw is shared by all recipients.  Returns the delivered
    model, the accounted broadcast bits, and the per-layer extra gains used
    (layered mode only, for freezing in static mode).
    """
    values = w_global.values
    if config.downlink_mode is DownlinkMode.FLOAT:
        return w_global.copy(), qz.float_bits(values.size), None

    if config.downlink_mode is DownlinkMode.QUANTIZED:
        if config.grid is qz.GridKind.SYMMETRIC:
            peak = float(np.max(np.abs(values)))
            if peak > config.weight_bound:
                raise AssumptionViolation(
                    f"broadcast magnitude {peak:.6g} exceeds weight_bound "
                    f"{config.weight_bound:.6g}"
                )
            spec = qz.QuantizerSpec.symmetric_grid(config.weight_bound, bits)
        else:
            spec = _pipeline_spec(config, _single_gain(config, values, bits), bits)
        delivered = qz.quantize_vector(values, spec, rng).dequantize()
        return (w_global.with_values(delivered), qz.wire_bits(values.size, bits), None)

    # layered: per-layer pipeline gains matched to each layer's magnitude
    if frozen_extra_gains is None:
        base, extras = qz.layered_gains(values, w_global.layers, bits)
    else:
        base, extras = 2.0 ** (bits - 1), frozen_extra_gains
    delivered = np.empty_like(values)
    total_bits = 0
    for (start, stop), extra in zip(w_global.layers, extras):
        spec = _pipeline_spec(config, base * float(extra), bits)
        delivered[start:stop] = qz.quantize_vector(
            values[start:stop], spec, rng
        ).dequantize()
        total_bits += qz.wire_bits(stop - start, bits)
    return w_global.with_values(delivered), total_bits, extras


def _quantize_weight_upload(
    vec: np.ndarray, config: FederationConfig, bits: int,
    rng: np.random.Generator, t: int, client: int,
) -> np.ndarray:
    peak = float(np.max(np.abs(vec)))
    if config.grid is qz.GridKind.SYMMETRIC or config.structure is qz.Structure.TUNED:
        # gain is derived from the configured magnitude bound, so a breach
        # aborts instead of silently clamping
        if peak > config.weight_bound:
            raise AssumptionViolation(
                f"round {t} client {client}: local weight magnitude {peak:.6g} "
                f"exceeds weight_bound {config.weight_bound:.6g}"
            )
    if config.grid is qz.GridKind.SYMMETRIC:
        spec = qz.QuantizerSpec.symmetric_grid(config.weight_bound, bits)
    else:
        gain = (2.0 ** (bits - 1) if config.structure is qz.Structure.NATIVE
                else 2.0 ** (bits - 1) / config.weight_bound)
        spec = _pipeline_spec(config, gain, bits)
    return qz.quantize_vector(vec, spec, rng).dequantize()


def _quantize_differential_upload(
    diff: np.ndarray, config: FederationConfig, bits: int, rng: np.random.Generator,
) -> np.ndarray:
    peak = float(np.max(np.abs(diff)))
    if peak == 0.0:
        return np.zeros_like(diff)
    if config.rounding is qz.Rounding.STOCHASTIC:
        spec = qz.QuantizerSpec.symmetric_grid(peak, bits)
    else:
        spec = _pipeline_spec(config, qz.differential_gain(diff, bits), bits)
    return qz.quantize_vector(diff, spec, rng).dequantize()


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

@dataclass
class FederationState:
    w_global: WeightVector
    model: LossModel
    datasets: list[ClientDataset]
    optimum: OptimumInfo
    pooled: ClientDataset
    uplink_bits_cum: int = 0
    downlink_bits_cum: int = 0
    frozen_extra_gains: np.ndarray | None = None


def build_problem(config: FederationConfig) -> tuple[LossModel, list[ClientDataset]]:
    """Construct the synthetic model and client datasets a config describes."""
    if config.model is LossKind.QUADRATIC:
        model = LossModel(LossKind.QUADRATIC)
        datasets = gen_quadratic_clients(
            config.num_clients, config.dimension, config.spread,
            seed=config.seed, samples_per_client=config.samples_per_client,
            noise_std=config.noise_std,
        )
        return model, datasets
    model = LossModel(LossKind.LOGISTIC, config.regularization)
    scales = None
    if config.layer_feature_scales is not None:
        scales = np.repeat(np.asarray(config.layer_feature_scales, dtype=np.float64),
                           np.asarray(config.layer_sizes))
    source = gen_logistic_dataset(
        config.num_clients * config.samples_per_client, config.dimension,
        seed=config.seed, feature_scales=scales,
    )
    partition = partition_iid(source, config.num_clients, seed=config.seed + 1)
    return model, partition.client_shards


def init_state(
    config: FederationConfig,
    model: LossModel | None = None,
    datasets: list[ClientDataset] | None = None,
) -> FederationState:
    """Solve the optimum oracle and set up the zero-initialized global model."""
    if (model is None) != (datasets is None):
        raise ValueError("supply both model and datasets, or neither")
    if model is None:
        model, datasets = build_problem(config)
    optimum = solve_optimum(model, datasets)
    w0 = WeightVector(np.zeros(config.dimension), config.layer_bounds())
    return FederationState(
        w_global=w0, model=model, datasets=datasets, optimum=optimum,
        pooled=pooled_dataset(datasets),
    )


def run_round(
    state: FederationState, config: FederationConfig, t: int
) -> tuple[FederationState, RoundRecord]:
    """Execute round ``t``: download, local training, upload, aggregation."""
    gamma = gamma_offset(config.mu, config.lipschitz, config.local_steps)
    eta = lr_schedule(t, config.mu, gamma)

    if config.downlink_mode is DownlinkMode.FLOAT:
        bits_down = qz.FLOAT_BITS_PER_COORD
    else:
        bits_down = schedule_bits(config.downlink_schedule, t, config.mu, gamma)
    if config.uplink_mode is UplinkMode.FLOAT:
        bits_up = qz.FLOAT_BITS_PER_COORD
    else:
        bits_up = schedule_bits(config.uplink_schedule, t, config.mu, gamma)

    selected = sample_clients(
        config.num_clients, config.clients_per_round, sampling_stream(config.seed, t)
    )

    delivered, down_bits, extra_gains = broadcast(
        state.w_global, config, bits_down, broadcast_stream(config.seed, t),
        frozen_extra_gains=state.frozen_extra_gains,
    )
    frozen = state.frozen_extra_gains
    if (config.downlink_mode is DownlinkMode.LAYERED and config.lq_static
            and frozen is None):
        frozen = extra_gains

    uploads: list[np.ndarray] = []
    up_bits = 0
    for client in selected:
        w_local = local_train(
            delivered.values, state.model, state.datasets[client],
            config.local_steps, config.batch_size, eta,
            train_stream(config.seed, t, int(client)),
        )
        if config.uplink_mode is UplinkMode.FLOAT:
            uploads.append(w_local)
            up_bits += qz.float_bits(w_local.size)
        elif config.uplink_mode is UplinkMode.WEIGHT:
            uploads.append(_quantize_weight_upload(
                w_local, config, bits_up,
                uplink_stream(config.seed, t, int(client)), t, int(client),
            ))
            up_bits += qz.wire_bits(w_local.size, bits_up)
        else:
            diff = w_local - delivered.values
            uploads.append(_quantize_differential_upload(
                diff, config, bits_up, uplink_stream(config.seed, t, int(client)),
            ))
            up_bits += qz.wire_bits(diff.size, bits_up)

    if config.uplink_mode is UplinkMode.DIFFERENTIAL:
        new_values = aggregate_differentials(delivered.values, uploads)
    else:
        new_values = aggregate_weights(uploads)

    new_global = state.w_global.with_values(new_values)
    train_loss = loss(state.model, new_values, state.pooled.features,
                      state.pooled.labels)
    record = RoundRecord(
        round=t,
        eta=eta,
        bits_up=bits_up,
        bits_down=bits_down,
        train_loss=train_loss,
        gap=train_loss - state.optimum.f_star,
        uplink_bits_cum=state.uplink_bits_cum + up_bits,
        downlink_bits_cum=state.downlink_bits_cum + down_bits,
    )
    new_state = replace(
        state, w_global=new_global,
        uplink_bits_cum=record.uplink_bits_cum,
        downlink_bits_cum=record.downlink_bits_cum,
        frozen_extra_gains=frozen,
    )
    return new_state, record


def run_federation(
    config: FederationConfig,
    model: LossModel | None = None,
    datasets: list[ClientDataset] | None = None,
    observer: Callable[[int, WeightVector], None] | None = None,
) -> list[RoundRecord]:
    """Run all configured rounds; deterministic given the config seed."""
    state = init_state(config, model, datasets)
    records: list[RoundRecord] = []
    for t in range(config.rounds):
        state, record = run_round(state, config, t)
        records.append(record)
        if observer is not None:
            observer(t, state.w_global)
    return records
