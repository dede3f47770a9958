"""Gated pool of four multimodal fusion experts.

Each layer routes every sample to exactly one expert, chosen by a
lightweight gate over both modality bags. The experts trade off how much
of the reference modality they use:

* ``TRANSFUSION`` fuses through full self-attention over both bags,
* ``BOTTLENECK_TRANSFUSION`` passes reference information through a few
  learned bottleneck tokens only,
* ``SNNFUSION`` adds a single pooled reference vector through
  self-normalizing blocks (linear, unit-alpha ELU, alpha dropout),
* ``DROPF2FUSION`` ignores the reference entirely and acts as a skip.

Routing is hard (top-1). To keep the gate trainable, the chosen expert's
output is scaled by the gate's softmax probability of that slot; the
unscaled straight-through variant sits behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import numcore as nc
from .attention import AttentionParams, self_attention
from .errors import ConfigError, DataError
from .numcore import Tensor


class ExpertId(IntEnum):
    TRANSFUSION = 0
    BOTTLENECK_TRANSFUSION = 1
    SNNFUSION = 2
    DROPF2FUSION = 3


EXPERT_COUNT = 4

# CLI abbreviations, also used in routing reports.
EXPERT_ABBREVIATIONS = {
    "tf": ExpertId.TRANSFUSION,
    "btf": ExpertId.BOTTLENECK_TRANSFUSION,
    "snn": ExpertId.SNNFUSION,
    "df": ExpertId.DROPF2FUSION,
}


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GateParams:
    """Per-modality projections and the shared logit map of the gate."""

    w1: Tensor
    w2: Tensor
    w: Tensor
    gain1: Tensor
    gain2: Tensor

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, d_gate: int | None = None) -> "GateParams":
        dg = d if d_gate is None else d_gate
        return cls(
            w1=Tensor(_fan_in_uniform(rng, (d, dg)), requires_grad=True),
            w2=Tensor(_fan_in_uniform(rng, (d, dg)), requires_grad=True),
            w=Tensor(_fan_in_uniform(rng, (dg, EXPERT_COUNT)), requires_grad=True),
            gain1=Tensor(np.ones(dg), requires_grad=True),
            gain2=Tensor(np.ones(dg), requires_grad=True),
        )

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.w", self.w),
            (f"{prefix}.gain1", self.gain1),
            (f"{prefix}.gain2", self.gain2),
        ]


@dataclass
class SnnParams:
    """Two self-normalizing blocks plus their input normalizer gains."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    gain1: Tensor
    gain2: Tensor
    dropout_rate: float = 0.25

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, dropout_rate: float = 0.25) -> "SnnParams":
        return cls(
            w1=Tensor(_fan_in_uniform(rng, (d, d)), requires_grad=True),
            b1=Tensor(np.zeros(d), requires_grad=True),
            w2=Tensor(_fan_in_uniform(rng, (d, d)), requires_grad=True),
            b2=Tensor(np.zeros(d), requires_grad=True),
            gain1=Tensor(np.ones(d), requires_grad=True),
            gain2=Tensor(np.ones(d), requires_grad=True),
            dropout_rate=dropout_rate,
        )

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.b1", self.b1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.b2", self.b2),
            (f"{prefix}.gain1", self.gain1),
            (f"{prefix}.gain2", self.gain2),
        ]


@dataclass
class MoMELayer:
    """Gate plus the parameter sets of all four experts for one stage."""

    gate: GateParams
    tf: AttentionParams
    btf_inner: AttentionParams
    btf_outer: AttentionParams
    bottleneck: Tensor
    snn: SnnParams
    enable_mask: tuple[bool, bool, bool, bool] = (True, True, True, True)
    call_counts: list[int] = field(default_factory=lambda: [0] * EXPERT_COUNT)

    def __post_init__(self):
        if len(self.enable_mask) != EXPERT_COUNT:
            raise ConfigError("enable_mask must have one flag per expert")
        if not any(self.enable_mask):
            raise ConfigError("at least one expert must be enabled")
        if self.bottleneck.shape[0] < 1:
            raise ConfigError("bottleneck needs at least one token")

    @classmethod
    def create(
        cls,
        d: int,
        rng: np.random.Generator,
        n_bottleneck: int = 2,
        head_count: int = 1,
        enable_mask: tuple[bool, ...] = (True, True, True, True),
        dropout_rate: float = 0.25,
    ) -> "MoMELayer":
        return cls(
            gate=GateParams.create(d, rng),
            tf=AttentionParams.create(d, rng, head_count),
            btf_inner=AttentionParams.create(d, rng, head_count),
            btf_outer=AttentionParams.create(d, rng, head_count),
            bottleneck=Tensor(0.02 * rng.standard_normal((n_bottleneck, d)), requires_grad=True),
            snn=SnnParams.create(d, rng, dropout_rate),
            enable_mask=tuple(bool(b) for b in enable_mask),
        )

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        named = self.gate.parameters(f"{prefix}.gate")
        named += self.tf.parameters(f"{prefix}.tf")
        named += self.btf_inner.parameters(f"{prefix}.btf_inner")
        named += self.btf_outer.parameters(f"{prefix}.btf_outer")
        named.append((f"{prefix}.bottleneck", self.bottleneck))
        named += self.snn.parameters(f"{prefix}.snn")
        return named


@dataclass
class RoutingRecord:
    """Which expert a (layer, sample) pair was dispatched to."""

    layer: int
    sample_id: str
    expert: ExpertId
    logits: tuple[float, float, float, float]


ROUTING_LOG_HEADER = "layer,sample_id,expert,logit0,logit1,logit2,logit3"


def format_routing_record(record: RoutingRecord) -> str:
    logits = ",".join(f"{v:.10g}" for v in record.logits)
    return f"{record.layer},{record.sample_id},{int(record.expert)},{logits}"


@dataclass
class GateDecision:
    expert: ExpertId
    logits: Tensor  # [1, 4], all slots regardless of mask
    probability: Tensor  # [1, 1], softmax over enabled slots at the chosen one


def gate(
    f1: Tensor,
    f2: Tensor,
    params: GateParams,
    enable_mask: tuple[bool, ...] = (True, True, True, True),
) -> GateDecision:
    """Score the expert pool from both bags and pick the top slot.

    Each modality is projected, RMS-normalized, passed through a GELU and
    mean-pooled over tokens; both pooled vectors are mapped to the four
    logits and summed. Disabled slots are excluded from both the argmax
    and the probability normalization. Ties break to the lowest enabled
    slot.
    """
    if f1.shape[0] < 1 or f2.shape[0] < 1:
        raise DataError("gate needs nonempty bags for both modalities")
    if not any(enable_mask):
        raise ConfigError("cannot gate with every expert disabled")
    pooled1 = nc.mean_rows(nc.gelu(nc.rmsnorm(nc.matmul(f1, params.w1), params.gain1)))
    pooled2 = nc.mean_rows(nc.gelu(nc.rmsnorm(nc.matmul(f2, params.w2), params.gain2)))
    logits = nc.add(nc.matmul(pooled1, params.w), nc.matmul(pooled2, params.w))

    enabled = [i for i, on in enumerate(enable_mask) if on]
    masked = np.where(enable_mask, logits.data[0], -np.inf)
    chosen = ExpertId(int(np.argmax(masked)))

    probs = nc.softmax_rows(nc.select_columns(logits, enabled))
    probability = nc.select_columns(probs, [enabled.index(chosen)])
    return GateDecision(expert=chosen, logits=logits, probability=probability)


def transfusion(
    f1: Tensor, f2: Tensor, params: AttentionParams, key_chunk: int | None = None
) -> Tensor:
    """Self-attend over the stacked bags, keep the encoded modality's rows."""
    fused = self_attention(nc.concat_rows([f1, f2]), params, key_chunk=key_chunk)
    return nc.slice_rows(fused, 0, f1.shape[0])


def bottleneck_transfusion(
    f1: Tensor,
    f2: Tensor,
    bottleneck: Tensor,
    inner: AttentionParams,
    outer: AttentionParams,
    key_chunk: int | None = None,
) -> Tensor:
    """Fuse through learned bottleneck tokens; the bags never attend directly.

    Stage one self-attends over [bottleneck; f2] and keeps the refreshed
    bottleneck rows; stage two self-attends over [f1; refreshed] and
    keeps the f1 rows.
    """
    n_b = bottleneck.shape[0]
    refreshed = nc.slice_rows(
        self_attention(nc.concat_rows([bottleneck, f2]), inner, key_chunk=key_chunk), 0, n_b
    )
    fused = self_attention(nc.concat_rows([f1, refreshed]), outer, key_chunk=key_chunk)
    return nc.slice_rows(fused, 0, f1.shape[0])


def snnfusion(
    f1: Tensor,
    f2: Tensor,
    params: SnnParams,
    training: bool,
    rng: np.random.Generator,
) -> Tensor:
    """Self-normalizing fusion: per-token block on f1 plus pooled f2 block."""

    def block(x, w, b, gain):
        pre = nc.add(nc.matmul(nc.rmsnorm(x, gain), w), b)
        return nc.alpha_dropout(nc.elu(pre), params.dropout_rate, training, rng)

    own = block(f1, params.w1, params.b1, params.gain1)
    reference = nc.mean_rows(block(f2, params.w2, params.b2, params.gain2))
    return nc.add(own, reference)


def dropf2fusion(f1: Tensor, f2: Tensor) -> Tensor:
    """Skip expert: the reference modality contributes nothing."""
    return f1


def mome_forward(
    f1: Tensor,
    f2: Tensor,
    layer: MoMELayer,
    training: bool = False,
    rng: np.random.Generator | None = None,
    routing_log: list[RoutingRecord] | None = None,
    sample_id: str = "",
    layer_index: int = 0,
    key_chunk: int | None = None,
    scale_by_gate_prob: bool = True,
) -> Tensor:
    """Route one sample through exactly one expert of this layer."""
    decision = gate(f1, f2, layer.gate, layer.enable_mask)
    expert = decision.expert
    layer.call_counts[expert] += 1
    if expert == ExpertId.TRANSFUSION:
        out = transfusion(f1, f2, layer.tf, key_chunk)
    elif expert == ExpertId.BOTTLENECK_TRANSFUSION:
        out = bottleneck_transfusion(
            f1, f2, layer.bottleneck, layer.btf_inner, layer.btf_outer, key_chunk
        )
    elif expert == ExpertId.SNNFUSION:
        if training and rng is None:
            raise ConfigError("snnfusion in training mode needs an rng stream")
        out = snnfusion(f1, f2, layer.snn, training, rng or nc.rng_stream(0))
    else:
        out = dropf2fusion(f1, f2)
    if scale_by_gate_prob:
        out = nc.mul(out, decision.probability)
    if routing_log is not None:
        routing_log.append(
            RoutingRecord(
                layer=layer_index,
                sample_id=sample_id,
                expert=expert,
                logits=tuple(float(v) for v in decision.logits.data[0]),
            )
        )
    return out
