"""Building blocks: frequency transformations, dense time-frequency
convolutions, and latent-source attention.

All blocks map [*, c, F, T] features to [*, c, F, T]; an optional leading
batch axis is accepted everywhere. Frequency-axis layers share their weights
across channels and time frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConditionError, ConfigError, DimensionError
from .nn import BatchNorm, Conv2d, Embedding, Linear, Module, ModuleList
from .numerics import ops
from .numerics.tensor import Parameter, Tensor

VARIANTS = ("lasaft", "lightsaft")


@dataclass(frozen=True)
class TdfSpec:
    """Two-stage frequency FC: F -> hidden -> F with hidden = max(1, F // bf)."""

    freq_dim: int
    bottleneck_factor: int

    def __post_init__(self):
        if self.freq_dim < 1 or self.bottleneck_factor < 1:
            raise ConfigError(f"TdfSpec needs positive dims, got {self}")

    @property
    def hidden(self) -> int:
        return max(1, self.freq_dim // self.bottleneck_factor)


@dataclass(frozen=True)
class TfcSpec:
    """Densely connected conv stack; layer i sees concat(input, all earlier outputs)."""

    in_channels: int
    growth: int
    num_layers: int
    kernel: tuple = (3, 3)

    def __post_init__(self):
        if min(self.in_channels, self.growth, self.num_layers) < 1:
            raise ConfigError(f"TfcSpec needs positive dims, got {self}")
        kF, kT = self.kernel
        if kF % 2 == 0 or kT % 2 == 0:
            raise ConfigError(f"TfcSpec kernel must be odd for same padding, got {self.kernel}")


@dataclass(frozen=True)
class SaftSpec:
    """Latent-source frequency transformation configuration."""

    variant: str
    freq_dim: int
    bottleneck_factor: int
    num_latent: int
    key_dim: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if min(self.freq_dim, self.bottleneck_factor, self.num_latent, self.key_dim) < 1:
            raise ConfigError(f"SaftSpec needs positive dims, got {self}")

    @property
    def hidden(self) -> int:
        return max(1, self.freq_dim // self.bottleneck_factor)


class LatentSourceBank(Module):
    """Learnable key vectors, one per latent source."""

    def __init__(self, num_latent: int, key_dim: int, rng, dtype=np.float32):
        super().__init__()
        self.num_latent = num_latent
        self.key_dim = key_dim
        self.keys = Parameter(rng.standard_normal((num_latent, key_dim)).astype(dtype))


class ConditionEmbedding(Embedding):
    """Query table: one learned key_dim vector per condition id."""

    @property
    def num_conditions(self) -> int:
        return self.num_rows


def make_query(condition_id: int, embedding: ConditionEmbedding) -> Tensor:
    """Row lookup producing the [1, d_k] query; differentiable into the table."""
    n = embedding.table.shape[0]
    if not 0 <= int(condition_id) < n:
        raise ConditionError(f"condition id {condition_id} out of range [0, {n})")
    return ops.take_rows(embedding.table, [int(condition_id)])


def make_query_batch(condition_ids, embedding: ConditionEmbedding) -> Tensor:
    n = embedding.table.shape[0]
    ids = [int(i) for i in condition_ids]
    for i in ids:
        if not 0 <= i < n:
            raise ConditionError(f"condition id {i} out of range [0, {n})")
    return ops.take_rows(embedding.table, ids)


def attention_weights(query: Tensor, keys: Tensor, canonical: bool = False) -> Tensor:
    """softmax(q @ keys^T / sqrt(d_k)) -> [B, S] mixing weights.

    With ``canonical`` (single-query path) the softmax normalizer is summed in
    sorted order, so swapping two key rows permutes the weights bitwise.
    """
    query, keys = ops.as_tensor(query), ops.as_tensor(keys)
    if keys.ndim != 2 or query.ndim != 2:
        raise DimensionError("attention_weights: query and keys must be 2-D")
    if query.shape[1] != keys.shape[1]:
        raise DimensionError(
            f"attention_weights: operand 'query' d_k {query.shape[1]} != "
            f"operand 'keys' d_k {keys.shape[1]}")
    d_k = keys.shape[1]
    scores = ops.mul(ops.matmul(query, ops.moveaxis(keys, 0, 1)),
                     1.0 / math.sqrt(d_k))
    if canonical and query.shape[0] == 1:
        e = ops.exp(ops.sub(scores, float(scores.data.max())))
        return ops.div(e, ops.sum_canonical(e))
    return ops.softmax(scores, axis=-1)


def attention_aggregate(query: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Latent-source mixing: attention weights applied over the value stack.

    query [1, d_k] with values [S, ...] -> [...]; batched query [B, d_k]
    needs values [S, B, ...] and returns [B, ...].
    """
    query, keys, values = (ops.as_tensor(t) for t in (query, keys, values))
    if values.shape[0] != keys.shape[0]:
        raise DimensionError(
            f"attention_aggregate: operand 'values' has {values.shape[0]} latent "
            f"sources but operand 'keys' has {keys.shape[0]}")
    if values.ndim == 5:  # batched values [S, B, c, F, T]
        if values.shape[1] != query.shape[0]:
            raise DimensionError(
                f"attention_aggregate: batch {values.shape[1]} of operand 'values' "
                f"!= batch {query.shape[0]} of operand 'query'")
        if values.shape[1] == 1:  # batch of one takes the canonical path below
            squeezed = ops.reshape(values, (values.shape[0],) + tuple(values.shape[2:]))
            mixed = attention_aggregate(query, keys, squeezed)
            return ops.reshape(mixed, (1,) + tuple(mixed.shape))
        weights = attention_weights(query, keys)
        return ops.latent_mix(weights, values)
    if query.shape[0] != 1:
        raise DimensionError(
            "attention_aggregate: batched query needs [S, B, ...] values")
    weights = attention_weights(query, keys, canonical=True)
    return ops.latent_mix(ops.reshape(weights, (keys.shape[0],)), values)


class FcBlock(Module):
    """Fully connected layer + feature-axis batch norm + ReLU on the last axis."""

    def __init__(self, in_features: int, out_features: int, rng, dtype=np.float32):
        super().__init__()
        self.fc = Linear(in_features, out_features, rng, dtype)
        self.bn = BatchNorm(out_features, axis=-1, dtype=dtype)

    def forward(self, x):
        return ops.relu(self.bn(self.fc(x)))


class Tdf(Module):
    """Frequency bottleneck: F -> F//bf -> F, each stage an FcBlock."""

    def __init__(self, spec: TdfSpec, rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.fc1 = FcBlock(spec.freq_dim, spec.hidden, rng, dtype)
        self.fc2 = FcBlock(spec.hidden, spec.freq_dim, rng, dtype)

    def forward(self, x):
        if x.shape[-2] != self.spec.freq_dim:
            raise DimensionError(
                f"tdf: operand 'x' has F={x.shape[-2]}, block expects {self.spec.freq_dim}")
        xt = ops.moveaxis(x, -2, -1)
        return ops.moveaxis(self.fc2(self.fc1(xt)), -1, -2)


class ConvBnRelu(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel, rng,
                 dtype=np.float32):
        super().__init__()
        kF, kT = kernel
        self.conv = Conv2d(in_channels, out_channels, kernel, rng,
                           padding=(kF // 2, kT // 2), dtype=dtype)
        self.bn = BatchNorm(out_channels, axis=-3, dtype=dtype)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class Tfc(Module):
    """Densely connected conv block; output is the last layer's growth channels."""

    def __init__(self, spec: TfcSpec, rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        layers = []
        for i in range(spec.num_layers):
            cin = spec.in_channels + i * spec.growth
            layers.append(ConvBnRelu(cin, spec.growth, spec.kernel, rng, dtype))
        self.layers = ModuleList(layers)

    def forward(self, x):
        outputs = []
        for i, layer in enumerate(self.layers):
            inp = x if i == 0 else ops.concat([x] + outputs, axis=-3)
            outputs.append(layer(inp))
        return outputs[-1]


class TfcTdf(Module):
    """TFC followed by a residual TDF; condition-independent."""

    conditioned = False

    def __init__(self, tfc_spec: TfcSpec, tdf_spec: TdfSpec, rng, dtype=np.float32):
        super().__init__()
        self.tfc = Tfc(tfc_spec, rng, dtype)
        self.tdf = Tdf(tdf_spec, rng, dtype)

    def forward(self, x):
        h = self.tfc(x)
        return ops.add(h, self.tdf(h))


class SaftFt(Module):
    """Latent-source attentive frequency transformation (both variants).

    Phase 1 runs one F -> hidden FcBlock per latent source. Phase 2 differs:
    the lasaft variant feeds the concatenation of every phase-1 output through
    a per-source FC (all-pairs connections), while the lightsaft variant maps
    each phase-1 output through one shared hidden -> F FC. The per-source
    values are then mixed by query/key attention.
    """

    def __init__(self, spec: SaftSpec, rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        S, hid, F = spec.num_latent, spec.hidden, spec.freq_dim
        self.phase1 = ModuleList([FcBlock(F, hid, rng, dtype) for _ in range(S)])
        if spec.variant == "lasaft":
            self.phase2 = ModuleList([FcBlock(S * hid, F, rng, dtype) for _ in range(S)])
        else:
            self.phase2 = FcBlock(hid, F, rng, dtype)
        self.bank = LatentSourceBank(S, spec.key_dim, rng, dtype)

    def forward(self, x, query: Tensor):
        if x.shape[-2] != self.spec.freq_dim:
            raise DimensionError(
                f"saft: operand 'x' has F={x.shape[-2]}, block expects {self.spec.freq_dim}")
        xt = ops.moveaxis(x, -2, -1)
        hidden = [blk(xt) for blk in self.phase1]
        if self.spec.variant == "lasaft":
            joined = ops.concat(hidden, axis=-1)
            values = [blk(joined) for blk in self.phase2]
        else:
            values = [self.phase2(h) for h in hidden]
        stacked = ops.stack(values, axis=0)
        mixed = attention_aggregate(query, self.bank.keys, stacked)
        return ops.moveaxis(mixed, -1, -2)


class SaftBlock(Module):
    """TFC followed by a residual conditioned frequency transformation."""

    conditioned = True

    def __init__(self, tfc_spec: TfcSpec, saft_spec: SaftSpec, rng, dtype=np.float32):
        super().__init__()
        self.tfc = Tfc(tfc_spec, rng, dtype)
        self.ft = SaftFt(saft_spec, rng, dtype)

    def forward(self, x, query: Tensor):
        h = self.tfc(x)
        return ops.add(h, self.ft(h, query))


def count_params(module: Module) -> int:
    """Learnable scalars only; BN running stats are buffers and excluded."""
    return sum(p.size for _, p in module.named_parameters())
