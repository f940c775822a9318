"""Graph Mixer layer building blocks.

Node states are laid out as ``[B, n_max, d]``; per-node neighbour data as
``[B, n_max, D, ...]`` following :class:`~gmixer.graphs.PaddedBatch`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from gmixer.graphs import PaddedBatch
from gmixer.params import Parameter, ParamRegistry
from gmixer.tensor import (
    Tensor,
    add,
    concat,
    gather_rows,
    layer_norm,
    masked_reduce,
    matmul,
    mlp2,
    mul,
    reshape,
    swap_last,
    take,
    tensor_sum,
)

LN_EPS = 1e-5


class ScalerKind(enum.IntEnum):
    IDENTITY = 0
    AMPLIFY = 1
    ATTENUATE = -1


class AggregatorKind(enum.Enum):
    MAX = "max"
    MIN = "min"
    MEAN = "mean"


# channel layout of the 9d aggregation output: scaler-major, aggregator-minor
SCALER_ORDER = (ScalerKind.IDENTITY, ScalerKind.AMPLIFY, ScalerKind.ATTENUATE)
AGGREGATOR_ORDER = (AggregatorKind.MAX, AggregatorKind.MIN, AggregatorKind.MEAN)


def degree_scaler(d: int, alpha: ScalerKind | int, delta: float) -> float:
    """``(log(d+1)/delta) ** alpha``; 1 for the identity scaler, 0 when d == 0 otherwise."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    alpha = ScalerKind(alpha)
    if alpha is ScalerKind.IDENTITY:
        return 1.0
    if d < 0:
        raise ValueError(f"degree must be non-negative, got {d}")
    if d == 0:
        return 0.0
    ratio = math.log(d + 1) / delta
    return ratio if alpha is ScalerKind.AMPLIFY else 1.0 / ratio


def scaler_factors(degrees: np.ndarray, delta: float, dtype=np.float64) -> np.ndarray:
    """Vectorised scalers: ``[..., 3]`` in SCALER_ORDER, all zero for d == 0."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    deg = np.asarray(degrees)
    live = deg > 0
    ratio = np.log(np.where(live, deg, 1) + 1.0) / delta
    out = np.stack([np.ones_like(ratio), ratio, 1.0 / ratio], axis=-1)
    return np.where(live[..., None], out, 0.0).astype(dtype)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class MixerParams:
    ln1_gamma: Parameter
    ln1_beta: Parameter
    tok_w1: Parameter
    tok_b1: Parameter
    tok_w2: Parameter
    tok_b2: Parameter
    ln2_gamma: Parameter
    ln2_beta: Parameter
    ch_w1: Parameter
    ch_b1: Parameter
    ch_w2: Parameter
    ch_b2: Parameter

    @classmethod
    def create(cls, reg: ParamRegistry, prefix: str, n_max: int, d: int,
               tok_hidden: int, ch_hidden: int) -> "MixerParams":
        return cls(
            reg.add(f"{prefix}.ln1.gamma", (d,), "ones"),
            reg.add(f"{prefix}.ln1.beta", (d,), "zeros"),
            reg.add(f"{prefix}.token.w1", (n_max, tok_hidden)),
            reg.add(f"{prefix}.token.b1", (tok_hidden,), "zeros"),
            reg.add(f"{prefix}.token.w2", (tok_hidden, n_max)),
            reg.add(f"{prefix}.token.b2", (n_max,), "zeros"),
            reg.add(f"{prefix}.ln2.gamma", (d,), "ones"),
            reg.add(f"{prefix}.ln2.beta", (d,), "zeros"),
            reg.add(f"{prefix}.channel.w1", (d, ch_hidden)),
            reg.add(f"{prefix}.channel.b1", (ch_hidden,), "zeros"),
            reg.add(f"{prefix}.channel.w2", (ch_hidden, d)),
            reg.add(f"{prefix}.channel.b2", (d,), "zeros"),
        )

    def mlp_params(self) -> list[Parameter]:
        return [self.tok_w1, self.tok_b1, self.tok_w2, self.tok_b2,
                self.ch_w1, self.ch_b1, self.ch_w2, self.ch_b2]


@dataclass
class GmnLayerParams:
    pre_w: Parameter    # (2d + d_e) x d
    pre_b: Parameter
    post_w: Parameter   # 9d x d
    post_b: Parameter
    mixer: MixerParams

    @classmethod
    def create(cls, reg: ParamRegistry, prefix: str, n_max: int, d: int, d_e: int,
               tok_hidden: int, ch_hidden: int) -> "GmnLayerParams":
        return cls(
            reg.add(f"{prefix}.pre.w", (2 * d + d_e, d)),
            reg.add(f"{prefix}.pre.b", (d,), "zeros"),
            reg.add(f"{prefix}.post.w", (9 * d, d)),
            reg.add(f"{prefix}.post.b", (d,), "zeros"),
            MixerParams.create(reg, f"{prefix}.mixer", n_max, d, tok_hidden, ch_hidden),
        )


# ---------------------------------------------------------------------------
# message passing


def _mask_tensor(mask: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(mask, dtype=dtype)[..., None]


def pretransform_messages(h: Tensor, neighbors: np.ndarray, bond_emb: Tensor,
                          w: Tensor, b: Tensor) -> Tensor:
    """``W . concat(h_i, h_j, e_ij) + b`` for every neighbour slot.

    Returns ``[B, n_max, D, d]``. ``W`` is applied blockwise (receiver rows,
    sender rows, bond rows) so node states are projected once per node rather
    than once per slot. Slots outside the neighbour mask hold well-defined but
    meaningless values; aggregation ignores them.
    """
    B, N, d = h.shape
    D = neighbors.shape[2]
    if bond_emb.shape[:3] != (B, N, D):
        raise ValueError(f"bond embedding shape {bond_emb.shape} does not match wiring {(B, N, D)}")
    if w.shape[0] != 2 * d + bond_emb.shape[3]:
        raise ValueError(f"pretransform weight {w.shape} expects input width {2 * d + bond_emb.shape[3]}")
    own = reshape(matmul(h, take(w, slice(0, d))), (B, N, 1, -1))
    sender = reshape(matmul(h, take(w, slice(d, 2 * d))), (B * N, -1))
    index = neighbors + (np.arange(B) * N)[:, None, None]
    from_nbr = gather_rows(sender, index)
    from_bond = matmul(bond_emb, take(w, slice(2 * d, None)))
    return add(add(add(from_nbr, from_bond), own), b)


def aggregate_multi(messages: Tensor, neighbor_mask: np.ndarray, degrees: np.ndarray,
                    delta: float, node_mask: np.ndarray | None = None) -> Tensor:
    """Combine max/min/mean aggregators with identity/amplify/attenuate scalers.

    Output ``[B, n_max, 9d]``: for each scaler (outer) and aggregator (inner)
    the block ``s(d_i) * a(messages into i)``. Isolated and masked nodes get
    zeros.
    """
    degrees = np.asarray(degrees)
    if node_mask is not None:
        degrees = np.where(node_mask, degrees, 0)
    base = concat([masked_reduce(messages, neighbor_mask, axis=2, kind=a.value)
                   for a in AGGREGATOR_ORDER], axis=-1)
    factors = scaler_factors(degrees, delta, dtype=messages.dtype)
    return concat([mul(base, factors[..., k:k + 1]) for k in range(len(SCALER_ORDER))], axis=-1)


# ---------------------------------------------------------------------------
# mixer


def token_mixing(x: Tensor, mask: np.ndarray, p: MixerParams, activation: str = "gelu") -> Tensor:
    """First half of the mixer: ``transpose(MLP_tok(transpose(LN(x)))) + x`` with masking."""
    m = _mask_tensor(mask, x.dtype)
    u = mul(layer_norm(x, p.ln1_gamma.value, p.ln1_beta.value, LN_EPS), m)
    t = swap_last(mlp2(swap_last(u), p.tok_w1.value, p.tok_b1.value,
                       p.tok_w2.value, p.tok_b2.value, activation))
    return add(mul(t, m), x)


def channel_mixing(y: Tensor, p: MixerParams, activation: str = "gelu") -> Tensor:
    v = layer_norm(y, p.ln2_gamma.value, p.ln2_beta.value, LN_EPS)
    return add(mlp2(v, p.ch_w1.value, p.ch_b1.value, p.ch_w2.value, p.ch_b2.value, activation), y)


def mixer_block(x: Tensor, mask: np.ndarray, p: MixerParams, activation: str = "gelu") -> Tensor:
    """Token mixing across node slots, then channel mixing per node; masked rows end at zero."""
    n_max, d = x.shape[-2:]
    if p.tok_w1.shape[0] != n_max or p.ln1_gamma.shape[0] != d:
        raise ValueError(f"mixer params built for n_max={p.tok_w1.shape[0]}, d={p.ln1_gamma.shape[0]}; "
                         f"input is {x.shape}")
    y = token_mixing(x, mask, p, activation)
    return mul(channel_mixing(y, p, activation), _mask_tensor(mask, x.dtype))


def gmn_layer(h: Tensor, batch: PaddedBatch, bond_emb: Tensor, p: GmnLayerParams,
              delta: float, activation: str = "gelu", return_x: bool = False):
    """One message-passing + mixer update; ``return_x`` also yields the pre-mixer features."""
    msgs = pretransform_messages(h, batch.neighbors, bond_emb, p.pre_w.value, p.pre_b.value)
    agg = aggregate_multi(msgs, batch.neighbor_mask, batch.degrees, delta, batch.node_mask)
    x = add(matmul(agg, p.post_w.value), p.post_b.value)
    out = mixer_block(x, batch.node_mask, p.mixer, activation)
    return (out, x) if return_x else out


def readout(h: Tensor, mask: np.ndarray, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
            activation: str = "gelu") -> Tensor:
    """Masked mean-pool over node slots, then a two-layer head to one scalar per graph."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        raise ValueError("readout needs at least one unmasked node per graph")
    weights = (mask / counts[..., None]).astype(h.dtype)[..., None]
    pooled = tensor_sum(mul(h, weights), axis=-2)
    lead = pooled.shape[:-1]
    if not lead:
        pooled = reshape(pooled, (1, pooled.shape[0]))
    out = mlp2(pooled, w1, b1, w2, b2, activation)
    return reshape(out, lead)


# ---------------------------------------------------------------------------
# attention baseline (benchmark only)


class AttentionReference:
    """Single-head softmax attention with fixed random projections; forward only."""

    def __init__(self, d: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        limit = math.sqrt(3.0 / d)
        self.d = d
        self.wq, self.wk, self.wv = (rng.uniform(-limit, limit, (d, d)).astype(dtype) for _ in range(3))

    def weights(self, x: np.ndarray) -> np.ndarray:
        q = x @ self.wq
        k = x @ self.wk
        scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(self.d)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        return scores

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-2] < 1:
            raise ValueError("attention needs at least one row")
        return self.weights(x) @ (x @ self.wv)


def attention_forward_reference(x: np.ndarray, seed: int = 0) -> np.ndarray:
    x = np.asarray(x)
    return AttentionReference(x.shape[-1], seed, x.dtype)(x)


def attention_flops(n: int, d: int) -> dict[str, int]:
    """Multiply-add counts (2 flops each) of one attention forward."""
    return {
        "projections": 3 * 2 * n * d * d,
        "scores": 2 * n * n * d,
        "weighted_sum": 2 * n * n * d,
    }


def token_mixing_flops(n: int, d: int, hidden: int) -> dict[str, int]:
    return {"token_mlp": 2 * (2 * d * n * hidden)}
