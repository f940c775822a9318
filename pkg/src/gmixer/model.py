"""The full Graph Mixer regressor: embeddings, stacked layers, readout."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from gmixer.graphs import PaddedBatch
from gmixer.layers import GmnLayerParams, gmn_layer, readout
from gmixer.params import ParamRegistry
from gmixer.tensor import Tensor, gather_rows


@dataclass(frozen=True)
class Architecture:
    vocab_atoms: int
    vocab_bonds: int
    delta: float
    delta_mode: str = "log_mean"
    num_layers: int = 4
    d: int = 64
    d_e: int = 16
    n_max: int = 37
    token_hidden: int = 64
    channel_hidden: int = 128
    readout_hidden: int = 64
    activation: str = "gelu"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_meta(self) -> dict:
        return asdict(self)

    @classmethod
    def from_meta(cls, meta: dict) -> "Architecture":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in meta.items() if k in names})


class GmnModel:
    """Parameters plus forward pass; all weights live in ``self.registry``."""

    def __init__(self, arch: Architecture, seed: int = 0, dtype=np.float64):
        self.arch = arch
        reg = self.registry = ParamRegistry(rng_seed=seed, dtype=dtype)
        a = arch
        self.atom_embedding = reg.add("embed.atom", (a.vocab_atoms, a.d))
        self.bond_embedding = reg.add("embed.bond", (a.vocab_bonds, a.d_e))
        self.layers = [
            GmnLayerParams.create(reg, f"layer{k}", a.n_max, a.d, a.d_e, a.token_hidden, a.channel_hidden)
            for k in range(a.num_layers)
        ]
        self.head_w1 = reg.add("readout.w1", (a.d, a.readout_hidden))
        self.head_b1 = reg.add("readout.b1", (a.readout_hidden,), "zeros")
        self.head_w2 = reg.add("readout.w2", (a.readout_hidden, 1))
        self.head_b2 = reg.add("readout.b2", (1,), "zeros")

    @property
    def dtype(self):
        return self.registry.dtype

    def check_batch(self, batch: PaddedBatch) -> None:
        if batch.n_max != self.arch.n_max:
            raise ValueError(f"batch n_max {batch.n_max} != model n_max {self.arch.n_max}")
        if batch.atom_ids.max(initial=0) >= self.arch.vocab_atoms:
            raise ValueError(f"atom id {batch.atom_ids.max()} outside vocabulary of {self.arch.vocab_atoms}")
        live_bonds = batch.bond_types[batch.neighbor_mask]
        if live_bonds.size and live_bonds.max() >= self.arch.vocab_bonds:
            raise ValueError(f"bond type {live_bonds.max()} outside vocabulary of {self.arch.vocab_bonds}")

    def node_states(self, batch: PaddedBatch) -> Tensor:
        self.check_batch(batch)
        a = self.arch
        h = gather_rows(self.atom_embedding.value, batch.atom_ids)
        bonds = gather_rows(self.bond_embedding.value, batch.bond_types)
        for layer in self.layers:
            h = gmn_layer(h, batch, bonds, layer, a.delta, a.activation)
        return h

    def forward(self, batch: PaddedBatch) -> Tensor:
        """Predictions ``[B]`` for a padded batch."""
        h = self.node_states(batch)
        return readout(h, batch.node_mask, self.head_w1.value, self.head_b1.value,
                       self.head_w2.value, self.head_b2.value, self.arch.activation)

    __call__ = forward
