"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from gmixer.params import ParamRegistry
from gmixer.tensor import ComputeTape, Tensor, backward

ABS_FLOOR = 1e-8
JITTER = 0.3  # relative to a tensor's own std
CONST_JITTER = 0.1  # for constant tensors (biases, gammas)


@dataclass(frozen=True)
class Probe:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    error: float


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    return diff if denom < ABS_FLOOR else diff / denom


def grad_check_probes(model_fn: Callable[[], Tensor], registry: ParamRegistry,
                      probe_count: int = 50, h: float = 1e-5, seed: int = 0,
                      params: list[str] | None = None) -> list[Probe]:
    """Compare tape gradients with ``(f(t+h) - f(t-h)) / 2h`` at sampled coordinates.

    The first probes visit every parameter once; later ones draw a parameter
    uniformly and then a coordinate inside it, so small tensors such as biases
    are always covered. ``model_fn`` must be deterministic and return a scalar.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = params if params is not None else registry.names()
    registry.zero_grad()
    with ComputeTape() as tape:
        loss = model_fn()
    backward(tape, loss)
    analytic = {n: registry[n].grad.copy() for n in names}
    registry.zero_grad()

    rng = np.random.default_rng(seed)
    probes = []
    for k in range(probe_count):
        name = names[k] if k < len(names) else names[rng.integers(len(names))]
        p = registry[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        base = p.data.copy()
        bumped = base.copy()
        bumped[idx] = base[idx] + h
        p.set_value(bumped)
        f_plus = model_fn().item()
        bumped[idx] = base[idx] - h
        p.set_value(bumped)
        f_minus = model_fn().item()
        p.set_value(base)
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name][idx])
        probes.append(Probe(name, idx, a, numeric, relative_error(a, numeric)))
    return probes


def grad_check(model_fn: Callable[[], Tensor], registry: ParamRegistry,
               probe_count: int = 50, h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error over ``probe_count`` sampled coordinates."""
    probes = grad_check_probes(model_fn, registry, probe_count, h, seed)
    return max((p.error for p in probes), default=0.0)


# ---------------------------------------------------------------------------
# whole-model check used by the CLI and the acceptance suite


def random_graph(rng: np.random.Generator, nodes: int, vocab_atoms: int = 6, vocab_bonds: int = 3,
                 extra_edge_p: float = 0.3):
    """Random connected graph (spanning tree plus extra edges); one node gives no bonds."""
    from gmixer.graphs import MolecularGraph

    bonds = {}
    for i in range(1, nodes):
        j = int(rng.integers(i))
        bonds[(j, i)] = int(rng.integers(vocab_bonds))
    for i in range(nodes):
        for j in range(i + 1, nodes):
            if (i, j) not in bonds and rng.random() < extra_edge_p:
                bonds[(i, j)] = int(rng.integers(vocab_bonds))
    atoms = tuple(int(a) for a in rng.integers(1, vocab_atoms, size=nodes))
    return MolecularGraph(atoms, tuple((u, v, t) for (u, v), t in sorted(bonds.items())),
                          float(rng.normal()))


def group_of(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2])


def model_gradcheck(seed: int = 0, nodes: int = 5, graphs: int = 3, n_max: int = 8,
                    layers: int = 2, d: int = 16, probes: int = 200, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of the full regressor on random small graphs.

    Parameters are jittered away from their initial values (zero biases,
    unit gammas) so no coordinate sits on a degenerate point. The jitter is
    relative to each tensor's spread so activations keep their initial scale;
    an absolute jitter inflates the residual stream until readout units
    saturate and finite differences drown in roundoff. Returns the worst
    relative error per parameter group.
    """
    from gmixer.graphs import compute_degree_stats, pad_batch
    from gmixer.model import Architecture, GmnModel
    from gmixer.training import l1_loss

    rng = np.random.default_rng(seed)
    sample = [random_graph(rng, nodes) for _ in range(graphs)]
    try:
        delta = compute_degree_stats(sample).delta
    except ValueError:
        delta = 1.0
    arch = Architecture(vocab_atoms=6, vocab_bonds=3, delta=delta, num_layers=layers, d=d,
                        d_e=max(d // 4, 1), n_max=max(n_max, nodes), token_hidden=d,
                        channel_hidden=2 * d, readout_hidden=d)
    model = GmnModel(arch, seed=seed, dtype=np.float64)
    for p in model.registry:
        spread = float(p.data.std())
        scale = JITTER * spread if spread > 0 else CONST_JITTER
        p.set_value(p.data + scale * rng.standard_normal(p.shape))
    batch = pad_batch(sample, arch.n_max)
    targets = batch.targets

    worst: dict[str, float] = {group_of(n): 0.0 for n in model.registry.names()}
    for pr in grad_check_probes(lambda: l1_loss(model(batch), targets), model.registry,
                                probes, h, seed=seed + 1):
        g = group_of(pr.param)
        worst[g] = max(worst[g], pr.error)
    return worst
