"""Deterministic generator of ZINC-like molecular graphs.

Produces valence-respecting heavy-atom graphs with 9-37 atoms, a handful of
5/6-membered rings, and a logP-style regression target built from additive
atom contributions minus ring and branching penalties. Used when the real
ZINC subset is not available; the output is plain graph JSONL.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from gmixer.graphs import MolecularGraph

# (symbol, max valence, sampling weight, logP-style contribution)
ATOMS = (
    ("C", 4, 0.700, 0.35),
    ("N", 3, 0.110, -0.70),
    ("O", 2, 0.100, -0.55),
    ("F", 1, 0.025, 0.40),
    ("S", 2, 0.020, 0.60),
    ("Cl", 1, 0.020, 0.70),
    ("Br", 1, 0.008, 0.90),
    ("P", 3, 0.004, -0.20),
    ("I", 1, 0.003, 1.10),
    ("N+", 4, 0.006, -1.30),
    ("O-", 1, 0.004, -1.10),
)
BOND_NAMES = ("single", "double", "triple", "aromatic")
BOND_CONTRIB = (0.0, -0.25, -0.40, 0.15)
BOND_ORDER = (1.0, 2.0, 3.0, 1.5)
MIN_ATOMS, MAX_ATOMS = 9, 37
TARGET_OFFSET = -0.46
TARGET_SCALE = 1.0

_VALENCE = np.array([a[1] for a in ATOMS])
_WEIGHTS = np.array([a[2] for a in ATOMS])
_WEIGHTS = _WEIGHTS / _WEIGHTS.sum()
_CONTRIB = np.array([a[3] for a in ATOMS])


def _tree_distances(adj: list[list[int]], src: int) -> list[int]:
    dist = [-1] * len(adj)
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def molecule(rng: np.random.Generator, n_min: int = MIN_ATOMS, n_max: int = MAX_ATOMS) -> MolecularGraph:
    n = int(np.clip(round(rng.normal(23.0, 4.5)), n_min, n_max))
    types = rng.choice(len(ATOMS), size=n, p=_WEIGHTS)
    # polyvalent atoms form the skeleton; terminal atoms hang off it
    order = sorted(range(n), key=lambda i: (_VALENCE[types[i]] == 1, i))
    if _VALENCE[types[order[0]]] == 1:
        types[order[0]] = 0
    if n > 2:
        for i in order[1:]:
            if _VALENCE[types[i]] == 1 and sum(_VALENCE[types[j]] > 1 for j in range(n)) < 2:
                types[i] = 0
        order = sorted(range(n), key=lambda i: (_VALENCE[types[i]] == 1, i))

    free = _VALENCE[types].astype(int)
    adj: list[list[int]] = [[] for _ in range(n)]
    bonds: dict[tuple[int, int], int] = {}

    def link(u, v, kind=0):
        bonds[(min(u, v), max(u, v))] = kind
        adj[u].append(v)
        adj[v].append(u)
        free[u] -= 1
        free[v] -= 1

    placed = [order[0]]
    for i in order[1:]:
        hosts = [j for j in placed if free[j] > 0 and _VALENCE[types[j]] > 1]
        if not hosts:
            hosts = [j for j in placed if free[j] > 0]
        if not hosts:
            types[i] = 0
            free[i] = 4
            hosts = [placed[-1]]
            free[hosts[0]] += 1
        link(int(rng.choice(hosts)), i)
        placed.append(i)

    # ring closures between atoms 4-5 bonds apart give 5/6-membered rings
    rings = []
    for _ in range(int(rng.poisson(2.2))):
        cands = [i for i in range(n) if free[i] > 0 and _VALENCE[types[i]] > 1]
        rng.shuffle(cands)
        closed = False
        for u in cands:
            dist = _tree_distances(adj, u)
            partners = [v for v in cands if v != u and dist[v] in (4, 5) and free[v] > 0
                        and (min(u, v), max(u, v)) not in bonds]
            if partners:
                v = int(rng.choice(partners))
                rings.append(dist[v] + 1)
                link(u, v)
                closed = True
                break
        if not closed:
            break

    # upgrade some bonds using leftover valence
    for key in sorted(bonds):
        u, v = key
        if free[u] > 0 and free[v] > 0 and rng.random() < 0.25:
            kind = 2 if free[u] > 1 and free[v] > 1 and rng.random() < 0.1 else 1
            bonds[key] = kind
            free[u] -= kind
            free[v] -= kind
    if rings:
        # aromatic bonds count 1.5 toward valence
        load = np.zeros(n)
        for (u, v), k in bonds.items():
            load[u] += BOND_ORDER[k]
            load[v] += BOND_ORDER[k]
        for key in sorted(bonds):
            u, v = key
            if bonds[key] == 0 and types[u] == 0 and types[v] == 0 and len(adj[u]) >= 2 and len(adj[v]) >= 2 \
                    and load[u] + 0.5 <= _VALENCE[types[u]] and load[v] + 0.5 <= _VALENCE[types[v]] \
                    and rng.random() < 0.3:
                bonds[key] = 3
                load[u] += 0.5
                load[v] += 0.5

    deg = np.array([len(a) for a in adj])
    contrib = _CONTRIB[types] - 0.12 * np.maximum(deg - 2, 0)
    branch = int(np.sum(deg >= 3))
    y = (float(contrib.sum()) + sum(BOND_CONTRIB[k] for k in bonds.values())
         - 0.45 * len(rings) - 0.2 * branch - 0.5 * sum(r > 6 for r in rings))
    y = round(TARGET_SCALE * (y - TARGET_OFFSET), 6)
    return MolecularGraph(
        tuple(int(t) for t in types),
        tuple((u, v, k) for (u, v), k in sorted(bonds.items())),
        y,
    )


def generate(count: int, seed: int = 0, n_min: int = MIN_ATOMS, n_max: int = MAX_ATOMS) -> list[MolecularGraph]:
    """``count`` molecules from a single seeded stream."""
    if not 2 <= n_min <= n_max:
        raise ValueError(f"invalid atom range [{n_min}, {n_max}]")
    rng = np.random.default_rng(seed)
    graphs = [molecule(rng, n_min, n_max) for _ in range(count)]
    for g in graphs:
        g.validate()
    return graphs


def summary(graphs: list[MolecularGraph]) -> dict:
    sizes = np.array([g.num_nodes for g in graphs])
    ys = np.array([g.target for g in graphs])
    degs = np.concatenate([g.degrees() for g in graphs])
    return {
        "count": len(graphs),
        "atoms_min": int(sizes.min()),
        "atoms_max": int(sizes.max()),
        "atoms_mean": float(sizes.mean()),
        "max_degree": int(degs.max()),
        "target_mean": float(ys.mean()),
        "target_std": float(ys.std()),
        "mean_abs_target": float(np.abs(ys).mean()),
        "mean_log_degree": math.fsum(np.log1p(degs)) / len(degs),
    }
