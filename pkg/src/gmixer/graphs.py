"""Molecular graph records, JSONL I/O, degree statistics and padded batches."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DELTA_MODES = ("log_mean", "raw_mean_degree")


class GraphFormatError(ValueError):
    """A graph record is malformed; ``line`` is 1-based when read from a file."""

    def __init__(self, reason: str, line: int | None = None):
        self.reason = reason
        self.line = line
        super().__init__(reason if line is None else f"{reason}, line {line}")


@dataclass(frozen=True)
class MolecularGraph:
    atom_types: tuple[int, ...]
    bonds: tuple[tuple[int, int, int], ...]
    target: float

    @property
    def num_nodes(self) -> int:
        return len(self.atom_types)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v, _ in self.bonds:
            deg[u] += 1
            deg[v] += 1
        return deg

    def validate(self) -> None:
        if any(a < 0 for a in self.atom_types):
            raise GraphFormatError("negative atom type")
        n = self.num_nodes
        seen = set()
        for u, v, t in self.bonds:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError("endpoint out of range")
            if u == v:
                raise GraphFormatError("self-loop")
            if t < 0:
                raise GraphFormatError("negative bond type")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphFormatError("duplicate bond")
            seen.add(key)
        if not math.isfinite(self.target):
            raise GraphFormatError("non-finite target")

    def to_json(self) -> str:
        rec = {"atoms": list(self.atom_types), "bonds": [list(b) for b in self.bonds], "y": self.target}
        return json.dumps(rec, separators=(",", ":"))

    def shift_atoms(self, offset: int) -> "MolecularGraph":
        return MolecularGraph(tuple(a + offset for a in self.atom_types), self.bonds, self.target)


def _int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise GraphFormatError(f"expected integer, got {v!r}")
    return v


def parse_record(text: str) -> MolecularGraph:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise GraphFormatError("record is not a JSON object")
    for key in ("atoms", "bonds", "y"):
        if key not in rec:
            raise GraphFormatError(f"missing key {key!r}")
    if not isinstance(rec["atoms"], list) or not isinstance(rec["bonds"], list):
        raise GraphFormatError("'atoms' and 'bonds' must be arrays")
    atoms = tuple(_int(a) for a in rec["atoms"])
    bonds = []
    for b in rec["bonds"]:
        if not isinstance(b, list) or len(b) != 3:
            raise GraphFormatError("bond must be [u, v, type]")
        bonds.append(tuple(_int(x) for x in b))
    y = rec["y"]
    if isinstance(y, bool) or not isinstance(y, (int, float)):
        raise GraphFormatError("'y' must be a number")
    g = MolecularGraph(atoms, tuple(bonds), float(y))
    g.validate()
    return g


def load_jsonl(path) -> list[MolecularGraph]:
    """Parse one graph per line; blank lines are skipped."""
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                graphs.append(parse_record(line))
            except GraphFormatError as exc:
                raise GraphFormatError(exc.reason, lineno) from None
    return graphs


def collect_errors(path) -> tuple[list[MolecularGraph], list[GraphFormatError]]:
    """Like :func:`load_jsonl` but keeps going and returns every bad line."""
    graphs, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                graphs.append(parse_record(line))
            except GraphFormatError as exc:
                errors.append(GraphFormatError(exc.reason, lineno))
    return graphs, errors


def dumps_jsonl(graphs: Iterable[MolecularGraph]) -> str:
    return "".join(g.to_json() + "\n" for g in graphs)


def write_jsonl(path, graphs: Iterable[MolecularGraph]) -> None:
    Path(path).write_text(dumps_jsonl(graphs), encoding="utf-8")


# ---------------------------------------------------------------------------
# degree statistics


@dataclass(frozen=True)
class DegreeStats:
    delta: float
    max_degree: int
    computed_over: int
    mode: str = "log_mean"


def compute_degree_stats(train: Sequence[MolecularGraph], mode: str = "log_mean") -> DegreeStats:
    """Training-set degree normaliser.

    ``log_mean``: mean of log(d + 1) over all nodes. ``raw_mean_degree``: mean
    undirected degree. ``fsum`` keeps the result independent of graph and node
    order.
    """
    if mode not in DELTA_MODES:
        raise ValueError(f"unknown delta_mode {mode!r}")
    degs = [g.degrees() for g in train]
    count = sum(len(d) for d in degs)
    if count == 0:
        raise ValueError("cannot compute degree statistics of an empty split")
    if mode == "log_mean":
        total = math.fsum(math.log(int(x) + 1) for d in degs for x in d)
    else:
        total = math.fsum(int(x) for d in degs for x in d)
    delta = total / count
    if not delta > 0:
        raise ValueError("delta must be positive (training split has no edges)")
    max_degree = max((int(d.max()) for d in degs if len(d)), default=0)
    return DegreeStats(delta, max_degree, count, mode)


# ---------------------------------------------------------------------------
# padding


@dataclass(frozen=True)
class PaddedBatch:
    """Fixed-width layout of ``B`` graphs in ``n_max`` node slots.

    Neighbour lists are stored per slot: ``neighbors[b, i, k]`` is the slot of
    the k-th neighbour of node i, valid where ``neighbor_mask`` is true.
    """

    atom_ids: np.ndarray        # [B, n_max] int
    neighbors: np.ndarray       # [B, n_max, D] int
    bond_types: np.ndarray      # [B, n_max, D] int
    neighbor_mask: np.ndarray   # [B, n_max, D] bool
    node_mask: np.ndarray       # [B, n_max] bool
    degrees: np.ndarray         # [B, n_max] int
    targets: np.ndarray         # [B] float

    @property
    def size(self) -> int:
        return self.atom_ids.shape[0]

    @property
    def n_max(self) -> int:
        return self.atom_ids.shape[1]

    def unpad(self) -> list[MolecularGraph]:
        graphs = []
        for b in range(self.size):
            n = int(self.node_mask[b].sum())
            bonds = []
            for i in range(n):
                for k in np.flatnonzero(self.neighbor_mask[b, i]):
                    j = int(self.neighbors[b, i, k])
                    if i < j:
                        bonds.append((i, j, int(self.bond_types[b, i, k])))
            graphs.append(MolecularGraph(tuple(int(a) for a in self.atom_ids[b, :n]),
                                         tuple(bonds), float(self.targets[b])))
        return graphs


def pad_batch(graphs: Sequence[MolecularGraph], n_max: int) -> PaddedBatch:
    for idx, g in enumerate(graphs):
        if g.num_nodes > n_max:
            raise ValueError(f"graph {idx} has {g.num_nodes} nodes, more than n_max={n_max}")
    B = len(graphs)
    nbr_lists = []
    width = 1
    for g in graphs:
        lists = [[] for _ in range(g.num_nodes)]
        for u, v, t in g.bonds:
            lists[u].append((v, t))
            lists[v].append((u, t))
        nbr_lists.append(lists)
        width = max([width] + [len(x) for x in lists])

    atom_ids = np.zeros((B, n_max), dtype=np.int64)
    neighbors = np.zeros((B, n_max, width), dtype=np.int64)
    bond_types = np.zeros((B, n_max, width), dtype=np.int64)
    neighbor_mask = np.zeros((B, n_max, width), dtype=bool)
    node_mask = np.zeros((B, n_max), dtype=bool)
    degrees = np.zeros((B, n_max), dtype=np.int64)
    targets = np.zeros(B, dtype=np.float64)
    for b, (g, lists) in enumerate(zip(graphs, nbr_lists)):
        n = g.num_nodes
        atom_ids[b, :n] = g.atom_types
        node_mask[b, :n] = True
        targets[b] = g.target
        for i, lst in enumerate(lists):
            degrees[b, i] = len(lst)
            for k, (j, t) in enumerate(lst):
                neighbors[b, i, k] = j
                bond_types[b, i, k] = t
                neighbor_mask[b, i, k] = True
    return PaddedBatch(atom_ids, neighbors, bond_types, neighbor_mask, node_mask, degrees, targets)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DatasetSplit:
    train: list[MolecularGraph]
    validation: list[MolecularGraph]
    test: list[MolecularGraph]
    vocab_atoms: int
    vocab_bonds: int


def vocab_sizes(graphs: Iterable[MolecularGraph]) -> tuple[int, int]:
    max_atom = max_bond = -1
    for g in graphs:
        if g.atom_types:
            max_atom = max(max_atom, max(g.atom_types))
        for _, _, t in g.bonds:
            max_bond = max(max_bond, t)
    return max_atom + 1, max(max_bond + 1, 1)


def split_dataset(graphs: Sequence[MolecularGraph], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle followed by contiguous train/validation/test slices."""
    if not graphs:
        raise ValueError("empty dataset")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {tuple(fractions)}")
    n = len(graphs)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    shuffled = [graphs[i] for i in order]
    va, vb = vocab_sizes(graphs)
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
        va,
        vb,
    )
