"""Geometric evaluation of generated ligands.

Bonds are perceived from interatomic distances alone (covalent radii plus a
slack), so every metric here is a geometric approximation and is labelled as
such in reports.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import networkx as nx
import numpy as np
from scipy.spatial.distance import cdist

from .structio import Structure
from .voxelizer import POCKET_VDW_RADII

COVALENT_RADII = {
    "C": 0.76,
    "N": 0.71,
    "O": 0.66,
    "S": 1.05,
    "F": 0.57,
    "Cl": 1.02,
    "P": 1.07,
}
BOND_SLACK = 0.4

VDW_RADII = {**POCKET_VDW_RADII, "F": 1.47, "Cl": 1.75, "P": 1.80}
CLASH_TOLERANCE = 0.5

# (element, element, aromatic-only) columns of the bond-length JSD table
BOND_TYPES: dict[str, tuple[str, str, bool]] = {
    "C-C": ("C", "C", False),
    "C-N": ("C", "N", False),
    "C-O": ("C", "O", False),
    "C:C": ("C", "C", True),
    "C:N": ("C", "N", True),
}

PLANARITY_RMS = 0.1


class Bond(NamedTuple):
    i: int
    j: int
    order: str = "unknown"


def infer_bonds(
    structure: Structure,
    radii: dict | None = None,
    slack: float = BOND_SLACK,
) -> list[Bond]:
    """Bond iff ``|xi - xj| <= r_i + r_j + slack``. Bonds are sorted, i < j."""
    radii = radii or COVALENT_RADII
    n = len(structure)
    if n < 2:
        return []
    r = np.array([radii[el] for el in structure.elements])
    d = cdist(structure.coords, structure.coords)
    ok = d <= r[:, None] + r[None, :] + slack
    ii, jj = np.nonzero(np.triu(ok, k=1))
    return [Bond(int(i), int(j)) for i, j in zip(ii, jj)]


def bond_graph(structure: Structure, bonds: Sequence[Bond] | None = None) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(range(len(structure)))
    g.add_edges_from((b.i, b.j) for b in (bonds if bonds is not None else infer_bonds(structure)))
    return g


def rings(structure: Structure, bonds: Sequence[Bond] | None = None) -> list[list[int]]:
    """Minimum cycle basis of the bond graph (stand-in for SSSR)."""
    return [sorted(c) for c in nx.minimum_cycle_basis(bond_graph(structure, bonds))]


def planarity_rms(coords: np.ndarray) -> float:
    centered = coords - coords.mean(axis=0)
    # smallest singular value measures out-of-plane spread
    s = np.linalg.svd(centered, compute_uv=False)
    return float(s[-1] / math.sqrt(len(coords)))


def aromatic_atoms(structure: Structure, ring_list: Sequence[Sequence[int]] | None = None) -> set[int]:
    """Atoms in planar 5- or 6-membered rings (geometric aromaticity proxy)."""
    ring_list = rings(structure) if ring_list is None else ring_list
    flagged: set[int] = set()
    for ring in ring_list:
        if len(ring) in (5, 6) and planarity_rms(structure.coords[list(ring)]) < PLANARITY_RMS:
            flagged.update(ring)
    return flagged


def annotate_bonds(structure: Structure) -> list[Bond]:
    """Bonds with order ``aromatic`` when both ends lie in a common flagged ring."""
    bonds = infer_bonds(structure)
    ring_list = rings(structure, bonds)
    flat_rings = [
        set(r)
        for r in ring_list
        if len(r) in (5, 6) and planarity_rms(structure.coords[list(r)]) < PLANARITY_RMS
    ]
    out = []
    for b in bonds:
        arom = any(b.i in r and b.j in r for r in flat_rings)
        out.append(Bond(b.i, b.j, "aromatic" if arom else "unknown"))
    return out


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if len(edges) != len(counts) + 1:
            raise ValueError("need len(edges) == len(counts) + 1")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        t = self.total
        return self.counts / t if t > 0 else self.counts.copy()


def default_bond_bins() -> np.ndarray:
    return np.round(np.arange(0.8, 2.0 + 1e-9, 0.01), 10)


def _pair_matches(a: str, b: str, pair: tuple[str, str]) -> bool:
    return (a, b) == pair or (b, a) == pair


def bond_lengths(
    structures: Iterable[Structure], pair: tuple[str, str], aromatic_only: bool = False
) -> np.ndarray:
    out = []
    for s in structures:
        bonds = annotate_bonds(s) if aromatic_only else infer_bonds(s)
        for b in bonds:
            if aromatic_only and b.order != "aromatic":
                continue
            if _pair_matches(s.elements[b.i], s.elements[b.j], pair):
                out.append(float(np.linalg.norm(s.coords[b.i] - s.coords[b.j])))
    return np.array(out)


def bond_length_histogram(
    structures: Iterable[Structure],
    pair: tuple[str, str],
    bins=None,
    aromatic_only: bool = False,
) -> Histogram:
    edges = default_bond_bins() if bins is None else np.asarray(bins, dtype=np.float64)
    counts, _ = np.histogram(bond_lengths(structures, pair, aromatic_only), bins=edges)
    return Histogram(edges, counts)


def jsd(p: Histogram, q: Histogram) -> float:
    """Jensen-Shannon divergence in bits between two histograms on equal bins."""
    if p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
        raise ValueError("histograms have different bin edges")
    if p.total <= 0 or q.total <= 0:
        raise ValueError("cannot compare an empty distribution")
    P, Q = p.probabilities(), q.probabilities()
    M = 0.5 * (P + Q)

    def kl(a, m):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return float(np.clip(0.5 * kl(P, M) + 0.5 * kl(Q, M), 0.0, 1.0))


def clash_count(
    ligand: Structure,
    pocket: Structure,
    tolerance: float = CLASH_TOLERANCE,
    radii: dict | None = None,
) -> int:
    """Ligand-pocket atom pairs closer than ``vdW_i + vdW_j - tolerance``."""
    radii = radii or VDW_RADII
    if len(ligand) == 0 or len(pocket) == 0:
        return 0
    rl = np.array([radii[el] for el in ligand.elements])
    rp = np.array([radii[el] for el in pocket.elements])
    d = cdist(ligand.coords, pocket.coords)
    return int(np.sum(d < rl[:, None] + rp[None, :] - tolerance))


def summary_stats(structures: Sequence[Structure]) -> dict:
    """Atom counts, ring statistics and a geometric aromatic-atom fraction."""
    n_atoms = np.array([len(s) for s in structures], dtype=np.float64)
    ring_sizes: Counter = Counter()
    rings_per_mol = []
    arom = 0
    for s in structures:
        rl = rings(s)
        rings_per_mol.append(len(rl))
        ring_sizes.update(len(r) for r in rl)
        arom += len(aromatic_atoms(s, rl))
    total_atoms = float(n_atoms.sum())
    return {
        "molecules": len(structures),
        "atoms_per_mol_mean": float(n_atoms.mean()) if len(n_atoms) else 0.0,
        "atoms_per_mol_median": float(np.median(n_atoms)) if len(n_atoms) else 0.0,
        "rings_per_mol_mean": float(np.mean(rings_per_mol)) if rings_per_mol else 0.0,
        "ring_size_counts": {str(k): v for k, v in sorted(ring_sizes.items())},
        "aromatic_atom_fraction_geometric": arom / total_atoms if total_atoms else 0.0,
    }


def bond_jsd_table(
    generated: Sequence[Structure], reference: Sequence[Structure], bins=None
) -> dict[str, float | None]:
    """JSD per bond type; ``None`` when either side has no such bonds."""
    table: dict[str, float | None] = {}
    for name, (a, b, arom) in BOND_TYPES.items():
        hg = bond_length_histogram(generated, (a, b), bins, arom)
        hr = bond_length_histogram(reference, (a, b), bins, arom)
        table[name] = jsd(hg, hr) if hg.total > 0 and hr.total > 0 else None
    return table
