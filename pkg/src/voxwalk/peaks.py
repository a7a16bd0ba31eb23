"""Atom recovery from occupancy grids.

Per channel: values below ``threshold`` are zeroed, voxels that beat all 26
neighbours become peaks (equal values are resolved in favour of the lower
flat index), peaks are refined to sub-voxel positions, and peaks closer than
``min_separation`` are merged keeping the stronger one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .structio import ELEMENT_SETS, Structure
from .voxelizer import GridSpec, RadiusTable, VoxelGrid, voxelize

_OFFSETS = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]


@dataclass(frozen=True)
class PeakConfig:
    threshold: float = 0.1
    refine: str | None = "gaussian"
    min_separation: float = 0.9

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")
        if self.refine not in (None, "gaussian", "centroid"):
            raise ValueError(f"unknown refinement {self.refine!r}")


@dataclass(frozen=True)
class Peak:
    channel: int
    index: tuple[int, int, int]
    value: float
    position: np.ndarray


def local_maxima(a: np.ndarray) -> np.ndarray:
    """Boolean mask of strict 26-neighbourhood maxima of a 3D array.

    A voxel ties with a neighbour of equal value only if its flat index is
    lower. Zero voxels are never peaks. Out-of-grid neighbours are ignored.
    """
    L = a.shape
    pad = np.pad(a, 1, constant_values=-np.inf)
    mask = a > 0
    for di, dj, dk in _OFFSETS:
        nb = pad[1 + di : 1 + di + L[0], 1 + dj : 1 + dj + L[1], 1 + dk : 1 + dk + L[2]]
        # the neighbour has a larger flat index iff its offset is lexicographically positive
        later = (di, dj, dk) > (0, 0, 0)
        mask &= (a > nb) | ((a == nb) & later)
    return mask


def _gaussian_offset(lo: float, mid: float, hi: float) -> float:
    """Vertex of the parabola through log-values at -1, 0, +1 (voxel units)."""
    if lo <= 0 or mid <= 0 or hi <= 0:
        return 0.0
    a, b, c = np.log(lo), np.log(mid), np.log(hi)
    curv = a - 2.0 * b + c
    if curv >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / curv, -0.5, 0.5))


def refine_peak(raw: np.ndarray, ijk: tuple[int, int, int], method: str) -> np.ndarray:
    """Sub-voxel offset (voxel units) of the peak at ``ijk``."""
    L = raw.shape
    if method == "gaussian":
        off = np.zeros(3)
        for ax in range(3):
            if ijk[ax] == 0 or ijk[ax] == L[ax] - 1:
                continue
            lo = list(ijk)
            hi = list(ijk)
            lo[ax] -= 1
            hi[ax] += 1
            off[ax] = _gaussian_offset(raw[tuple(lo)], raw[ijk], raw[tuple(hi)])
        return off
    # occupancy-weighted centroid of the clamped 3^3 block
    sl = tuple(slice(max(c - 1, 0), min(c + 2, n)) for c, n in zip(ijk, L))
    block = np.clip(raw[sl], 0.0, None)
    total = block.sum()
    if total <= 0:
        return np.zeros(3)
    grids = np.meshgrid(*(np.arange(s.start, s.stop) for s in sl), indexing="ij")
    return np.array([(g * block).sum() / total for g in grids]) - np.asarray(ijk)


def find_peaks(grid: VoxelGrid, config: PeakConfig | None = None) -> list[Peak]:
    config = config or PeakConfig()
    spec = grid.spec
    data = np.asarray(grid.data, dtype=np.float64)
    peaks: list[Peak] = []
    for c in range(spec.channels):
        raw = data[c]
        a = np.where(raw < config.threshold, 0.0, raw)
        idx = np.argwhere(local_maxima(a))
        found = []
        for ijk in map(tuple, idx):
            off = refine_peak(raw, ijk, config.refine) if config.refine else np.zeros(3)
            pos = spec.voxel_center(np.asarray(ijk) + off)
            found.append(Peak(c, ijk, float(a[ijk]), pos))
        peaks.extend(_merge(found, config.min_separation))
    return peaks


def _merge(peaks: list[Peak], min_sep: float) -> list[Peak]:
    if min_sep <= 0 or len(peaks) < 2:
        return peaks
    # stable sort: ties keep flat-index order from argwhere
    order = sorted(range(len(peaks)), key=lambda n: -peaks[n].value)
    kept: list[int] = []
    for n in order:
        p = peaks[n].position
        if all(np.linalg.norm(p - peaks[m].position) >= min_sep for m in kept):
            kept.append(n)
    return [peaks[n] for n in sorted(kept)]


def detect_atoms(
    grid: VoxelGrid, config: PeakConfig | None = None, kind: str = "ligand"
) -> Structure:
    """Atoms (element = channel) recovered from a ligand grid."""
    elements = ELEMENT_SETS[kind]
    if grid.spec.channels != len(elements):
        raise ValueError(f"{kind} grids need {len(elements)} channels")
    peaks = find_peaks(grid, config)
    return Structure(
        tuple(elements[p.channel] for p in peaks),
        np.array([p.position for p in peaks]).reshape(-1, 3),
        kind,
    )


@dataclass(frozen=True)
class RoundtripReport:
    matched: int
    rmsd: float
    spurious: int
    missed: int


def match_atoms(
    reference: Structure, found: Structure, max_dist: float = 0.5
) -> list[tuple[int, int, float]]:
    """Greedy nearest-pair matching of same-element atoms within ``max_dist``."""
    cand = []
    for i, (ei, xi) in enumerate(zip(reference.elements, reference.coords)):
        for j, (ej, xj) in enumerate(zip(found.elements, found.coords)):
            if ei != ej:
                continue
            d = float(np.linalg.norm(xi - xj))
            if d <= max_dist:
                cand.append((d, i, j))
    cand.sort()
    used_i, used_j = set(), set()
    pairs = []
    for d, i, j in cand:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j, d))
    return pairs


def roundtrip_report(
    structure: Structure,
    spec: GridSpec,
    radii: RadiusTable | None = None,
    config: PeakConfig | None = None,
    max_dist: float = 0.5,
) -> RoundtripReport:
    """Voxelize, detect, and compare against the input atoms."""
    found = detect_atoms(voxelize(structure, spec, radii), config, structure.kind)
    pairs = match_atoms(structure, found, max_dist)
    rmsd = float(np.sqrt(np.mean([d * d for _, _, d in pairs]))) if pairs else 0.0
    return RoundtripReport(
        matched=len(pairs),
        rmsd=rmsd,
        spurious=len(found) - len(pairs),
        missed=len(structure) - len(pairs),
    )
