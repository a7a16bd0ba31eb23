"""Point cloud -> multi-channel occupancy grid.

Each atom is a Gaussian-like density ``exp(-d^2 / (0.93 r)^2)``; per channel
the occupancy of a voxel is ``1 - prod(1 - V_a)`` over the atoms of that
channel's element.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .structio import ELEMENT_SETS, Structure

logger = logging.getLogger(__name__)

DENSITY_SCALE = 0.93
# densities below this are treated as exactly zero
DENSITY_FLOOR = 1e-7
CUTOFF_FACTOR = DENSITY_SCALE * np.sqrt(np.log(1.0 / DENSITY_FLOOR))

LIGAND_RADIUS = 0.5
# Bondi van der Waals radii
POCKET_VDW_RADII = {"C": 1.70, "N": 1.55, "O": 1.52, "S": 1.80}

VXGR_MAGIC = b"VXGR"
VXGR_VERSION = 1
_VXGR_HEADER = struct.Struct("<4sHHIf3f")


class GridFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Cubic grid geometry.

    ``origin`` is the position of the center of voxel (0, 0, 0). When omitted
    the grid is centered on the coordinate origin.
    """

    length: int = 64
    resolution: float = 0.25
    channels: int = 7
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        if int(self.length) != self.length or self.length < 2:
            raise ValueError(f"grid length must be an integer >= 2, got {self.length}")
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        object.__setattr__(self, "length", int(self.length))
        if self.origin is None:
            o = -self.resolution * (self.length - 1) / 2.0
            object.__setattr__(self, "origin", (o, o, o))
        else:
            object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.length, self.length, self.length)

    @property
    def extent(self) -> float:
        return self.length * self.resolution

    def axis(self) -> np.ndarray:
        """Voxel-center coordinates along x, y, z (each ``(L,)``)."""
        idx = np.arange(self.length, dtype=np.float64)
        o = np.asarray(self.origin)
        return o[:, None] + self.resolution * idx[None, :]

    def voxel_center(self, ijk) -> np.ndarray:
        return np.asarray(self.origin) + self.resolution * np.asarray(ijk, dtype=np.float64)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for points inside the physical extent of the grid."""
        lo = np.asarray(self.origin) - self.resolution / 2
        hi = lo + self.extent
        return np.all((points >= lo) & (points < hi), axis=-1)

    def with_channels(self, channels: int) -> "GridSpec":
        return GridSpec(self.length, self.resolution, channels, self.origin)


def ligand_spec(length: int = 64, resolution: float = 0.25) -> GridSpec:
    return GridSpec(length, resolution, len(ELEMENT_SETS["ligand"]))


def pocket_spec(length: int = 64, resolution: float = 0.25) -> GridSpec:
    return GridSpec(length, resolution, len(ELEMENT_SETS["pocket"]))


@dataclass
class VoxelGrid:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != self.spec.shape:
            raise ValueError(f"grid data shape {self.data.shape} != spec {self.spec.shape}")

    @classmethod
    def zeros(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, np.zeros(spec.shape, dtype=np.float32))

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.spec, self.data.copy())


@dataclass(frozen=True)
class RadiusTable:
    ligand_radius: float = LIGAND_RADIUS
    pocket_radii: dict = field(default_factory=lambda: dict(POCKET_VDW_RADII))

    def __post_init__(self):
        if self.ligand_radius <= 0 or any(r <= 0 for r in self.pocket_radii.values()):
            raise ValueError("all radii must be positive")

    def radius(self, element: str, kind: str) -> float:
        if kind == "ligand":
            return self.ligand_radius
        return self.pocket_radii[element]


def atomic_density(d, r_a):
    """Occupied volume fraction at distance ``d`` from an atom of radius ``r_a``."""
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-(d**2) / (DENSITY_SCALE * r_a) ** 2)


def cutoff_distance(r_a: float) -> float:
    return r_a * CUTOFF_FACTOR


def count_outside(structure: Structure, spec: GridSpec) -> int:
    return int(np.sum(~spec.contains(structure.coords)))


def voxelize(
    structure: Structure,
    spec: GridSpec,
    radii: RadiusTable | None = None,
    cutoff: bool = True,
) -> VoxelGrid:
    """Occupancy grid of ``structure``.

    With ``cutoff`` each atom only touches voxels within
    ``cutoff_distance(r)`` of its center (densities there are < 1e-7).
    Atoms are folded in structure order so the result does not depend on how
    the loop is split.
    """
    radii = radii or RadiusTable()
    n_channels = len(ELEMENT_SETS[structure.kind])
    if spec.channels != n_channels:
        raise ValueError(
            f"{structure.kind} grids need {n_channels} channels, spec has {spec.channels}"
        )
    outside = count_outside(structure, spec)
    if outside:
        logger.warning("%d atom centers fall outside the grid", outside)

    L = spec.length
    axes = spec.axis()
    origin = np.asarray(spec.origin)
    # running product of (1 - V) per voxel
    empty = np.ones(spec.shape, dtype=np.float64)
    channels = structure.channels
    for n, (pos, el) in enumerate(zip(structure.coords, structure.elements)):
        r = radii.radius(el, structure.kind)
        if cutoff:
            rc = cutoff_distance(r)
            lo = np.ceil((pos - rc - origin) / spec.resolution).astype(int)
            hi = np.floor((pos + rc - origin) / spec.resolution).astype(int) + 1
            lo = np.clip(lo, 0, L)
            hi = np.clip(hi, 0, L)
            if np.any(hi <= lo):
                continue
        else:
            lo = np.zeros(3, dtype=int)
            hi = np.full(3, L)
        dx = (axes[0, lo[0] : hi[0]] - pos[0]) ** 2
        dy = (axes[1, lo[1] : hi[1]] - pos[1]) ** 2
        dz = (axes[2, lo[2] : hi[2]] - pos[2]) ** 2
        d2 = dx[:, None, None] + dy[None, :, None] + dz[None, None, :]
        v = np.exp(-d2 / (DENSITY_SCALE * r) ** 2)
        if cutoff:
            v[v < DENSITY_FLOOR] = 0.0
        empty[channels[n], lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] *= 1.0 - v
    return VoxelGrid(spec, (1.0 - empty).astype(np.float32))


def add_noise(grid: VoxelGrid, sigma: float, rng: np.random.Generator) -> VoxelGrid:
    """``y = x + sigma * eps`` with i.i.d. standard normal ``eps`` per voxel."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return grid.copy()
    eps = rng.standard_normal(grid.spec.shape, dtype=np.float32)
    return VoxelGrid(grid.spec, grid.data + np.float32(sigma) * eps)


def write_grid(grid: VoxelGrid, target) -> None:
    """Write a VXGR file (little endian, C-order payload)."""
    spec = grid.spec
    header = _VXGR_HEADER.pack(
        VXGR_MAGIC, VXGR_VERSION, spec.channels, spec.length, spec.resolution, *spec.origin
    )
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    if hasattr(target, "write"):
        target.write(header)
        target.write(payload)
    else:
        with open(target, "wb") as fh:
            fh.write(header)
            fh.write(payload)


def read_grid(source) -> VoxelGrid:
    if hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    if len(raw) < _VXGR_HEADER.size:
        raise GridFormatError("truncated VXGR header")
    magic, version, channels, length, resolution, ox, oy, oz = _VXGR_HEADER.unpack_from(raw)
    if magic != VXGR_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}, expected {VXGR_MAGIC!r}")
    if version != VXGR_VERSION:
        raise GridFormatError(f"unsupported VXGR version {version}")
    spec = GridSpec(length, float(resolution), channels, (ox, oy, oz))
    n = channels * length**3
    expected = _VXGR_HEADER.size + 4 * n
    if len(raw) != expected:
        raise GridFormatError(f"VXGR payload has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_VXGR_HEADER.size, count=n)
    return VoxelGrid(spec, data.reshape(spec.shape).astype(np.float32))
