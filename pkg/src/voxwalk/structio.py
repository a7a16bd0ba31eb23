"""Reading and writing ligand / pocket structures.

Structures are heavy-atom point clouds (implicit hydrogens) restricted to the
element sets the voxel channels understand. Ligands use seven channels, pockets
four.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import IO, Iterator, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

LIGAND_ELEMENTS: tuple[str, ...] = ("C", "O", "N", "S", "F", "Cl", "P")
POCKET_ELEMENTS: tuple[str, ...] = ("C", "O", "N", "S")

ELEMENT_SETS = {"ligand": LIGAND_ELEMENTS, "pocket": POCKET_ELEMENTS}

# standard atomic weights, only used for the optional mass-weighted centering
ATOMIC_MASSES = {
    "C": 12.011,
    "O": 15.999,
    "N": 14.007,
    "S": 32.06,
    "F": 18.998,
    "Cl": 35.45,
    "P": 30.974,
}

HYDROGENS = frozenset({"H", "D", "T"})

Source = Union[bytes, str, IO]


class StructureError(ValueError):
    """Base class for structure input errors."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(StructureError):
    pass


class UnsupportedElement(ParseError):
    def __init__(self, symbol: str, line: int | None = None):
        self.symbol = symbol
        super().__init__(f"unsupported element {symbol!r}", line)


class EmptyStructure(StructureError):
    pass


def normalize_symbol(symbol: str) -> str:
    """'CL' / 'cl' -> 'Cl'."""
    symbol = symbol.strip()
    if not symbol:
        return symbol
    return symbol[0].upper() + symbol[1:].lower()


def channel_index(symbol: str, kind: str) -> int:
    return ELEMENT_SETS[kind].index(symbol)


@dataclass(frozen=True)
class Atom:
    element: str
    position: np.ndarray


@dataclass(frozen=True)
class Structure:
    """An ordered heavy-atom point cloud.

    ``coords`` is an ``(N, 3)`` float64 array in Angstrom. ``skipped`` counts
    atoms that were dropped while parsing (hydrogens, unsupported elements).
    """

    elements: tuple[str, ...]
    coords: np.ndarray
    kind: str = "ligand"
    skipped: int = 0

    def __post_init__(self):
        if self.kind not in ELEMENT_SETS:
            raise ValueError(f"unknown structure kind {self.kind!r}")
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3)
        if len(coords) != len(self.elements):
            raise ValueError("elements and coords differ in length")
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite atom coordinates")
        allowed = ELEMENT_SETS[self.kind]
        for el in self.elements:
            if el not in allowed:
                raise UnsupportedElement(el)
        coords.flags.writeable = False
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def atoms(self) -> list[Atom]:
        return [Atom(el, xyz) for el, xyz in zip(self.elements, self.coords)]

    @property
    def channels(self) -> np.ndarray:
        """Channel index of each atom."""
        allowed = ELEMENT_SETS[self.kind]
        return np.array([allowed.index(el) for el in self.elements], dtype=np.int64)

    def with_coords(self, coords: np.ndarray) -> "Structure":
        return Structure(self.elements, coords, self.kind, self.skipped)

    def translated(self, shift) -> "Structure":
        return self.with_coords(self.coords + np.asarray(shift, dtype=np.float64))

    def select(self, mask) -> "Structure":
        mask = np.asarray(mask, dtype=bool)
        return Structure(
            tuple(el for el, keep in zip(self.elements, mask) if keep),
            self.coords[mask],
            self.kind,
        )


def _read_text(data: Source) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8", errors="replace")
    if isinstance(data, str):
        return data
    content = data.read()
    if isinstance(content, bytes):
        content = content.decode("utf-8", errors="replace")
    return content


def _sdf_records(text: str) -> Iterator[tuple[int, list[str]]]:
    """Yield (first line number, lines) per $$$$-delimited record."""
    lines = text.splitlines()
    start = 0
    for i, line in enumerate(lines):
        if line.strip() == "$$$$":
            yield start + 1, lines[start:i]
            start = i + 1
    if any(line.strip() for line in lines[start:]):
        yield start + 1, lines[start:]


def _parse_mol_block(lines: list[str], first_line: int) -> Structure:
    if len(lines) < 4:
        raise ParseError("missing counts line", first_line + len(lines))
    counts_lineno = first_line + 3
    counts = lines[3]
    if "V3000" in counts:
        raise ParseError("V3000 molfiles are not supported", counts_lineno)
    try:
        n_atoms = int(counts[0:3])
        int(counts[3:6])
    except ValueError:
        raise ParseError(f"malformed counts line {counts!r}", counts_lineno) from None
    if n_atoms < 0:
        raise ParseError("negative atom count", counts_lineno)

    elements, coords = [], []
    skipped = 0
    for k in range(n_atoms):
        idx = 4 + k
        lineno = first_line + idx
        if idx >= len(lines) or lines[idx].startswith("M  END"):
            raise ParseError(
                f"truncated atom block: expected {n_atoms} atoms, got {k}", lineno
            )
        line = lines[idx]
        try:
            xyz = [float(line[0:10]), float(line[10:20]), float(line[20:30])]
            symbol = normalize_symbol(line[31:34])
        except (ValueError, IndexError):
            # tolerate whitespace-separated writers that ignore the fixed columns
            fields = line.split()
            try:
                xyz = [float(v) for v in fields[:3]]
                symbol = normalize_symbol(fields[3])
            except (ValueError, IndexError):
                raise ParseError(f"malformed atom line {line!r}", lineno) from None
        if not symbol:
            raise ParseError("missing element symbol", lineno)
        if symbol in HYDROGENS:
            skipped += 1
            continue
        if symbol not in LIGAND_ELEMENTS:
            raise UnsupportedElement(symbol, lineno)
        elements.append(symbol)
        coords.append(xyz)
    return Structure(tuple(elements), np.array(coords).reshape(-1, 3), "ligand", skipped)


def parse_sdf(data: Source) -> Structure:
    """Parse the first record of an SDF / MOL V2000 file as a ligand.

    Hydrogens are dropped; the bond block is ignored.
    """
    text = _read_text(data)
    for first_line, lines in _sdf_records(text):
        return _parse_mol_block(lines, first_line)
    raise ParseError("empty SDF input", 1)


def read_sdf_records(data: Source) -> list[Structure]:
    """Parse every record of a multi-molecule SDF file."""
    text = _read_text(data)
    return [_parse_mol_block(lines, first) for first, lines in _sdf_records(text)]


def _pdb_element(line: str) -> str:
    symbol = normalize_symbol(line[76:78]) if len(line) >= 78 else ""
    if symbol:
        return symbol
    # fall back on the atom name; columns 13-14 hold the element when right-aligned
    name = line[12:16]
    letters = "".join(ch for ch in name if ch.isalpha())
    if not letters:
        return ""
    if name[0].isalpha() and len(letters) >= 2 and normalize_symbol(letters[:2]) in (
        "Cl",
        "Se",
        "Fe",
        "Zn",
        "Mg",
        "Ca",
        "Na",
        "Br",
    ):
        return normalize_symbol(letters[:2])
    return letters[0].upper()


def parse_pdb(data: Source) -> Structure:
    """Parse ATOM/HETATM records of a single-model PDB file as a pocket.

    Atoms whose element is outside C/O/N/S (hydrogens included) are dropped
    and counted in ``Structure.skipped``. For alternate locations the first
    one seen for an atom wins.
    """
    text = _read_text(data)
    elements, coords = [], []
    skipped = 0
    models = 0
    seen_altloc: dict[tuple, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6].strip()
        if record == "MODEL":
            models += 1
            if models > 1:
                raise ParseError("multi-model PDB files are not supported", lineno)
            continue
        if record not in ("ATOM", "HETATM"):
            continue
        altloc = line[16:17].strip()
        if altloc:
            key = (line[12:16], line[17:20], line[21:22], line[22:27])
            first = seen_altloc.setdefault(key, altloc)
            if first != altloc:
                continue
        try:
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except ValueError:
            raise ParseError(f"malformed coordinate field {line[30:54]!r}", lineno) from None
        symbol = _pdb_element(line)
        if symbol not in POCKET_ELEMENTS:
            skipped += 1
            continue
        elements.append(symbol)
        coords.append(xyz)
    if not elements:
        raise EmptyStructure("no parsable ATOM/HETATM records with pocket elements")
    if skipped:
        logger.info("dropped %d pocket atoms outside %s", skipped, POCKET_ELEMENTS)
    return Structure(tuple(elements), np.array(coords), "pocket", skipped)


def parse_xyz(data: Source, kind: str = "ligand") -> Structure:
    text = _read_text(data)
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty XYZ input", 1)
    try:
        n = int(lines[0].split()[0])
    except (ValueError, IndexError):
        raise ParseError(f"malformed atom count {lines[0]!r}", 1) from None
    if len(lines) < n + 2:
        raise ParseError(f"truncated XYZ: expected {n} atoms", len(lines))
    allowed = ELEMENT_SETS[kind]
    elements, coords = [], []
    skipped = 0
    for lineno in range(3, n + 3):
        fields = lines[lineno - 1].split()
        try:
            symbol = normalize_symbol(fields[0])
            xyz = [float(v) for v in fields[1:4]]
            if len(xyz) != 3:
                raise ValueError
        except (ValueError, IndexError):
            raise ParseError(f"malformed XYZ line {lines[lineno - 1]!r}", lineno) from None
        if symbol in HYDROGENS:
            skipped += 1
            continue
        if symbol not in allowed:
            raise UnsupportedElement(symbol, lineno)
        elements.append(symbol)
        coords.append(xyz)
    return Structure(tuple(elements), np.array(coords).reshape(-1, 3), kind, skipped)


def write_xyz(structure: Structure, stream: IO[str], comment: str = "") -> None:
    if len(structure) == 0:
        raise EmptyStructure("cannot write an empty structure")
    stream.write(f"{len(structure)}\n{comment}\n")
    for el, (x, y, z) in zip(structure.elements, structure.coords):
        stream.write(f"{el} {x:.6f} {y:.6f} {z:.6f}\n")


def xyz_string(structure: Structure, comment: str = "") -> str:
    buf = io.StringIO()
    write_xyz(structure, buf, comment)
    return buf.getvalue()


def read_structure(path, kind: str | None = None) -> Structure:
    """Dispatch on file suffix: .sdf/.mol -> ligand, .pdb -> pocket, .xyz."""
    path = str(path)
    suffix = path.rsplit(".", 1)[-1].lower()
    with open(path, "rb") as fh:
        data = fh.read()
    if suffix in ("sdf", "mol"):
        return parse_sdf(data)
    if suffix == "pdb":
        return parse_pdb(data)
    if suffix == "xyz":
        return parse_xyz(data, kind or "ligand")
    raise ParseError(f"unrecognized structure file type: {path}")


@dataclass(frozen=True)
class ComplexPair:
    ligand: Structure
    pocket: Structure
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))


def centroid(structure: Structure, mass_weighted: bool = False) -> np.ndarray:
    if len(structure) == 0:
        raise EmptyStructure("empty ligand")
    if not mass_weighted:
        return structure.coords.mean(axis=0)
    w = np.array([ATOMIC_MASSES[el] for el in structure.elements])
    return (w[:, None] * structure.coords).sum(axis=0) / w.sum()


def center_pair(
    ligand: Structure, pocket: Structure, mass_weighted: bool = False
) -> ComplexPair:
    """Translate ligand and pocket so the ligand centroid sits at the origin."""
    center = centroid(ligand, mass_weighted)
    return ComplexPair(ligand.translated(-center), pocket.translated(-center), center)


def euler_rotation(angles: Sequence[float]) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X Euler angles (radians)."""
    return Rotation.from_euler("ZYX", angles).as_matrix()


def rigid_transform(pair: ComplexPair, rotation: np.ndarray, translation) -> ComplexPair:
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    lig = pair.ligand.with_coords(pair.ligand.coords @ rotation.T + translation)
    poc = pair.pocket.with_coords(pair.pocket.coords @ rotation.T + translation)
    return ComplexPair(lig, poc, pair.center)


def augment(
    pair: ComplexPair,
    rng: np.random.Generator,
    max_shift: float = 1.0,
) -> ComplexPair:
    """Random rigid motion applied identically to ligand and pocket.

    Three Euler angles uniform on [0, 2*pi), translation uniform on
    [-max_shift, max_shift]^3 Angstrom.
    """
    angles = rng.uniform(0.0, 2.0 * np.pi, size=3)
    shift = rng.uniform(-max_shift, max_shift, size=3)
    return rigid_transform(pair, euler_rotation(angles), shift)
