"""Random toy ligand/pocket complexes for smoke tests and desk-scale training."""

from __future__ import annotations

import numpy as np

from .structio import LIGAND_ELEMENTS, POCKET_ELEMENTS, ComplexPair, Structure, center_pair


def random_points(
    rng: np.random.Generator,
    n: int,
    box: float,
    min_dist: float,
    max_tries: int = 2000,
    restarts: int = 200,
) -> np.ndarray:
    """``n`` points uniform in ``[-box, box]^3`` with pairwise distance >= min_dist.

    Rejection sampling; a jammed partial packing is thrown away and started
    over, up to ``restarts`` times.
    """
    if n == 0:
        return np.empty((0, 3))
    for _ in range(restarts):
        pts = np.empty((0, 3))
        for _ in range(max_tries):
            p = rng.uniform(-box, box, size=3)
            if len(pts) == 0 or np.min(np.linalg.norm(pts - p, axis=1)) >= min_dist:
                pts = np.vstack([pts, p])
                if len(pts) == n:
                    return pts
    raise RuntimeError(f"could not place {n} points {min_dist} A apart in box {box}")


def random_structure(
    rng: np.random.Generator,
    n_atoms: int,
    box: float,
    min_dist: float,
    kind: str = "ligand",
) -> Structure:
    elements = LIGAND_ELEMENTS if kind == "ligand" else POCKET_ELEMENTS
    coords = random_points(rng, n_atoms, box, min_dist)
    symbols = tuple(elements[i] for i in rng.integers(0, len(elements), size=n_atoms))
    return Structure(symbols, coords, kind)


def random_complex(
    rng: np.random.Generator,
    n_ligand: int = 4,
    n_pocket: int = 12,
    ligand_box: float = 1.2,
    shell: tuple[float, float] = (2.2, 3.5),
) -> ComplexPair:
    """A compact ligand surrounded by a shell of pocket atoms, centered."""
    lig = Structure(
        tuple(LIGAND_ELEMENTS[i] for i in rng.integers(0, 3, size=n_ligand)),
        random_points(rng, n_ligand, ligand_box, 1.2),
        "ligand",
    )
    dirs = rng.standard_normal((n_pocket, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(*shell, size=(n_pocket, 1))
    pocket = Structure(
        tuple(POCKET_ELEMENTS[i] for i in rng.integers(0, 4, size=n_pocket)),
        dirs * radii + lig.coords.mean(axis=0),
        "pocket",
    )
    return center_pair(lig, pocket)
