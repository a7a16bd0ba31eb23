"""Conditional denoisers and the scores they induce.

A backend implements ``estimate(y, cond)``, the least-squares estimate of the
clean ligand grid given a noisy one. The score follows from Tweedie's formula,
``g = (estimate - y) / sigma**2``.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
from scipy.special import logsumexp

from .voxelizer import VoxelGrid, read_grid


def _as_array(y) -> np.ndarray:
    return y.data if isinstance(y, VoxelGrid) else np.asarray(y)


class ScoreModel(ABC):
    """Interface shared by every estimator backend.

    Grids are passed as arrays of shape ``(C, L, L, L)`` or batched
    ``(B, C, L, L, L)``; :class:`VoxelGrid` arguments are unwrapped.
    """

    sigma: float

    @abstractmethod
    def estimate(self, y, cond) -> np.ndarray:
        """Posterior-mean estimate of the clean ligand grid."""

    def score(self, y, cond) -> np.ndarray:
        y = _as_array(y)
        xhat = self.estimate(y, cond)
        return ((xhat - y) / self.sigma**2).astype(xhat.dtype, copy=False)


class MixtureOracle(ScoreModel):
    """Exact estimator for an empirical (point-mass) conditional distribution.

    ``p(x | key)`` is uniform over the component grids registered under
    ``key``; smoothing it with ``N(0, sigma^2 I)`` gives a Gaussian mixture
    whose posterior mean and score are available in closed form. All
    arithmetic is float64.
    """

    def __init__(self, components: Sequence[tuple[np.ndarray, Hashable]], sigma: float):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        if not components:
            raise ValueError("oracle needs at least one component")
        self.sigma = float(sigma)
        first = components[0][0]
        # geometry of the components when they were given as VoxelGrids
        self.spec = first.spec if isinstance(first, VoxelGrid) else None
        grids = [np.asarray(_as_array(x), dtype=np.float64) for x, _ in components]
        self.grid_shape = grids[0].shape
        if any(g.shape != self.grid_shape for g in grids):
            raise ValueError("all oracle components must share one grid shape")
        self.keys = [key for _, key in components]
        self._by_key: dict = {}
        for g, key in zip(grids, self.keys):
            self._by_key.setdefault(key, []).append(g.ravel())
        self._by_key = {k: np.stack(v) for k, v in self._by_key.items()}

    @classmethod
    def from_manifest(cls, path, sigma: float) -> "MixtureOracle":
        """Load components from a JSONL manifest of ``{"ligand": ..., "key": ...}``.

        ``key`` defaults to the ``pocket`` field. Relative paths are resolved
        against the manifest's directory.
        """
        path = Path(path)
        components = []
        for entry in read_manifest(path):
            grid = read_grid(entry["ligand"])
            components.append((grid, entry.get("key", entry.get("pocket"))))
        return cls(components, sigma)

    def _components(self, key) -> np.ndarray:
        try:
            return self._by_key[key]
        except (KeyError, TypeError):
            raise KeyError(f"no oracle component for pocket key {key!r}") from None

    def _flatten(self, y) -> tuple[np.ndarray, tuple]:
        y = np.asarray(_as_array(y), dtype=np.float64)
        if y.shape[-len(self.grid_shape) :] != self.grid_shape:
            raise ValueError(f"grid shape {y.shape} does not match oracle {self.grid_shape}")
        batch = y.shape[: y.ndim - len(self.grid_shape)]
        return y.reshape(-1, int(np.prod(self.grid_shape))), batch

    def log_weights(self, y, key) -> np.ndarray:
        """Unnormalized log responsibilities ``-||y - x_i||^2 / (2 sigma^2)``."""
        X = self._components(key)
        flat, _ = self._flatten(y)
        sq = np.stack([((X - row) ** 2).sum(axis=1) for row in flat])
        return -sq / (2.0 * self.sigma**2)

    def weights(self, y, key) -> np.ndarray:
        logw = self.log_weights(y, key)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        return w / w.sum(axis=1, keepdims=True)

    def estimate(self, y, cond) -> np.ndarray:
        X = self._components(cond)
        _, batch = self._flatten(y)
        xhat = self.weights(y, cond) @ X
        return xhat.reshape(batch + self.grid_shape)

    def score(self, y, cond) -> np.ndarray:
        y64 = np.asarray(_as_array(y), dtype=np.float64)
        return (self.estimate(y64, cond) - y64) / self.sigma**2

    def logp(self, y, key) -> np.ndarray | float:
        """``log p(y | key)`` up to the Gaussian normalizing constant."""
        logw = self.log_weights(y, key)
        out = logsumexp(logw, axis=1) - np.log(logw.shape[1])
        _, batch = self._flatten(y)
        return float(out[0]) if not batch else out.reshape(batch)

    def component_mean(self, key) -> np.ndarray:
        return self._components(key).mean(axis=0).reshape(self.grid_shape)


def read_manifest(path) -> list[dict]:
    """Read a JSONL dataset manifest, resolving relative paths."""
    path = Path(path)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest line: {exc}") from None
            for field_name in ("ligand", "pocket"):
                if field_name in entry:
                    p = Path(entry[field_name])
                    if not p.is_absolute():
                        p = path.parent / p
                    if not p.exists():
                        raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
                    entry[field_name] = str(p)
            entries.append(entry)
    if not entries:
        raise ValueError(f"{path}: manifest is empty")
    return entries
