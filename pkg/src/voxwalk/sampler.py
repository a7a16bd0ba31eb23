"""Conditional walk-jump sampling.

Walk: underdamped Langevin MCMC over noisy ligand grids with a fixed noise
level. Jump: one call of the estimator on the current noisy state. Jumps never
feed back into the chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from .scoremodel import ScoreModel
from .voxelizer import GridSpec, VoxelGrid

logger = logging.getLogger(__name__)


class ChainDiverged(FloatingPointError):
    def __init__(self, step: int, chain: int | None = None):
        self.step = step
        self.chain = chain
        where = f"chain {chain} " if chain is not None else ""
        super().__init__(f"{where}non-finite state at step {step}")


@dataclass(frozen=True)
class SamplerConfig:
    sigma: float = 1.0
    step_size: float | None = None
    friction: float | None = None
    warmup: int = 400
    jump_every: int = 100
    total_steps: int = 500
    chains: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.sigma / 2.0)
        if self.friction is None:
            object.__setattr__(self, "friction", 1.0 / self.step_size)
        if self.step_size <= 0 or self.friction <= 0:
            raise ValueError("step size and friction must be positive")
        if self.warmup < 0 or self.total_steps < 0 or self.jump_every < 1:
            raise ValueError("invalid step schedule")
        if self.total_steps < self.warmup:
            raise ValueError("total_steps must be >= warmup")
        if self.chains < 1:
            raise ValueError("need at least one chain")

    @classmethod
    def benchmark(cls, sigma: float = 1.0, **kw) -> "SamplerConfig":
        return cls(sigma=sigma, warmup=400, jump_every=100, total_steps=500, **kw)

    @classmethod
    def ligand_seeded(cls, sigma: float = 1.0, **kw) -> "SamplerConfig":
        return cls(sigma=sigma, warmup=50, jump_every=50, total_steps=100, **kw)

    def jump_steps(self) -> list[int]:
        """Steps at which a jump is emitted."""
        if self.total_steps == self.warmup:
            return [self.warmup]
        steps = list(range(self.warmup + self.jump_every, self.total_steps, self.jump_every))
        steps.append(self.total_steps)
        return steps


@dataclass
class ChainState:
    y: np.ndarray
    v: np.ndarray
    rng: np.random.Generator
    step: int = 0
    chain: int = 0

    def copy(self) -> "ChainState":
        return replace(self, y=self.y.copy(), v=self.v.copy())


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent, reproducible counter-based stream for one chain."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain,))))


def init_chain(
    spec: GridSpec, sigma: float, rng: np.random.Generator, chain: int = 0
) -> ChainState:
    """``y0 ~ N(0, sigma^2 I) + U(0, 1)`` per voxel, ``v0 = 0``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y = sigma * rng.standard_normal(spec.shape) + rng.uniform(0.0, 1.0, size=spec.shape)
    y = y.astype(np.float32)
    return ChainState(y, np.zeros_like(y), rng, 0, chain)


def seed_chain_from_ligand(
    x_seed, sigma: float, rng: np.random.Generator, chain: int = 0
) -> ChainState:
    """Start a chain at a noisy copy ``x_seed + sigma * eps`` of a known ligand."""
    x = np.asarray(getattr(x_seed, "data", x_seed), dtype=np.float32)
    if sigma == 0:
        y = x.copy()
    else:
        y = (x + sigma * rng.standard_normal(x.shape)).astype(np.float32)
    return ChainState(y, np.zeros_like(y), rng, 0, chain)


def fork_chain(state: ChainState, n: int) -> list[ChainState]:
    """``n`` copies of ``(y, v)`` with freshly split noise streams."""
    children = state.rng.spawn(n)
    return [
        ChainState(state.y.copy(), state.v.copy(), rng, state.step, state.chain)
        for rng in children
    ]


def walk_step(
    state: ChainState,
    model: ScoreModel,
    cond,
    delta: float,
    gamma: float,
    eps: np.ndarray | None = None,
) -> ChainState:
    """One Langevin step: half drift, score, half kick, O-U refresh with kick, half drift.

    ``eps`` overrides the Gaussian draw (used for deterministic traces).
    """
    half = delta / 2.0
    decay = math.exp(-gamma * delta)
    kick = math.sqrt(1.0 - math.exp(-2.0 * gamma * delta))
    y = state.y + half * state.v
    g = model.score(y, cond)
    v = state.v + half * g
    if eps is None:
        eps = state.rng.standard_normal(y.shape)
    v = decay * v + half * g + kick * eps
    y = y + half * v
    y = y.astype(state.y.dtype, copy=False)
    v = v.astype(state.v.dtype, copy=False)
    step = state.step + 1
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(v))):
        raise ChainDiverged(step, state.chain)
    return ChainState(y, v, state.rng, step, state.chain)


def walk(state: ChainState, model: ScoreModel, cond, n: int, delta, gamma) -> ChainState:
    for _ in range(n):
        state = walk_step(state, model, cond, delta, gamma)
    return state


def jump(state: ChainState, model: ScoreModel, cond, spec: GridSpec | None = None):
    """Estimate the clean grid at the current state; the state is not touched."""
    xhat = model.estimate(state.y, cond)
    if spec is None:
        return xhat
    return VoxelGrid(spec, xhat)


@dataclass
class Emission:
    chain: int
    step: int
    grid: VoxelGrid


@dataclass
class CWJSRun:
    """Iterable over jump emissions of all chains (chain-major order).

    Chains that blow up are stopped and recorded in ``failures``; the others
    keep going.
    """

    model: ScoreModel
    cond: object
    config: SamplerConfig
    spec: GridSpec
    init: Callable[[int, np.random.Generator], ChainState] | None = None
    failures: list = field(default_factory=list)

    def run_chain(self, chain: int) -> Iterator[Emission]:
        cfg = self.config
        rng = chain_rng(cfg.seed, chain)
        if self.init is None:
            state = init_chain(self.spec, cfg.sigma, rng, chain)
        else:
            state = self.init(chain, rng)
        try:
            for target in cfg.jump_steps():
                state = walk(
                    state, self.model, self.cond, target - state.step, cfg.step_size, cfg.friction
                )
                yield Emission(chain, state.step, jump(state, self.model, self.cond, self.spec))
        except ChainDiverged as exc:
            logger.warning("%s; chain dropped", exc)
            self.failures.append(exc)

    def __iter__(self) -> Iterator[Emission]:
        for chain in range(self.config.chains):
            yield from self.run_chain(chain)


def run_cwjs(model: ScoreModel, cond, config: SamplerConfig, spec: GridSpec, init=None) -> CWJSRun:
    return CWJSRun(model, cond, config, spec, init)


def sample_valid(
    model: ScoreModel,
    cond,
    config: SamplerConfig,
    spec: GridSpec,
    n_valid: int,
    is_valid: Callable[[VoxelGrid], bool],
    copies: int = 100,
    max_rounds: int = 100,
) -> list[Emission]:
    """Batch-copy recipe: warm one chain up, fork it, walk each copy
    ``jump_every`` steps, jump, and keep valid samples until ``n_valid``.
    """
    cfg = config
    out: list[Emission] = []
    for rnd in range(max_rounds):
        rng = chain_rng(cfg.seed, rnd)
        state = init_chain(spec, cfg.sigma, rng, rnd)
        try:
            state = walk(state, model, cond, cfg.warmup, cfg.step_size, cfg.friction)
        except ChainDiverged as exc:
            logger.warning("%s during warm-up; round skipped", exc)
            continue
        for k, child in enumerate(fork_chain(state, copies)):
            try:
                child = walk(child, model, cond, cfg.jump_every, cfg.step_size, cfg.friction)
            except ChainDiverged as exc:
                logger.warning("%s; copy dropped", exc)
                continue
            grid = jump(child, model, cond, spec)
            if is_valid(grid):
                out.append(Emission(rnd * copies + k, child.step, grid))
                if len(out) >= n_valid:
                    return out
    return out
