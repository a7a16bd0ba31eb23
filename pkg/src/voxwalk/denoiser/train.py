"""Denoising objective, AdamW with EMA, and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..scoremodel import ScoreModel
from .model import DenoiserConfig, DenoiserParams, Tape, check_params, forward, init_params
from .weights import load_tensors, save_tensors

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 64, "lr": 1e-5, "epochs": 340, **kw})

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**kw)


def loss_and_grad(
    params: dict,
    x: np.ndarray,
    xi: np.ndarray,
    sigma: float,
    cfg: DenoiserConfig,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
):
    """Mean squared denoising error and its exact parameter gradient.

    ``x``/``xi`` are batches of clean ligand and pocket grids. The noisy
    input is ``x + sigma * noise``; ``noise`` is drawn from ``rng`` unless
    given explicitly.
    """
    x = np.asarray(x)
    if x.ndim != 5 or x.shape[0] == 0:
        raise ValueError("expected a non-empty batch of ligand grids (B, C, L, L, L)")
    dtype = params["trunk.head.w"].dtype
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = rng.standard_normal(x.shape, dtype=np.float32)
    x = x.astype(dtype, copy=False)
    y = x + dtype.type(sigma) * noise.astype(dtype, copy=False)
    tape = Tape(params)
    xhat = forward(params, y, xi, cfg, tape=tape)
    resid = xhat - x
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise DivergenceError(-1, loss)
    grads = tape.backward(tape.output, (2.0 / resid.size) * resid)
    return loss, grads


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)
            params[k] = (p - c.lr * (update + c.weight_decay * p)).astype(p.dtype)


def ema_update(shadow: dict, params: dict, decay: float) -> None:
    for k, p in params.items():
        shadow[k] = (decay * shadow[k] + (1.0 - decay) * p).astype(p.dtype)


@dataclass
class TrainState:
    weights: DenoiserParams
    optimizer: AdamW
    step: int = 0
    losses: list = field(default_factory=list)


def save_params(state: TrainState | DenoiserParams, path) -> None:
    """Write weights, EMA shadow and (for a TrainState) optimizer moments."""
    if isinstance(state, TrainState):
        weights = state.weights
    else:
        weights = state
    tensors = dict(weights.params)
    tensors.update({f"ema/{k}": v for k, v in weights.ema.items()})
    if isinstance(state, TrainState):
        opt = state.optimizer
        tensors.update({f"adam_m/{k}": v for k, v in opt.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in opt.v.items()})
        tensors["state/step"] = np.array([state.step], dtype=np.float32)
        tensors["state/adam_t"] = np.array([opt.t], dtype=np.float32)
    save_tensors(tensors, path)


def _split(tensors: dict) -> dict[str, dict]:
    groups: dict[str, dict] = {"": {}}
    for name, arr in tensors.items():
        prefix, sep, rest = name.partition("/")
        if sep:
            groups.setdefault(prefix, {})[rest] = arr
        else:
            groups[""][name] = arr
    return groups


def load_params(path, cfg: DenoiserConfig | None = None) -> DenoiserParams:
    groups = _split(load_tensors(path))
    params = groups[""]
    if cfg is not None:
        check_params(params, cfg)
    ema = groups.get("ema") or {k: v.copy() for k, v in params.items()}
    return DenoiserParams(params, ema)


def load_state(path, train_cfg: TrainConfig, cfg: DenoiserConfig) -> TrainState:
    groups = _split(load_tensors(path))
    weights = DenoiserParams(groups[""], groups.get("ema", {}))
    check_params(weights.params, cfg)
    opt = AdamW(weights.params, train_cfg)
    if "adam_m" in groups:
        opt.m.update(groups["adam_m"])
        opt.v.update(groups["adam_v"])
        opt.t = int(groups["state"]["adam_t"][0])
    step = int(groups["state"]["step"][0]) if "state" in groups else 0
    return TrainState(weights, opt, step)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, step])


def train(
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    train_cfg: TrainConfig,
    cfg: DenoiserConfig,
    state: TrainState | None = None,
    metrics_path=None,
    steps: int | None = None,
) -> TrainState:
    """Fit the denoiser on ``(ligand grid, pocket grid)`` pairs.

    Batches follow a per-epoch permutation and per-step noise streams that
    depend only on ``(seed, epoch)`` and ``(seed, step)``, so a run resumed
    from a saved state continues exactly like an uninterrupted one.
    ``steps`` limits how many optimizer steps this call performs.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    X = np.stack([np.asarray(x, dtype=np.float32) for x, _ in dataset])
    XI = np.stack([np.asarray(xi, dtype=np.float32) for _, xi in dataset])
    n = len(dataset)
    bs = min(train_cfg.batch_size, n)
    per_epoch = -(-n // bs)
    total = train_cfg.epochs * per_epoch
    if train_cfg.max_steps is not None:
        total = train_cfg.max_steps

    if state is None:
        params = init_params(cfg, np.random.default_rng([train_cfg.seed, 0]))
        state = TrainState(DenoiserParams(params), AdamW(params, train_cfg))
    end = total if steps is None else min(total, state.step + steps)

    writer = None
    fh = None
    if metrics_path is not None:
        new_file = state.step == 0 or not Path(metrics_path).exists()
        fh = open(metrics_path, "w" if new_file else "a", newline="")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["epoch", "step", "loss"])
    try:
        while state.step < end:
            epoch, pos = divmod(state.step, per_epoch)
            idx = _epoch_order(n, train_cfg.seed, epoch)[pos * bs : (pos + 1) * bs]
            try:
                loss, grads = loss_and_grad(
                    state.weights.params,
                    X[idx],
                    XI[idx],
                    cfg.sigma,
                    cfg,
                    rng=_step_rng(train_cfg.seed, state.step),
                )
            except DivergenceError as exc:
                raise DivergenceError(state.step + 1, float("nan")) from exc
            state.optimizer.step(state.weights.params, grads)
            ema_update(state.weights.ema, state.weights.params, train_cfg.ema_decay)
            state.step += 1
            state.losses.append(loss)
            if writer is not None:
                writer.writerow([epoch, state.step, f"{loss:.9g}"])
            if state.step % 50 == 0:
                logger.info("step %d loss %.6g", state.step, loss)
    finally:
        if fh is not None:
            fh.close()
    return state


class DenoiserScoreModel(ScoreModel):
    """:class:`ScoreModel` backed by the trained network."""

    def __init__(self, weights: DenoiserParams, cfg: DenoiserConfig, use_ema: bool = True):
        self.cfg = cfg
        self.sigma = float(cfg.sigma)
        self.params = weights.ema if use_ema else weights.params
        check_params(self.params, cfg)

    def estimate(self, y, cond) -> np.ndarray:
        y = getattr(y, "data", y)
        cond = getattr(cond, "data", cond)
        return forward(self.params, y, cond, self.cfg)


def as_score_model(
    weights: DenoiserParams, cfg: DenoiserConfig, use_ema: bool = True
) -> DenoiserScoreModel:
    return DenoiserScoreModel(weights, cfg, use_ema)
