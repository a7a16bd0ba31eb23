"""Conditional voxel denoiser ``xhat = U(E_lig(y) + E_poc(xi))``.

Both encoders are a stem convolution followed by residual blocks
``h + silu(conv(silu(conv(h))))``; the trunk ``U`` is a small encoder-decoder
with stride-2 downsampling, nearest-neighbour upsampling and additive skips.
The final layer is linear.

Parameters live in a flat ``dict[str, ndarray]``. Forward passes record a
tape that :meth:`Tape.backward` replays in reverse.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import layers


@dataclass(frozen=True)
class DenoiserConfig:
    grid_length: int = 16
    ligand_channels: int = 7
    pocket_channels: int = 4
    embed_channels: int = 8
    depth: int = 2
    widths: tuple[int, ...] = (8, 8, 8)
    res_blocks: int = 2
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.embed_channels < 1:
            raise ValueError("embed_channels must be >= 1")
        if len(self.widths) != self.depth + 1:
            raise ValueError(f"need depth + 1 = {self.depth + 1} widths, got {self.widths}")
        if self.grid_length % (2**self.depth):
            raise ValueError(
                f"grid length {self.grid_length} not divisible by 2**depth = {2**self.depth}"
            )

    @classmethod
    def paper(cls) -> "DenoiserConfig":
        # production encoder width; the trunk stays a small stand-in
        return cls(grid_length=64, embed_channels=16, depth=3, widths=(32, 64, 128, 256))

    @classmethod
    def desk(cls) -> "DenoiserConfig":
        return cls()


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout):
        shapes[f"{name}.w"] = (cout, cin, 3, 3, 3)
        shapes[f"{name}.b"] = (cout,)

    ce = cfg.embed_channels
    for enc, cin in (("lig", cfg.ligand_channels), ("poc", cfg.pocket_channels)):
        conv(f"{enc}.stem", cin, ce)
        for r in range(cfg.res_blocks):
            conv(f"{enc}.res{r}.a", ce, ce)
            conv(f"{enc}.res{r}.b", ce, ce)
    w = cfg.widths
    conv("trunk.in", ce, w[0])
    for lvl in range(1, cfg.depth + 1):
        conv(f"trunk.down{lvl}", w[lvl - 1], w[lvl])
    conv("trunk.mid", w[-1], w[-1])
    for lvl in range(cfg.depth, 0, -1):
        conv(f"trunk.up{lvl}", w[lvl], w[lvl - 1])
    conv("trunk.head", w[0], cfg.ligand_channels)
    return shapes


def config_from_params(params: dict, grid_length: int, sigma: float) -> DenoiserConfig:
    """Recover the architecture from parameter names and shapes."""
    try:
        ce, cx = params["lig.stem.w"].shape[:2]
        cxi = params["poc.stem.w"].shape[1]
        w0 = params["trunk.in.w"].shape[0]
    except KeyError as exc:
        raise KeyError(f"weights are missing tensor {exc.args[0]!r}") from None
    depth = sum(1 for k in params if re.fullmatch(r"trunk\.down\d+\.w", k))
    res = sum(1 for k in params if re.fullmatch(r"lig\.res\d+\.a\.w", k))
    widths = [w0] + [params[f"trunk.down{lvl}.w"].shape[0] for lvl in range(1, depth + 1)]
    cfg = DenoiserConfig(grid_length, cx, cxi, ce, depth, tuple(widths), res, sigma)
    check_params(params, cfg)
    return cfg


def check_params(params: dict, cfg: DenoiserConfig) -> None:
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise KeyError(f"weights are missing tensors required by the config: {missing}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"tensor {name} has shape {params[name].shape}, expected {shape}")


def init_params(
    cfg: DenoiserConfig, rng: np.random.Generator, zero_head: bool = True
) -> dict[str, np.ndarray]:
    """Kaiming fan-in initialization, zero biases, optionally zero head."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or (zero_head and name.startswith("trunk.head")):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return params


class Tape:
    """Records forward ops so gradients can be propagated in reverse."""

    def __init__(self, params: dict):
        self.params = params
        self.ops: list[tuple] = []
        self.values: list[np.ndarray] = []
        self.output: int | None = None

    def _new(self, value) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def input(self, x) -> int:
        return self._new(x)

    def conv(self, src: int, name: str, stride: int = 1) -> int:
        out, cache = layers.conv3d(
            self.values[src], self.params[f"{name}.w"], self.params[f"{name}.b"], stride
        )
        dst = self._new(out)
        self.ops.append(("conv", src, dst, name, cache))
        return dst

    def silu(self, src: int) -> int:
        dst = self._new(layers.silu(self.values[src]))
        self.ops.append(("silu", src, dst))
        return dst

    def add(self, a: int, b: int) -> int:
        dst = self._new(self.values[a] + self.values[b])
        self.ops.append(("add", a, b, dst))
        return dst

    def up(self, src: int) -> int:
        dst = self._new(layers.upsample2(self.values[src]))
        self.ops.append(("up", src, dst))
        return dst

    def backward(self, out: int, dout: np.ndarray) -> dict[str, np.ndarray]:
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        adj: dict[int, np.ndarray] = {out: dout}

        def acc(i, g):
            adj[i] = adj[i] + g if i in adj else g

        for op in reversed(self.ops):
            kind = op[0]
            if kind == "add":
                _, a, b, dst = op
                if dst in adj:
                    g = adj.pop(dst)
                    acc(a, g)
                    acc(b, g)
                continue
            src, dst = op[1], op[2]
            if dst not in adj:
                continue
            g = adj.pop(dst)
            if kind == "conv":
                name, cache = op[3], op[4]
                dx, dw, db = layers.conv3d_backward(g, self.params[f"{name}.w"], cache)
                grads[f"{name}.w"] += dw
                grads[f"{name}.b"] += db
                acc(src, dx)
            elif kind == "silu":
                acc(src, layers.silu_backward(g, self.values[src]))
            elif kind == "up":
                acc(src, layers.upsample2_backward(g))
        return grads


def _encoder(tape: Tape, src: int, prefix: str, res_blocks: int) -> int:
    h = tape.silu(tape.conv(src, f"{prefix}.stem"))
    for r in range(res_blocks):
        a = tape.silu(tape.conv(h, f"{prefix}.res{r}.a"))
        a = tape.silu(tape.conv(a, f"{prefix}.res{r}.b"))
        h = tape.add(h, a)
    return h


def _trunk(tape: Tape, src: int, depth: int) -> int:
    h = tape.silu(tape.conv(src, "trunk.in"))
    skips = [h]
    for lvl in range(1, depth + 1):
        h = tape.silu(tape.conv(h, f"trunk.down{lvl}", stride=2))
        skips.append(h)
    h = tape.silu(tape.conv(h, "trunk.mid"))
    for lvl in range(depth, 0, -1):
        h = tape.silu(tape.conv(tape.up(h), f"trunk.up{lvl}"))
        h = tape.add(h, skips[lvl - 1])
    return tape.conv(h, "trunk.head")


def forward(params: dict, y: np.ndarray, xi: np.ndarray, cfg: DenoiserConfig, tape=None):
    """Denoise a batch. ``y``: ``(B, c_x, L, L, L)``, ``xi``: ``(B, c_xi, L, L, L)``.

    Unbatched inputs are accepted and give an unbatched result. Pass a
    :class:`Tape` to keep intermediates for :func:`backward`.
    """
    y = np.asarray(y)
    xi = np.asarray(xi)
    squeeze = y.ndim == 4
    if squeeze:
        y, xi = y[None], xi[None]
    L = cfg.grid_length
    if y.shape[1:] != (cfg.ligand_channels, L, L, L):
        raise ValueError(f"ligand input shape {y.shape[1:]} does not match config")
    if xi.shape[1:] != (cfg.pocket_channels, L, L, L):
        raise ValueError(f"pocket input shape {xi.shape[1:]} does not match config")
    if xi.shape[0] != y.shape[0]:
        if xi.shape[0] != 1:
            raise ValueError("pocket batch must be 1 or match ligand batch")
        xi = np.broadcast_to(xi, (y.shape[0],) + xi.shape[1:])
    dtype = np.result_type(params["trunk.head.w"].dtype, np.float32)
    tape = tape if tape is not None else Tape(params)
    ey = _encoder(tape, tape.input(y.astype(dtype, copy=False)), "lig", cfg.res_blocks)
    ex = _encoder(tape, tape.input(xi.astype(dtype, copy=False)), "poc", cfg.res_blocks)
    out = _trunk(tape, tape.add(ey, ex), cfg.depth)
    result = tape.values[out]
    tape.output = out
    return result[0] if squeeze else result


@dataclass
class DenoiserParams:
    """Raw weights plus their exponential moving average."""

    params: dict
    ema: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ema:
            self.ema = {k: v.copy() for k, v in self.params.items()}
