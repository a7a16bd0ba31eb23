"""Flat ``key = value`` run configuration with named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .denoiser import DenoiserConfig, TrainConfig
from .peaks import PeakConfig
from .sampler import SamplerConfig
from .voxelizer import POCKET_VDW_RADII, RadiusTable


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    threads: int = 1
    # grid
    grid: int = 16
    resolution: float = 0.25
    ligand_radius: float = 0.5
    radius_C: float = POCKET_VDW_RADII["C"]
    radius_N: float = POCKET_VDW_RADII["N"]
    radius_O: float = POCKET_VDW_RADII["O"]
    radius_S: float = POCKET_VDW_RADII["S"]
    mass_weighted_center: bool = False
    augment: bool = False
    # denoiser
    sigma: float = 1.0
    embed_channels: int = 8
    depth: int = 2
    widths: str = "8,8,8"
    res_blocks: int = 2
    use_ema: bool = True
    # training
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    ema_decay: float = 0.999
    epochs: int = 1
    train_steps: int = 0
    # sampling (step_size / friction 0 -> sigma/2 and 1/step_size)
    step_size: float = 0.0
    friction: float = 0.0
    warmup: int = 100
    jump_every: int = 50
    steps: int = 200
    chains: int = 1
    # peaks
    threshold: float = 0.1
    refine: str = "gaussian"
    min_separation: float = 0.9
    # metrics
    clash_tolerance: float = 0.5
    bond_slack: float = 0.4

    def set(self, key: str, value) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        kind = types[key]
        if isinstance(value, str):
            if kind == "bool":
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{key}: expected a boolean, got {value!r}")
                value = low in ("true", "1", "yes")
            elif kind == "int":
                value = int(value)
            elif kind == "float":
                value = float(value)
            else:
                value = value.strip()
        setattr(self, key, value)

    # conversions -------------------------------------------------------

    def radii(self) -> RadiusTable:
        return RadiusTable(
            self.ligand_radius,
            {"C": self.radius_C, "N": self.radius_N, "O": self.radius_O, "S": self.radius_S},
        )

    def denoiser(self, grid_length: int | None = None) -> DenoiserConfig:
        return DenoiserConfig(
            grid_length=grid_length or self.grid,
            embed_channels=self.embed_channels,
            depth=self.depth,
            widths=tuple(int(w) for w in self.widths.split(",")),
            res_blocks=self.res_blocks,
            sigma=self.sigma,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            ema_decay=self.ema_decay,
            epochs=self.epochs,
            max_steps=self.train_steps or None,
            seed=self.seed,
        )

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            sigma=self.sigma,
            step_size=self.step_size or None,
            friction=self.friction or None,
            warmup=self.warmup,
            jump_every=self.jump_every,
            total_steps=self.steps,
            chains=self.chains,
            seed=self.seed,
        )

    def peaks(self) -> PeakConfig:
        refine = None if self.refine in ("", "none") else self.refine
        return PeakConfig(self.threshold, refine, self.min_separation)

    # text form ---------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())


PRESETS = {
    "desk": {},
    "paper": {
        "grid": 64,
        "embed_channels": 16,
        "depth": 3,
        "widths": "32,64,128,256",
        "batch_size": 64,
        "lr": 1e-5,
        "epochs": 340,
        "warmup": 400,
        "jump_every": 100,
        "steps": 500,
        "chains": 100,
        "augment": True,
    },
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(
    preset: str = "desk",
    config_file=None,
    overrides: dict | None = None,
) -> RunConfig:
    """Defaults < preset < config file < command-line overrides."""
    file_values = parse_config_text(Path(config_file).read_text()) if config_file else {}
    preset = (overrides or {}).get("preset") or file_values.get("preset") or preset
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig()
    cfg.preset = preset
    for k, v in PRESETS[preset].items():
        cfg.set(k, v)
    for k, v in file_values.items():
        cfg.set(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    return cfg
