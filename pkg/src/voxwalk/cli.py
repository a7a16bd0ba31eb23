"""Command-line entry point: voxelize, train, sample, detect, evaluate, roundtrip.

Exit codes: 0 success, 2 usage, 3 input error, 4 numeric failure. Errors are
reported on one stderr line starting with ``ERR_USAGE``, ``ERR_INPUT`` or
``ERR_NUMERIC``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics, peaks, structio
from .config import RunConfig, resolve
from .denoiser import (
    DivergenceError,
    TrainState,
    as_score_model,
    config_from_params,
    load_params,
    load_state,
    save_params,
    train,
)
from .denoiser.weights import WeightsFormatError
from .sampler import ChainDiverged, run_cwjs
from .scoremodel import MixtureOracle, read_manifest
from .voxelizer import (
    GridFormatError,
    GridSpec,
    ligand_spec,
    pocket_spec,
    read_grid,
    voxelize,
    write_grid,
)

logger = logging.getLogger("voxwalk")

EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"ERR_USAGE: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# flag -> config key; flags default to None so unset ones don't override
_CONFIG_FLAGS = {
    "grid": int,
    "resolution": float,
    "sigma": float,
    "seed": int,
    "threads": int,
    "chains": int,
    "warmup": int,
    "steps": int,
    "jump_every": int,
    "step_size": float,
    "friction": float,
    "threshold": float,
    "min_separation": float,
    "train_steps": int,
    "batch_size": int,
    "lr": float,
    "epochs": int,
    "clash_tolerance": float,
}


def _add_common(p: argparse.ArgumentParser, keys: list[str]) -> None:
    p.add_argument("--preset", choices=["desk", "paper"], default=None)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key"
    )
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=_CONFIG_FLAGS[key], default=None)


def _run_config(args) -> RunConfig:
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in _CONFIG_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.preset:
        overrides["preset"] = args.preset
    try:
        return resolve("desk", args.config, overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _threads(cfg: RunConfig):
    return threadpool_limits(limits=cfg.threads)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read(path, kind=None) -> structio.Structure:
    try:
        return structio.read_structure(path, kind)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None
    except structio.StructureError as exc:
        raise InputError(f"{path}: {exc}") from None


def _read_grid(path):
    try:
        return read_grid(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None
    except GridFormatError as exc:
        raise InputError(f"{path}: {exc}") from None


# commands ---------------------------------------------------------------


def cmd_voxelize(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    cfg.write(out / "config.resolved")
    ligand = _read(args.ligand)
    pocket = _read(args.pocket, "pocket")
    if pocket.kind != "pocket":
        pocket = structio.Structure(pocket.elements, pocket.coords, "pocket")
    pair = structio.center_pair(ligand, pocket, cfg.mass_weighted_center)
    if cfg.augment or args.augment_seed is not None:
        seed = cfg.seed if args.augment_seed is None else args.augment_seed
        pair = structio.augment(pair, np.random.default_rng(seed))
    radii = cfg.radii()
    write_grid(voxelize(pair.ligand, ligand_spec(cfg.grid, cfg.resolution), radii), out / "ligand.vxgr")
    write_grid(voxelize(pair.pocket, pocket_spec(cfg.grid, cfg.resolution), radii), out / "pocket.vxgr")
    (out / "center.json").write_text(json.dumps({"center": pair.center.tolist()}) + "\n")
    print(f"wrote {out / 'ligand.vxgr'} and {out / 'pocket.vxgr'}")


def cmd_train(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    cfg.write(out / "config.resolved")
    try:
        entries = read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    dataset = []
    for e in entries:
        if "ligand" not in e or "pocket" not in e:
            raise InputError(f"{args.manifest}: entries need 'ligand' and 'pocket'")
        dataset.append((_read_grid(e["ligand"]).data, _read_grid(e["pocket"]).data))
    grid_length = dataset[0][0].shape[-1]
    model_cfg = cfg.denoiser(grid_length)
    train_cfg = cfg.training()
    state: TrainState | None = None
    if args.resume:
        try:
            state = load_state(args.resume, train_cfg, model_cfg)
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"{args.resume}: {exc}") from None
    state = train(dataset, train_cfg, model_cfg, state=state, metrics_path=out / "loss.csv")
    save_params(state, out / "weights.vxwt")
    if state.losses:
        print(f"trained to step {state.step}; loss {state.losses[0]:.6g} -> {state.losses[-1]:.6g}")


def _score_backend(args, cfg: RunConfig):
    if bool(args.oracle) == bool(args.weights):
        raise UsageError("give exactly one of --oracle MANIFEST or --weights FILE")
    if args.oracle:
        try:
            oracle = MixtureOracle.from_manifest(args.oracle, cfg.sigma)
        except (OSError, ValueError, GridFormatError) as exc:
            raise InputError(f"{args.oracle}: {exc}") from None
        keys = list(dict.fromkeys(oracle.keys))
        key = args.pocket_key
        if key is None:
            if len(keys) != 1:
                raise UsageError("oracle has several pocket keys; pass --pocket-key")
            key = keys[0]
        return oracle, key, oracle.spec
    if not args.pocket:
        raise UsageError("--weights needs a pocket (grid or structure file)")
    if args.pocket.endswith(".vxgr"):
        pocket = _read_grid(args.pocket)
    else:
        pocket_struct = _read(args.pocket, "pocket")
        center = pocket_struct.coords.mean(axis=0)
        if args.center:
            center = np.array(json.loads(Path(args.center).read_text())["center"])
        pocket = voxelize(
            pocket_struct.translated(-center), pocket_spec(cfg.grid, cfg.resolution), cfg.radii()
        )
    try:
        weights = load_params(args.weights)
        model_cfg = config_from_params(weights.params, pocket.spec.length, cfg.sigma)
    except (OSError, KeyError, ValueError, WeightsFormatError) as exc:
        raise InputError(f"{args.weights}: {exc}") from None
    model = as_score_model(weights, model_cfg, use_ema=cfg.use_ema)
    return model, pocket.data, pocket.spec.with_channels(model_cfg.ligand_channels)


def cmd_sample(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    cfg.write(out / "config.resolved")
    model, cond, spec = _score_backend(args, cfg)
    pcfg = cfg.peaks()
    run = run_cwjs(model, cond, cfg.sampler(), spec)
    n_valid = 0
    with open(out / "manifest.jsonl", "w") as manifest:
        t0 = time.perf_counter()
        for em in run:
            stem = f"{em.chain:03d}_{em.step:06d}"
            write_grid(em.grid, out / f"{stem}.vxgr")
            mol = peaks.detect_atoms(em.grid, pcfg)
            valid = 1 <= len(mol) <= 2 * spec.length
            n_valid += valid
            if len(mol):
                with open(out / f"{stem}.xyz", "w") as fh:
                    structio.write_xyz(mol, fh, comment=f"chain={em.chain} step={em.step}")
            record = {
                "chain": em.chain,
                "step": em.step,
                "file": f"{stem}.vxgr",
                "xyz": f"{stem}.xyz" if len(mol) else None,
                "atoms": len(mol),
                "valid": valid,
                "wall_time": round(time.perf_counter() - t0, 6),
            }
            manifest.write(json.dumps(record) + "\n")
    for failure in run.failures:
        print(f"warning: {failure}", file=sys.stderr)
    print(f"{n_valid} valid samples written to {out}")


def cmd_detect(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    pcfg = cfg.peaks()
    for path in args.grids:
        grid = _read_grid(path)
        stem = Path(path).stem
        found = peaks.find_peaks(grid, pcfg)
        mol = peaks.detect_atoms(grid, pcfg)
        if len(mol):
            with open(out / f"{stem}.xyz", "w") as fh:
                structio.write_xyz(mol, fh)
        if args.peaks_csv:
            with open(out / f"{stem}_peaks.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["channel", "value", "x", "y", "z"])
                for p in found:
                    w.writerow([p.channel, f"{p.value:.6f}", *(f"{c:.6f}" for c in p.position)])
        print(f"{path}: {len(mol)} atoms")


def _structures_in(path) -> list[tuple[str, structio.Structure]]:
    path = Path(path)
    files = [path] if path.is_file() else sorted(
        p for p in path.iterdir() if p.suffix.lower() in (".xyz", ".sdf", ".mol")
    )
    out = []
    for f in files:
        if f.suffix.lower() == ".sdf":
            try:
                recs = structio.read_sdf_records(f.read_bytes())
            except structio.StructureError as exc:
                raise InputError(f"{f}: {exc}") from None
            out.extend((f"{f.name}#{k}", s) for k, s in enumerate(recs))
        else:
            out.append((f.name, _read(f)))
    return out


def cmd_evaluate(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    generated = _structures_in(args.generated)
    if not generated:
        raise InputError(f"{args.generated}: no generated structures")
    reference = _structures_in(args.reference) if args.reference else []
    gen = [s for _, s in generated]
    ref = [s for _, s in reference]
    report: dict = {
        "bond_perception": "geometric",
        "n_generated": len(gen),
        "n_reference": len(ref),
        "summary_generated": metrics.summary_stats(gen),
    }
    if ref:
        report["summary_reference"] = metrics.summary_stats(ref)
        table = metrics.bond_jsd_table(gen, ref)
        report["bond_length_jsd"] = table
        with open(out / "jsd.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["set", *table])
            w.writerow(["generated", *("" if v is None else f"{v:.6f}" for v in table.values())])
    if args.pocket:
        pocket = _read(args.pocket, "pocket")
        if args.center:
            center = np.array(json.loads(Path(args.center).read_text())["center"])
            pocket = pocket.translated(-center)
        clashes = {name: metrics.clash_count(s, pocket, cfg.clash_tolerance) for name, s in generated}
        report["clashes"] = clashes
        report["clash_tolerance"] = cfg.clash_tolerance
        with open(out / "clashes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "clashes"])
            for name, c in clashes.items():
                w.writerow([name, c])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report written to {out / 'report.json'}")


def cmd_roundtrip(args, cfg: RunConfig) -> None:
    s = _read(args.structure)
    spec = GridSpec(cfg.grid, cfg.resolution, len(structio.ELEMENT_SETS[s.kind]))
    if args.center:
        s = s.translated(-s.coords.mean(axis=0))
    r = peaks.roundtrip_report(s, spec, cfg.radii(), cfg.peaks())
    print(f"matched={r.matched} rmsd={r.rmsd:.6f} spurious={r.spurious} missed={r.missed}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="voxwalk", description="Pocket-conditioned voxel ligand generation by walk-jump sampling."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("voxelize", help="center, augment and voxelize a ligand/pocket pair")
    p.add_argument("ligand")
    p.add_argument("pocket")
    p.add_argument("out")
    p.add_argument("--augment-seed", type=int, default=None)
    _add_common(p, ["grid", "resolution", "seed"])
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train the conditional denoiser")
    p.add_argument("manifest", help="JSONL with ligand/pocket VXGR paths")
    p.add_argument("out")
    p.add_argument("--resume", help="VXWT checkpoint to continue from")
    _add_common(p, ["sigma", "seed", "threads", "train_steps", "batch_size", "lr", "epochs"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="walk-jump sampling for a pocket")
    p.add_argument("out")
    p.add_argument("--pocket", help="pocket VXGR grid or structure file")
    p.add_argument("--center", help="center.json written by voxelize")
    p.add_argument("--oracle", help="JSONL manifest of ligand grids for the mixture oracle")
    p.add_argument("--pocket-key", help="oracle component key to condition on")
    p.add_argument("--weights", help="VXWT weights of a trained denoiser")
    _add_common(
        p,
        ["grid", "resolution", "sigma", "seed", "threads", "chains", "warmup", "steps",
         "jump_every", "step_size", "friction", "threshold", "min_separation"],
    )
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("detect", help="recover atoms from VXGR grids")
    p.add_argument("grids", nargs="+")
    p.add_argument("--out", default=".")
    p.add_argument("--peaks-csv", action="store_true")
    _add_common(p, ["threshold", "min_separation"])
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="geometric metrics for generated structures")
    p.add_argument("generated", help="directory (or file) of generated XYZ/SDF")
    p.add_argument("--reference", help="directory (or file) of reference structures")
    p.add_argument("--pocket", help="pocket structure for clash counting")
    p.add_argument("--center", help="center.json to move the pocket into the grid frame")
    p.add_argument("--out", default=".")
    _add_common(p, ["clash_tolerance"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("roundtrip", help="voxelize -> detect quality check")
    p.add_argument("structure")
    p.add_argument("--center", action="store_true", help="center the structure first")
    _add_common(p, ["grid", "resolution", "threshold", "min_separation"])
    p.set_defaults(func=cmd_roundtrip)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error already printed
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _run_config(args)
        with _threads(cfg):
            args.func(args, cfg)
    except UsageError as exc:
        return _fail("ERR_USAGE", exc, EXIT_USAGE)
    except (DivergenceError, ChainDiverged, FloatingPointError) as exc:
        return _fail("ERR_NUMERIC", exc, EXIT_NUMERIC)
    except (InputError, OSError, ValueError, KeyError) as exc:
        return _fail("ERR_INPUT", exc, EXIT_INPUT)
    return 0


def _fail(code: str, exc: Exception, status: int) -> int:
    message = " ".join(str(exc).split())
    print(f"{code}: {message}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
