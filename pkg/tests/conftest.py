from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def mol_block(atoms, title="test") -> str:
    """Minimal V2000 block for ``[(symbol, x, y, z), ...]``."""
    lines = [title, "  handmade", "", f"{len(atoms):3d}  0  0  0  0  0  0  0  0  0999 V2000"]
    for sym, x, y, z in atoms:
        lines.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {sym:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
    lines.append("M  END")
    return "\n".join(lines) + "\n"


def pdb_line(serial, name, x, y, z, element, record="ATOM", resname="ALA", altloc=" "):
    return (
        f"{record:<6}{serial:>5} {name:<4}{altloc}{resname:>3} A{1:>4}    "
        f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {element:>2}"
    )


ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
