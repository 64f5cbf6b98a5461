"""Shared fixtures: the trained acceptance models and the acceptance summary.

Training the six desk-scale models takes tens of minutes on one core. Set
SPECTRALBP_ACCEPTANCE_DIR to keep them between sessions; a run is reused only
when its config snapshot matches and its final checkpoint exists.
"""
import os
from pathlib import Path

import pytest

from spectralbp.config import dump_config
from spectralbp.training import FORWARD_KL, REVERSE_KL, TrainingConfig, train

REVERSE_ENERGIES = ("u1", "u2", "u3", "u4")
FORWARD_ENERGIES = ("crescent", "ring-mixture")

_RESULTS: dict[int, list[tuple[bool, str]]] = {}


def acceptance_config(energy: str) -> TrainingConfig:
    objective = REVERSE_KL if energy in REVERSE_ENERGIES else FORWARD_KL
    return TrainingConfig(objective=objective, energy=energy, batch_size=64, iterations=5000, epochs=5, lr=1e-4,
                          seed=0)


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory) -> dict[str, Path]:
    base = os.environ.get("SPECTRALBP_ACCEPTANCE_DIR")
    root = Path(base) if base else tmp_path_factory.mktemp("acceptance")
    runs = {}
    for energy in REVERSE_ENERGIES + FORWARD_ENERGIES:
        cfg = acceptance_config(energy)
        out = root / energy
        snapshot = dump_config("train", cfg)
        done = (out / "config.txt").exists() and (out / "config.txt").read_text() == snapshot \
            and (out / f"checkpoint_epoch{cfg.epochs}.ckpt").exists() and (out / "epochs.csv").exists()
        if not done:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").unlink(missing_ok=True)
            train(cfg, out)
            (out / "config.txt").write_text(snapshot)      # written last: marks the run complete
        runs[energy] = out
    return runs


@pytest.fixture
def record():
    """record(criterion, passed, detail) adds a line to the acceptance summary."""
    def add(criterion: int, passed: bool, detail: str):
        _RESULTS.setdefault(criterion, []).append((bool(passed), detail))
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}: {detail}")
    return add


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_RESULTS):
        parts = _RESULTS[criterion]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}: {detail}")
