import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

TINY_INI = """\
[experiment]
seeds = 0
ensemble_sizes = 1, 2
baseline = true

[data]
train_groups = 24
validation_groups = 8
faces_per_group = 2, 4
image_size = 16
per_class = 2

[extractor]
iters = 2
batch_size = 4
decay_every = 100
augment = false

[aggregator]
hidden_dim = 8
baseline_hidden_dim = 4
iters = 10
batch_size = 8
"""


# ---------------------------------------------------------------- acceptance bookkeeping

import hashlib
import json
import os
import shutil
import time

import pytest

ROOT = Path(__file__).resolve().parents[1]
_VERDICTS = []


def record(criterion: str, ok: bool, detail: str = "") -> bool:
    """Print and remember one PASS/FAIL line; the caller still asserts."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    print(line)
    _VERDICTS.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


def _source_digest(config) -> str:
    from rrde.harness.experiment import config_to_dict

    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "rrde").rglob("*.py")):
        h.update(p.relative_to(ROOT).as_posix().encode())
        h.update(p.read_bytes())
    h.update(json.dumps(config_to_dict(config), sort_keys=True).encode())
    return h.hexdigest()


@pytest.fixture(scope="session")
def desk_run():
    """The desk-scale experiment, cached under ``RRDE_DESK_DIR`` (default runs/acceptance_desk).

    A cached run is reused only when its stamp matches the current sources and
    config; otherwise it is recomputed from scratch.
    """
    from rrde.harness.config import DESK
    from rrde.harness.experiment import load_data, read_table, run_experiment

    out = Path(os.environ.get("RRDE_DESK_DIR", ROOT / "runs" / "acceptance_desk"))
    stamp_path = out / "stamp.json"
    digest = _source_digest(DESK)
    stamp = json.loads(stamp_path.read_text()) if stamp_path.exists() else {}
    data = load_data(DESK)
    if stamp.get("digest") != digest or not (out / "results.csv").exists():
        shutil.rmtree(out, ignore_errors=True)
        t0 = time.perf_counter()
        run_experiment(DESK, out, data)
        stamp = {"digest": digest, "seconds": time.perf_counter() - t0, "cpus": os.cpu_count()}
        stamp_path.write_text(json.dumps(stamp, indent=2) + "\n")
    return {"config": DESK, "out": out, "table": read_table(out), "data": data, "stamp": stamp}
