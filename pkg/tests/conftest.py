import shutil
import struct
import subprocess
from pathlib import Path

import numpy as np
import pytest

from echelon import corpus
from echelon.config import PRESETS
from echelon.nn_engine import ConvNetModel, Hyper

CLI_EXE = Path(__import__("setuptools").__file__).parent / "cli-32.exe"


def hand_pe(sections, e_lfanew=0x80, opt_size=0, total=None):
    """Minimal PE image written without the package's own writer.

    ``sections`` holds ``(name, raw_offset, raw_size)``; bytes outside the
    headers are filled with 0xCC.
    """
    table = e_lfanew + 24 + opt_size
    end = max([table + 40 * len(sections)] + [o + s for _, o, s in sections])
    buf = bytearray(b"\xcc" * (total if total is not None else end))
    buf[0:2] = b"MZ"
    buf[0x3C:0x40] = struct.pack("<I", e_lfanew)
    buf[e_lfanew:e_lfanew + 4] = b"PE\0\0"
    buf[e_lfanew + 4:e_lfanew + 24] = struct.pack("<HHIIIHH", 0x14C, len(sections), 0, 0, 0, opt_size, 0)
    buf[e_lfanew + 24:table] = bytes(opt_size)
    for i, (name, off, size) in enumerate(sections):
        h = table + 40 * i
        buf[h:h + 40] = (name.encode().ljust(8, b"\0")
                         + struct.pack("<IIII", size, 0x1000 * (i + 1), size, off) + bytes(16))
    return bytes(buf)


def objdump_sections(path):
    """``[(name, file_offset, size, vma)]`` as printed by ``objdump -h``."""
    out = subprocess.run(["objdump", "-h", str(path)], capture_output=True, text=True, check=True)
    rows = []
    for line in out.stdout.splitlines():
        parts = line.split()
        if len(parts) == 7 and parts[0].isdigit():
            rows.append((parts[1], int(parts[5], 16), int(parts[2], 16), int(parts[3], 16)))
    return rows


def objdump_image_base(path):
    out = subprocess.run(["objdump", "-x", str(path)], capture_output=True, text=True, check=True)
    for line in out.stdout.splitlines():
        if line.startswith("ImageBase"):
            return int(line.split()[1], 16)
    raise AssertionError("no ImageBase in objdump output")


needs_objdump = pytest.mark.skipif(shutil.which("objdump") is None or not CLI_EXE.exists(),
                                   reason="objdump or reference executable unavailable")


def random_model(rng, *, max_f=8, max_w=8, max_d=4, max_h=8, semantic=None, dtype=np.float64):
    F = int(rng.integers(1, max_f + 1))
    W = int(rng.integers(1, max_w + 1))
    D = int(rng.integers(1, max_d + 1))
    H = int(rng.integers(2, max_h + 1))
    sem = bool(rng.integers(2)) if semantic is None else semantic
    hp = Hyper(W, F, D, H, sem, 3 if sem else 0)
    return ConvNetModel.init(hp, int(rng.integers(1 << 31)), dtype=dtype)


@pytest.fixture(scope="session")
def small_corpus():
    return corpus.generate_dataset(corpus.reference_spec(80, 80, seed=3))


@pytest.fixture(scope="session")
def quick_config():
    return PRESETS["desk"].replace(target_fpr=0.05, max_epochs=3, patience=2, n_filters=8,
                                   hidden=16, cutoff_step=0.25, seed=5)


@pytest.fixture(scope="session")
def quick_run(small_corpus, quick_config, tmp_path_factory):
    from echelon import pipeline
    out = tmp_path_factory.mktemp("run")
    return pipeline.run_full(quick_config, small_corpus, out), out


# One pass/fail line per acceptance criterion, printed after the run.
_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    number, title = marker.args
    prev = _criteria.get(number, (title, "PASS"))[1]
    if report.failed:
        prev = "FAIL"
    elif report.skipped and prev == "PASS":
        prev = "SKIP"
    _criteria[number] = (title, prev)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
