"""Shared fixtures: the full phantom pipeline and the acceptance report."""
import csv
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

from ctinterp.cli import main

ACCEPTANCE: list[str] = []

# configuration of the end-to-end run; seeds and sizes are fixed so every run is identical
PIPELINE_CONFIGS = {
    "seg.cfg": "epochs = 6\nlr = 1e-3\n",
    "pre.cfg": "epochs = 30\nlr = 1e-3\ntv_motion = 0.01\ntv_mask = 0.01\nzero_init_head = true\n",
    "ft_noseg.cfg": "epochs = 5\nlr = 1e-4\nlambda_cycle = 1.0\nlambda_seg = 0\nlambda_ps = 1.0\n",
    "ft_seg.cfg": "epochs = 5\nlr = 1e-4\nlambda_cycle = 1.0\nlambda_seg = 0.5\nlambda_ps = 1.0\n",
    "bench.cfg": "test_count = 10\ntest_seed = 1000\nsegmenter = seg.ifck\nflow_noseg = ft_noseg.ifck\n"
                 "flow_seg = ft_seg.ifck\n",
}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per criterion; returns the verdict for asserting."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}")
        return ok

    return record


def _run(*args):
    code = main([str(a) for a in args])
    assert code == 0, f"ctinterp {' '.join(map(str, args))} exited with {code}"


def read_bench(path: Path):
    """(matrix rows keyed by (method, factor, roi, metric) -> mean, skipped rows)."""
    body, _, skipped = path.read_text().partition("\n\n")
    rows = {(r["method"], int(r["factor"]), r["roi"], r["metric"]): float(r["mean"])
            for r in csv.DictReader(body.splitlines())}
    return rows, list(csv.DictReader(skipped.splitlines()))


def read_curve(path: Path):
    return {(r["method"], int(r["factor"])): {k: float(v) for k, v in r.items() if k not in ("method", "factor")}
            for r in csv.DictReader(open(path))}


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Phantoms, segmenter, 30-epoch pretraining, two fine-tuning arms and the bench, via the CLI."""
    d = tmp_path_factory.mktemp("pipeline")
    for name, text in PIPELINE_CONFIGS.items():
        (d / name).write_text(text)
    t0 = time.perf_counter()
    _run("phantom", "--out", d / "thin", "--count", 12, "--seed", 100)
    _run("phantom", "--out", d / "val", "--count", 3, "--seed", 200)
    _run("phantom", "--out", d / "thick", "--count", 12, "--seed", 300, "--factor", 2)
    _run("segmenter", "--config", d / "seg.cfg", "--data", d / "thin", "--out", d / "seg.ifck")
    _run("pretrain", "--config", d / "pre.cfg", "--data", d / "thin", "--val", d / "val", "--out", d / "pre.ifck")
    _run("finetune", "--config", d / "ft_noseg.cfg", "--data", d / "thick", "--val", d / "val",
         "--pretrained", d / "pre.ifck", "--out", d / "ft_noseg.ifck")
    _run("finetune", "--config", d / "ft_seg.cfg", "--data", d / "thick", "--val", d / "val",
         "--pretrained", d / "pre.ifck", "--segmenter", d / "seg.ifck", "--out", d / "ft_seg.ifck")
    _run("bench", "--config", d / "bench.cfg", "--out", d / "bench")
    seconds = time.perf_counter() - t0
    rows, skipped = read_bench(d / "bench" / "bench.csv")
    return SimpleNamespace(dir=d, seconds=seconds, rows=rows, skipped=skipped,
                           curve=read_curve(d / "bench" / "thickness.csv"))
