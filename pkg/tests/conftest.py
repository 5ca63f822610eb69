import json
import os
import time

import numpy as np
import pytest
from scipy import ndimage

from evmaf import cli
from evmaf.synthetic import generate_benchmark
from evmaf.video_io import FramePair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_texture(rng, shape=(128, 128), sigma=8.0, pad=16):
    """Gaussian-filtered noise scaled to roughly [0.1, 0.9], with a margin for shifting."""
    h, w = shape
    big = ndimage.gaussian_filter(rng.standard_normal((h + 2 * pad, w + 2 * pad)), sigma)
    big = 0.5 + 0.4 * big / np.abs(big).max()
    return big


def crop(big, dx=0, dy=0, shape=(128, 128), pad=16):
    """Window of ``big`` shifted so that content moves by (+dx, +dy)."""
    h, w = shape
    return big[pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()


def sinusoid_frame(shape=(128, 128), dx=0.0, dy=0.0):
    y, x = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    x, y = x - dx, y - dy
    return (0.5 + 0.15 * np.sin(2 * np.pi * x / 37 + 0.3) + 0.12 * np.sin(2 * np.pi * y / 29)
            + 0.08 * np.sin(2 * np.pi * (x + y) / 53 + 1.0))


def make_pair(ref_y, test_y, index=0, chroma=None):
    """FramePair with flat (or given) 4:2:0 chroma."""
    h, w = ref_y.shape
    if chroma is None:
        c = np.full((h // 2, w // 2), 0.5)
        chroma = (c, c)
    return FramePair((ref_y, *chroma), (test_y, *chroma), index)


class Benchmark:
    """Paths and outputs of one end-to-end CLI run on the synthetic benchmark."""

    def __init__(self, root):
        self.root = str(root)
        self.cache = os.path.join(self.root, "cache")
        self.model = os.path.join(self.root, "model.json")
        self.eval_dir = os.path.join(self.root, "eval")
        self.timings = {}
        self.codes = {}

    def run(self, name, argv):
        t0 = time.perf_counter()
        self.codes[name] = cli.main(argv)
        self.timings[name] = time.perf_counter() - t0
        return self.codes[name]


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """Generate, extract, train and evaluate once per test session."""
    bench = Benchmark(tmp_path_factory.mktemp("bench"))
    t0 = time.perf_counter()
    bench.manifests = generate_benchmark(bench.root)
    bench.timings["generate"] = time.perf_counter() - t0
    m = bench.manifests
    bench.run("extract", ["extract", m["synth-train1"], m["synth-train2"], m["synth-heldout"],
                          "--cache", bench.cache])
    bench.run("train", ["train", m["synth-train1"], m["synth-train2"], "--cache", bench.cache,
                        "--model", bench.model])
    bench.run("evaluate", ["evaluate", m["synth-heldout"], "--model", bench.model,
                           "--cache", bench.cache, "--out-dir", bench.eval_dir])
    with open(bench.model, encoding="utf-8") as fh:
        bench.model_json = json.load(fh)
    return bench


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record, print and assert one acceptance criterion result."""
    def check(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
