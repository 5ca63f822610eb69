"""Synthetic benchmark databases with a known monotone quality function.

Each source is a smooth multi-sinusoid texture with soft edges drifting by a
global sub-pixel translation per frame, so optical flow is well posed. Tests
are produced by four degradation families at four levels each, plus the
undistorted reference. The ground-truth MOS is a fixed decreasing function of
a per-degradation severity, so rank order is known exactly.

Run ``python -m evmaf.synthetic OUT_DIR`` to write the three benchmark
databases (two training sets and one held-out set).
"""

from __future__ import annotations

import argparse
import json
import math
import os
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .video_io import bilinear_resize, write_y4m, write_yuv

DEGRADATIONS: Dict[str, Tuple[float, ...]] = {
    "blur": (0.6, 1.2, 2.0, 3.2),          # Gaussian sigma, px
    "band": (48, 24, 12, 6),               # quantization levels
    "noise": (0.01, 0.025, 0.05, 0.09),    # Gaussian sigma, [0, 1] units
    "resample": (0.75, 0.5, 0.375, 0.25),  # down-scaling factor
}
# Stored at reduced resolution with the resample flag instead of re-upsampled.
STORED_LOW_RES = ("resample", 0.5)


def severity(kind: str, level: float) -> float:
    """Hidden perceptual severity of one degradation setting (0 for the reference)."""
    if kind == "ref":
        return 0.0
    if kind == "blur":
        return 0.3 * level
    if kind == "band":
        return 6.0 / level
    if kind == "noise":
        return 12.0 * level
    if kind == "resample":
        return 0.5 * (1.0 / level - 1.0)
    raise ValueError(f"unknown degradation {kind!r}")


def ground_truth_mos(kind: str, level: float) -> float:
    """Quality on [0, 100]: ``100 * exp(-severity)``."""
    return 100.0 * math.exp(-severity(kind, level))


def _texture(rng: np.random.Generator, shape, n_coarse=2, n_fine=2):
    comps = []
    for n, (lo, hi), amp in ((n_coarse, (24, 64), (0.08, 0.16)), (n_fine, (6, 12), (0.02, 0.06))):
        for _ in range(n):
            wl = rng.uniform(lo, hi)
            theta = rng.uniform(0, math.pi)
            comps.append((rng.uniform(*amp), 2 * math.pi / wl * math.cos(theta),
                          2 * math.pi / wl * math.sin(theta), rng.uniform(0, 2 * math.pi)))
    edge = (rng.uniform(0.05, 0.12), 2 * math.pi / rng.uniform(40, 80), rng.uniform(0, 2 * math.pi))
    return comps, edge


def _render(comps, edge, shape, dx, dy, mean):
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    x = x - dx
    y = y - dy
    out = np.full(shape, mean)
    for a, kx, ky, ph in comps:
        out += a * np.sin(kx * x + ky * y + ph)
    a, k, ph = edge
    out += a * np.tanh(4.0 * np.sin(k * (x + 0.5 * y) + ph))  # soft edges
    return out


def make_source(seed: int, shape=(128, 128), frames: int = 3):
    """Frames of (Y, Cb, Cr) planes in [0, 1] with 4:2:0 chroma."""
    rng = np.random.default_rng(seed)
    luma = _texture(rng, shape)
    cshape = (shape[0] // 2, shape[1] // 2)
    chroma = [_texture(rng, cshape, 1, 1) for _ in range(2)]
    cmeans = rng.uniform(0.4, 0.6, 2)
    lmean = rng.uniform(0.4, 0.6)
    vx, vy = rng.uniform(-2.0, 2.0, 2)
    out = []
    for t in range(frames):
        y = _render(*luma, shape, vx * t, vy * t, lmean)
        c = [0.5 * (_render(*chroma[i], cshape, vx * t / 2, vy * t / 2, cmeans[i]) - cmeans[i])
             + cmeans[i] for i in range(2)]
        out.append(tuple(np.clip(p, 0.0, 1.0) for p in (y, *c)))
    return out


def _quantize8(planes):
    return tuple(np.rint(np.clip(p, 0, 1) * 255.0) / 255.0 for p in planes)


def degrade(frames, kind: str, level: float, seed: int = 0):
    """Apply one degradation to every plane of every frame."""
    rng = np.random.default_rng(seed)
    out = []
    for planes in frames:
        if kind == "blur":
            new = [ndimage.gaussian_filter(p, level / (1 if i == 0 else 2), mode="reflect")
                   for i, p in enumerate(planes)]
        elif kind == "band":
            new = [np.round(p * (level - 1)) / (level - 1) for p in planes]
        elif kind == "noise":
            new = [p + rng.normal(0.0, level, p.shape) for p in planes]
        elif kind == "resample":
            new = []
            for p in planes:
                low = (max(2, round(p.shape[0] * level)), max(2, round(p.shape[1] * level)))
                new.append(bilinear_resize(bilinear_resize(p, low), p.shape))
        elif kind == "ref":
            new = list(planes)
        else:
            raise ValueError(f"unknown degradation {kind!r}")
        out.append(tuple(np.clip(p, 0.0, 1.0) for p in new))
    return out


def _downscale(frames, factor: float):
    return [tuple(bilinear_resize(p, (round(p.shape[0] * factor), round(p.shape[1] * factor)))
                  for p in planes) for planes in frames]


def generate_database(out_dir, name: str, seeds: Sequence[int], shape=(128, 128),
                      frames: int = 3, mos_scale=(0.0, 100.0), levels=DEGRADATIONS) -> str:
    """Write sources, tests and a manifest; returns the manifest path.

    Raw MOS values are mapped onto ``mos_scale`` so that databases can use
    different rating scales.
    """
    os.makedirs(out_dir, exist_ok=True)
    h, w = shape
    lo, hi = mos_scale
    sources: List[dict] = []
    seqs: List[dict] = []
    for s in seeds:
        sid = f"src{s:02d}"
        ref = [_quantize8(p) for p in make_source(s, shape, frames)]
        write_y4m(os.path.join(out_dir, f"{sid}.y4m"), ref, w, h)
        sources.append({"id": sid, "path": f"{sid}.y4m", "width": w, "height": h,
                        "frames": frames})
        settings = [("ref", 0.0)] + [(k, v) for k, vals in levels.items() for v in vals]
        for n, (kind, level) in enumerate(settings):
            qid = f"{sid}_{kind}{n}"
            test = degrade(ref, kind, level, seed=1000 * s + n)
            rec = {"id": qid, "source": sid, "path": f"{qid}.yuv", "width": w, "height": h,
                   "frames": frames}
            if (kind, level) == STORED_LOW_RES:
                test = _downscale(ref, level)
                rec.update(width=round(w * level), height=round(h * level), resample=True)
            write_yuv(os.path.join(out_dir, rec["path"]), [_quantize8(p) for p in test])
            rec["mos"] = round(lo + (hi - lo) * ground_truth_mos(kind, level) / 100.0, 6)
            seqs.append(rec)
    manifest = {"schema_version": 1, "database": name, "mos_scale": [lo, hi],
                "sources": sources, "sequences": seqs}
    path = os.path.join(out_dir, f"{name}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


BENCHMARK = {
    "synth-train1": (range(0, 6), (0.0, 100.0)),
    "synth-train2": (range(6, 12), (1.0, 5.0)),
    "synth-heldout": (range(12, 18), (0.0, 100.0)),
}


def generate_benchmark(out_dir, shape=(128, 128), frames: int = 3) -> Dict[str, str]:
    """Two training databases and one held-out database, 6 sources each."""
    return {name: generate_database(os.path.join(out_dir, name), name, list(seeds), shape,
                                    frames, scale)
            for name, (seeds, scale) in BENCHMARK.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--frames", type=int, default=3)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args(argv)
    for name, path in generate_benchmark(args.out_dir, (args.size, args.size), args.frames).items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
