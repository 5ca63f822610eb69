"""Raw planar YUV 4:2:0 and Y4M ingestion.

Frames come out as float64 planes normalized to [0, 1] by ``2**bit_depth - 1``.
Sequence handles read lazily, one frame at a time, so the same handle can be
re-read at any index and always yields the same bytes.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, MalformedInputError

logger = logging.getLogger(__name__)

Y4M_MAGIC = b"YUV4MPEG2"
Y4M_FRAME = b"FRAME"

CHANNELS = ("Y", "Cb", "Cr")


@dataclass(frozen=True)
class VideoSpec:
    """Geometry and sample format of one raw sequence."""

    width: int
    height: int
    frame_count: int
    bit_depth: int = 8
    fps: float = 30.0
    chroma: str = "420"

    def __post_init__(self):
        if self.width < 64 or self.height < 64 or self.width % 2 or self.height % 2:
            raise ConfigurationError(
                f"width/height must be even and >= 64, got {self.width}x{self.height}")
        if self.frame_count < 2:
            raise ConfigurationError(
                f"frame_count must be >= 2 (temporal features need a previous frame), "
                f"got {self.frame_count}")
        if self.bit_depth not in (8, 10):
            raise ConfigurationError(f"bit_depth must be 8 or 10, got {self.bit_depth}")
        if self.chroma not in ("420", "4:2:0"):
            raise ConfigurationError(f"only 4:2:0 chroma is supported, got {self.chroma}")

    @property
    def bytes_per_sample(self) -> int:
        return 1 if self.bit_depth == 8 else 2

    @property
    def chroma_shape(self) -> Tuple[int, int]:
        return self.height // 2, self.width // 2

    @property
    def frame_bytes(self) -> int:
        luma = self.width * self.height
        return (luma + 2 * (luma // 4)) * self.bytes_per_sample

    @property
    def max_code(self) -> int:
        return (1 << self.bit_depth) - 1


@dataclass(frozen=True)
class FramePair:
    """Co-registered reference/test planes for one frame index.

    Planes are (Y, Cb, Cr) at native 4:2:0 geometry; test planes have already
    been brought to the reference geometry when the sequence was re-sampled.
    """

    ref_planes: Tuple[np.ndarray, np.ndarray, np.ndarray]
    test_planes: Tuple[np.ndarray, np.ndarray, np.ndarray]
    frame_index: int

    def __post_init__(self):
        for r, t in zip(self.ref_planes, self.test_planes):
            if r.shape != t.shape:
                raise ConfigurationError(
                    f"reference/test plane geometry differs: {r.shape} vs {t.shape}")

    def ref(self, channel: str) -> np.ndarray:
        return self.ref_planes[CHANNELS.index(channel)]

    def test(self, channel: str) -> np.ndarray:
        return self.test_planes[CHANNELS.index(channel)]


def normalize_codes(codes: np.ndarray, bit_depth: int) -> np.ndarray:
    """Map integer sample codes to [0, 1]."""
    return codes.astype(np.float64) / float((1 << bit_depth) - 1)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class SequenceHandle:
    """Random-access reader over a raw .yuv or .y4m file.

    Not meant to be shared between threads; open one handle per consumer.
    """

    def __init__(self, path, spec: VideoSpec, offsets: Sequence[int]):
        self.path = os.fspath(path)
        self.spec = spec
        self._offsets = tuple(offsets)

    @property
    def frame_count(self) -> int:
        return self.spec.frame_count

    @property
    def shape(self) -> Tuple[int, int]:
        return self.spec.height, self.spec.width

    def read_codes(self, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0 <= index < self.frame_count:
            raise IndexError(f"frame index {index} out of range [0, {self.frame_count})")
        spec = self.spec
        dtype = np.uint8 if spec.bit_depth == 8 else np.dtype("<u2")
        with open(self.path, "rb") as fh:
            fh.seek(self._offsets[index])
            buf = fh.read(spec.frame_bytes)
        if len(buf) != spec.frame_bytes:
            raise MalformedInputError(
                f"{self.path}: truncated frame {index}: expected {spec.frame_bytes} bytes, "
                f"got {len(buf)}")
        samples = np.frombuffer(buf, dtype=dtype)
        n_y = spec.width * spec.height
        n_c = n_y // 4
        ch, cw = spec.chroma_shape
        y = samples[:n_y].reshape(spec.height, spec.width)
        u = samples[n_y:n_y + n_c].reshape(ch, cw)
        v = samples[n_y + n_c:].reshape(ch, cw)
        return y, u, v

    def read_frame(self, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        bd = self.spec.bit_depth
        return tuple(_freeze(normalize_codes(p, bd)) for p in self.read_codes(index))


def _parse_y4m_header(line: bytes) -> dict:
    fields = line.split()
    if not fields or fields[0] != Y4M_MAGIC:
        raise MalformedInputError("missing YUV4MPEG2 signature")
    out = {}
    for tok in fields[1:]:
        key, val = chr(tok[0]), tok[1:].decode("ascii")
        out[key] = val
    return out


def _y4m_spec_from_header(header: dict, spec: VideoSpec, path: str) -> VideoSpec:
    declared = {}
    if "W" in header:
        declared["width"] = int(header["W"])
    if "H" in header:
        declared["height"] = int(header["H"])
    cs = header.get("C", "420jpeg")
    declared["bit_depth"] = 10 if "p10" in cs else 8
    mismatched = {k: (v, getattr(spec, k)) for k, v in declared.items() if getattr(spec, k) != v}
    if mismatched:
        warnings.warn(f"{path}: Y4M header disagrees with manifest geometry {mismatched}; "
                      f"using manifest values", stacklevel=3)
    return spec


def open_sequence(path, spec: VideoSpec) -> SequenceHandle:
    """Open a raw I420 (.yuv) or Y4M (.y4m) file for frame access.

    Raises:
        FileNotFoundError: the file does not exist.
        MalformedInputError: the byte count disagrees with ``spec``.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(len(Y4M_MAGIC))
    if head == Y4M_MAGIC:
        return _open_y4m(path, spec, size)
    expected = spec.frame_bytes * spec.frame_count
    if size != expected:
        raise MalformedInputError(
            f"{path}: expected {expected} bytes for {spec.frame_count} frames of "
            f"{spec.width}x{spec.height} {spec.bit_depth}-bit 4:2:0, got {size}")
    offsets = [i * spec.frame_bytes for i in range(spec.frame_count)]
    return SequenceHandle(path, spec, offsets)


def _open_y4m(path: str, spec: VideoSpec, size: int) -> SequenceHandle:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        spec = _y4m_spec_from_header(_parse_y4m_header(header_line), spec, path)
        offsets = []
        pos = len(header_line)
        for i in range(spec.frame_count):
            fh.seek(pos)
            marker = fh.readline()
            if not marker.startswith(Y4M_FRAME):
                raise MalformedInputError(
                    f"{path}: expected FRAME marker for frame {i} at byte {pos}")
            offsets.append(pos + len(marker))
            pos = offsets[-1] + spec.frame_bytes
        if pos != size:
            raise MalformedInputError(
                f"{path}: expected {pos} bytes for {spec.frame_count} frames, got {size}")
    return SequenceHandle(path, spec, offsets)


def bilinear_resize(plane: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Resample ``plane`` to ``shape`` with bilinear weights.

    Pixel centres are aligned (half-pixel convention) and samples outside the
    source clamp to its border.
    """
    out = np.asarray(plane, dtype=np.float64)
    for axis, n_out in enumerate(shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        w = pos - lo
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        wshape = [1, 1]
        wshape[axis] = n_out
        w = w.reshape(wshape)
        out = a * (1.0 - w) + b * w
    return out


def nearest_upsample(plane: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling to ``shape`` (used for chroma to luma geometry)."""
    h, w = plane.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return plane[np.ix_(rows, cols)]


def read_frame_pair(ref: SequenceHandle, test: SequenceHandle, index: int,
                    upsample: Optional[str] = None) -> FramePair:
    """Read frame ``index`` of both sequences as a co-registered pair.

    ``upsample="bilinear"`` declares that the test sequence was re-sampled and
    should be brought to the reference geometry; without it a geometry
    mismatch is a configuration error.
    """
    n = min(ref.frame_count, test.frame_count)
    if not 0 <= index < n:
        raise IndexError(f"frame index {index} out of range [0, {n})")
    ref_planes = ref.read_frame(index)
    test_planes = test.read_frame(index)
    if ref.shape != test.shape:
        if upsample != "bilinear":
            raise ConfigurationError(
                f"test geometry {test.shape} differs from reference {ref.shape} and no "
                f"upsampling rule was declared")
        test_planes = tuple(_freeze(bilinear_resize(t, r.shape))
                            for r, t in zip(ref_planes, test_planes))
    return FramePair(ref_planes, test_planes, index)


def write_yuv(path, frames, bit_depth: int = 8) -> None:
    """Write ``frames`` (iterable of (Y, Cb, Cr) planes in [0, 1]) as raw I420."""
    dtype = np.uint8 if bit_depth == 8 else np.dtype("<u2")
    max_code = (1 << bit_depth) - 1
    with open(path, "wb") as fh:
        for planes in frames:
            for p in planes:
                codes = np.clip(np.rint(np.asarray(p) * max_code), 0, max_code)
                fh.write(codes.astype(dtype).tobytes())


def write_y4m(path, frames, width: int, height: int, fps: int = 30, bit_depth: int = 8) -> None:
    """Write ``frames`` as a Y4M stream."""
    cs = "C420jpeg" if bit_depth == 8 else "C420p10"
    dtype = np.uint8 if bit_depth == 8 else np.dtype("<u2")
    max_code = (1 << bit_depth) - 1
    with open(path, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{width} H{height} F{fps}:1 Ip A1:1 {cs}\n".encode("ascii"))
        for planes in frames:
            fh.write(b"FRAME\n")
            for p in planes:
                codes = np.clip(np.rint(np.asarray(p) * max_code), 0, max_code)
                fh.write(codes.astype(dtype).tobytes())
