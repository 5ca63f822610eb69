"""Per-frame feature extraction over channels and dyadic scales.

All channel features run on full-geometry planes: chroma is brought to luma
geometry by nearest-neighbour upsampling before the scale pyramid is built,
so ``S<k>`` means the same raster size on every channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import eadm
from .errors import ComputationError, DimensionError
from .pool import CHANNELS, FeatureKey
from .transforms import build_scale_pyramid, displaced_frame, dwt2d, lucas_kanade_flow
from .video_io import FramePair, nearest_upsample

EXTRACTOR_VERSION = "extractor-v1"

PSNR_CAP_DB = 60.0
PSNR_MIN_MSE = 1e-6

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11x11 window at sigma 1.5
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_MIN_SIZE = 32

# Noise variance of the VIF channel model: 2 code values^2 on an 8-bit scale.
VIF_SIGMA_NSQ = 2.0 / 255.0 ** 2
VIF_EPS = 1e-10

CF_MEAN_WEIGHT = 0.3


# -- plane-level kernels ------------------------------------------------------

def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(ref, float) - np.asarray(test, float)) ** 2))
    if mse < PSNR_MIN_MSE:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _gauss(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE):
    return ndimage.gaussian_filter(x, sigma, truncate=truncate, mode="reflect")


def _ssim_components(x: np.ndarray, y: np.ndarray):
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = _gauss(x)
    mu_y = _gauss(y)
    sxx = _gauss(x * x) - mu_x * mu_x
    syy = _gauss(y * y) - mu_y * mu_y
    sxy = _gauss(x * y) - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def ssim(ref: np.ndarray, test: np.ndarray) -> float:
    lum, cs = _ssim_components(np.asarray(ref, float), np.asarray(test, float))
    return float(np.mean(lum * cs))


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


def ms_ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Five-scale MS-SSIM; per-scale terms are floored at 0 before weighting."""
    x = np.asarray(ref, float)
    y = np.asarray(test, float)
    if min(x.shape) < MSSSIM_MIN_SIZE:
        raise DimensionError(
            f"MS-SSIM needs planes of at least {MSSSIM_MIN_SIZE}x{MSSSIM_MIN_SIZE}, got {x.shape}")
    value = 1.0
    n = len(MSSSIM_WEIGHTS)
    for i, w in enumerate(MSSSIM_WEIGHTS):
        lum, cs = _ssim_components(x, y)
        term = float(np.mean(lum * cs)) if i == n - 1 else float(np.mean(cs))
        value *= max(term, 0.0) ** w
        if i < n - 1:
            x, y = _halve(x), _halve(y)
    return value


def vif_window(scale: int) -> Tuple[int, float]:
    """Gaussian window size and sigma used at pyramid ``scale`` (17, 9, 5, 3 taps)."""
    n = 2 ** (4 - scale + 1) + 1
    return n, n / 5.0


def vif(ref: np.ndarray, test: np.ndarray, scale: int = 1) -> float:
    """Pixel-domain VIF ratio with the GSM channel model at one scale.

    A reference with no local variance carries no information; the ratio is
    then defined as 1.
    """
    x = np.asarray(ref, float)
    y = np.asarray(test, float)
    n, sigma = vif_window(scale)
    truncate = (n // 2) / sigma

    def filt(a):
        return ndimage.gaussian_filter(a, sigma, truncate=truncate, mode="reflect")

    mu1 = filt(x)
    mu2 = filt(y)
    s1 = np.maximum(filt(x * x) - mu1 * mu1, 0.0)
    s2 = np.maximum(filt(y * y) - mu2 * mu2, 0.0)
    s12 = filt(x * y) - mu1 * mu2

    informative = s1 >= VIF_EPS
    g = np.divide(s12, s1, out=np.zeros_like(s1), where=informative)
    sv = np.where(informative, s2 - g * s12, s2)
    s1 = np.where(informative, s1, 0.0)
    neg = g < 0
    sv = np.where(neg, s2, sv)
    g = np.where(neg, 0.0, g)
    sv = np.maximum(sv, 0.0)

    num = float(np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ))))
    den = float(np.sum(np.log10(1.0 + s1 / VIF_SIGMA_NSQ)))
    if den < VIF_EPS:
        return 1.0
    return num / den


def temporal_information(curr: np.ndarray, prev: Optional[np.ndarray]) -> float:
    """Mean absolute difference of consecutive frames; 0 for the first frame."""
    if prev is None:
        return 0.0
    return float(np.mean(np.abs(np.asarray(curr, float) - np.asarray(prev, float))))


def spatial_information(plane: np.ndarray) -> float:
    x = np.asarray(plane, float)
    mag = np.hypot(ndimage.sobel(x, axis=1), ndimage.sobel(x, axis=0))
    return float(np.std(mag))


def colourfulness(plane: np.ndarray) -> float:
    """Opponent-channel colourfulness of one chroma plane: spread plus 0.3x mean offset."""
    c = np.asarray(plane, float) - 0.5
    return float(np.std(c) + CF_MEAN_WEIGHT * abs(np.mean(c)))


def temporal_perceptual(curr: np.ndarray, prev: Optional[np.ndarray]) -> float:
    """Mean squared motion-compensated residual between consecutive frames."""
    if prev is None:
        return 0.0
    curr = np.asarray(curr, float)
    prev = np.asarray(prev, float)
    residual = curr - displaced_frame(prev, lucas_kanade_flow(prev, curr))
    return float(np.mean(residual ** 2))


def detail_energy(plane: np.ndarray) -> np.ndarray:
    """Per-location sum of |H| + |V| + |D| from a one-level Haar DWT."""
    lvl = dwt2d(plane, 1, "haar")[0]
    return np.abs(lvl.detail_h) + np.abs(lvl.detail_v) + np.abs(lvl.detail_d)


def blur_edge(ref: np.ndarray, test: np.ndarray) -> Tuple[float, float]:
    """Mean clamped loss (BL) and gain (ED) of high-frequency energy."""
    diff = detail_energy(ref) - detail_energy(test)
    bl = float(np.mean(np.maximum(diff, 0.0)))
    ed = float(np.mean(np.maximum(-diff, 0.0)))
    return bl, ed


# -- frame context --------------------------------------------------------------

def full_geometry(planes: Sequence[np.ndarray]) -> Tuple[np.ndarray, ...]:
    luma = np.asarray(planes[0], float)
    out = [luma]
    for p in planes[1:]:
        p = np.asarray(p, float)
        out.append(p if p.shape == luma.shape else nearest_upsample(p, luma.shape))
    return tuple(out)


class FrameContext:
    """Lazily built pyramids, flows and per-plane statistics for one frame.

    Confined to a single frame's computation; not thread-safe.
    """

    def __init__(self, pair: FramePair, prev_pair: Optional[FramePair] = None,
                 alpha: float = eadm.DEFAULT_ALPHA):
        self.pair = pair
        self.prev_pair = prev_pair
        self.alpha = alpha
        self._planes = {
            "ref": full_geometry(pair.ref_planes),
            "test": full_geometry(pair.test_planes),
        }
        if prev_pair is not None:
            self._planes["prev_ref"] = full_geometry(prev_pair.ref_planes)
            self._planes["prev_test"] = full_geometry(prev_pair.test_planes)
        self._pyr: Dict[Tuple[str, str], list] = {}
        self._memo: Dict[tuple, float] = {}
        self._adm_terms = None
        self._dtf = None

    def pyramid(self, side: str, channel: str):
        key = (side, channel)
        if key not in self._pyr:
            plane = self._planes[side][CHANNELS.index(channel)]
            self._pyr[key] = build_scale_pyramid(plane, 4)
        return self._pyr[key]

    def plane(self, side, channel, scale):
        return self.pyramid(side, channel)[scale - 1]

    def prev_plane(self, side, channel, scale):
        if self.prev_pair is None:
            return None
        return self.plane("prev_" + side, channel, scale)

    def _cached(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def content(self, name: str, side: str, channel: str, scale: int) -> float:
        def compute():
            x = self.plane(side, channel, scale)
            if name == "SI":
                return spatial_information(x)
            if name == "CF":
                return colourfulness(x)
            if name == "LUMA":
                return float(np.mean(x))
            if name == "TI":
                return temporal_information(x, self.prev_plane(side, channel, scale))
            if name == "TP":
                return temporal_perceptual(x, self.prev_plane(side, channel, scale))
            raise KeyError(name)
        return self._cached((name, side, channel, scale), compute)

    def adm_terms(self):
        if self._adm_terms is None:
            self._adm_terms = eadm.adm_terms(self._planes["ref"][0], self._planes["test"][0])
        return self._adm_terms

    def eadm(self, alpha: float) -> float:
        if self._dtf is None:
            prev = None if self.prev_pair is None else self._planes["prev_ref"][0]
            self._dtf = eadm.compute_dtf(self._planes["ref"][0], prev, self.alpha)
        return eadm.eadm_from_terms(self.adm_terms(), replace(self._dtf, alpha=alpha))

    def value(self, key: FeatureKey) -> float:
        name, ch, sc = key.name, key.channel, key.scale
        if name == "ADM":
            terms = self.adm_terms()
            return eadm.adm_score_from_terms(terms, terms.thresholds)
        if name == "E-ADM":
            return self.eadm(self.alpha)
        if name == "PSNR":
            return psnr(self.plane("ref", ch, sc), self.plane("test", ch, sc))
        if name == "SSIM":
            return ssim(self.plane("ref", ch, sc), self.plane("test", ch, sc))
        if name == "MSSSIM":
            return ms_ssim(self.plane("ref", ch, sc), self.plane("test", ch, sc))
        if name == "VIF":
            return vif(self.plane("ref", ch, sc), self.plane("test", ch, sc), sc)
        if name in ("BL", "ED"):
            bl, ed = self._cached(("BLED", ch, sc), lambda: blur_edge(
                self.plane("ref", ch, sc), self.plane("test", ch, sc)))
            return bl if name == "BL" else ed
        if name in ("SI", "CF", "LUMA", "TI", "TP"):
            return self.content(name, "ref", ch, sc)
        if key.is_delta:
            base = name[1:]
            return self.content(base, "test", ch, sc) - self.content(base, "ref", ch, sc)
        raise KeyError(str(key))


# -- public per-feature API -------------------------------------------------------

def compute_psnr(pair: FramePair, channel: str = "Y", scale: int = 1) -> float:
    return FrameContext(pair).value(FeatureKey("PSNR", channel, scale))


def compute_ssim(pair: FramePair, channel: str = "Y", scale: int = 1,
                 mode: str = "single") -> float:
    name = {"single": "SSIM", "multiscale": "MSSSIM"}[mode]
    return FrameContext(pair).value(FeatureKey(name, channel, scale))


def compute_vif_scale(pair: FramePair, channel: str = "Y", scale: int = 1) -> float:
    return FrameContext(pair).value(FeatureKey("VIF", channel, scale))


def compute_ti(curr: np.ndarray, prev: Optional[np.ndarray]) -> float:
    return temporal_information(curr, prev)


def compute_content_features(frame: np.ndarray, prev: Optional[np.ndarray] = None,
                             chroma: bool = False) -> Dict[str, float]:
    """SI, TP and LUMA of one plane, plus CF when the plane is a chroma channel."""
    out = {
        "SI": spatial_information(frame),
        "TP": temporal_perceptual(frame, prev),
        "LUMA": float(np.mean(frame)),
    }
    if chroma:
        out["CF"] = colourfulness(frame)
    return out


def compute_bl_ed(pair: FramePair, channel: str = "Y", scale: int = 1) -> Dict[str, float]:
    ctx = FrameContext(pair)
    return {"BL": ctx.value(FeatureKey("BL", channel, scale)),
            "ED": ctx.value(FeatureKey("ED", channel, scale))}


_DELTA_FNS = {
    "ΔSI": lambda cur, prev: spatial_information(cur),
    "ΔCF": lambda cur, prev: colourfulness(cur),
    "ΔTI": temporal_information,
    "ΔTP": temporal_perceptual,
}


def compute_delta_features(ref_frame: np.ndarray, test_frame: np.ndarray, which: str,
                           prev_ref: Optional[np.ndarray] = None,
                           prev_test: Optional[np.ndarray] = None) -> float:
    """Signed difference feature(test) - feature(reference) on single planes."""
    if which.startswith("d"):
        which = "Δ" + which[1:]
    fn = _DELTA_FNS[which]
    return fn(test_frame, prev_test) - fn(ref_frame, prev_ref)


@dataclass
class FeatureVector:
    frame_index: int
    values: Dict[FeatureKey, float] = field(default_factory=dict)

    def __getitem__(self, key):
        if isinstance(key, str):
            key = FeatureKey.parse(key)
        return self.values[key]

    def __len__(self):
        return len(self.values)

    def keys(self):
        return list(self.values)


def extract_feature_vector(pair: FramePair, prev_pair: Optional[FramePair],
                           keys: Iterable[FeatureKey],
                           alpha: float = eadm.DEFAULT_ALPHA,
                           extra_alphas: Sequence[float] = ()) -> FeatureVector:
    """Compute every key of ``keys`` for one frame.

    ``extra_alphas`` adds E-ADM values at other alpha settings, returned under
    string labels ``E-ADM@<alpha>`` (used for alpha tuning).

    Raises:
        ComputationError: a feature evaluates to a non-finite value.
    """
    ctx = FrameContext(pair, prev_pair, alpha)
    values: Dict = {}
    for key in keys:
        v = float(ctx.value(key))
        if not math.isfinite(v):
            raise ComputationError(f"feature {key} is not finite ({v})", key=str(key))
        values[key] = v
    for a in extra_alphas:
        values[eadm_alpha_label(a)] = ctx.eadm(a)
    return FeatureVector(pair.frame_index, values)


def eadm_alpha_label(alpha: float) -> str:
    return f"E-ADM@{alpha:g}"


def aggregate_frames(vectors: Sequence[Mapping]) -> Dict:
    """Arithmetic mean over frames of every feature."""
    if not vectors:
        raise ValueError("no frames to aggregate")
    keys = list(vectors[0])
    return {k: float(np.mean([v[k] for v in vectors])) for k in keys}
