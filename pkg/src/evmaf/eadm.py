"""Detail-loss ADM with dynamic-texture weighted contrast masking.

The plain detail-loss measure follows the usual ADM chain: a 4-level CDF 9/7
decomposition, decoupling of the test subbands into a restored part and an
additive impairment, contrast-sensitivity weighting, and a contrast-masking
threshold built from the additive impairment that is subtracted from the
restored detail. The enhanced variant divides that threshold by
``(1 + DTF) ** alpha``, where DTF is the absolute displaced-frame difference of
consecutive reference frames decomposed onto the same levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import DimensionError
from .transforms import displaced_frame, dwt2d, lucas_kanade_flow

ADM_LEVELS = 4
ADM_FAMILY = "cdf97"
DEFAULT_ALPHA = 0.3

# Watson et al. DWT quantization-threshold model, with the 9/7 basis-function
# amplitudes; rows are levels 1..4, columns (LL, LH/HL, HH).
_BASIS_AMPLITUDE = np.array([
    [0.62171, 0.67234, 0.72709],
    [0.34537, 0.41317, 0.49428],
    [0.18004, 0.22727, 0.28688],
    [0.091401, 0.11792, 0.15214],
])
_WATSON_A = 0.495
_WATSON_K = 0.466
_WATSON_F0 = 0.401
_WATSON_G = (1.501, 1.0, 0.534)
_VIEW_DIST = 3.0
_DISPLAY_HEIGHT = 1080
_COS_1DEG_SQ = math.cos(math.pi / 180.0) ** 2
_MASK_KERNEL = np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 1.0]]) / 30.0


def csf_weight(level: int, orientation: int) -> float:
    """Contrast-sensitivity weight (inverse quantization step) for a detail subband.

    ``orientation`` is 1 for horizontal/vertical detail and 2 for diagonal.
    """
    r = _VIEW_DIST * _DISPLAY_HEIGHT * math.pi / 180.0
    g = _WATSON_G[orientation]
    y = _WATSON_A * 10.0 ** (_WATSON_K * math.log10(2.0 ** level * _WATSON_F0 * g / r) ** 2)
    q = 2.0 * y / _BASIS_AMPLITUDE[level - 1, orientation]
    return 1.0 / q


@dataclass(frozen=True)
class DtfPyramid:
    """Dynamic-texture feature per decomposition level, plus the full-resolution map."""

    levels: Tuple[np.ndarray, ...]
    alpha: float
    plane: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class MaskingThresholds:
    base: Tuple[np.ndarray, ...]
    new: Tuple[np.ndarray, ...]


def _level_shapes(shape, levels=ADM_LEVELS):
    out = []
    h, w = shape
    for _ in range(levels):
        h, w = (h + 1) // 2, (w + 1) // 2
        out.append((h, w))
    return out


def zero_dtf(shape, alpha: float = DEFAULT_ALPHA) -> DtfPyramid:
    levels = tuple(np.zeros(s) for s in _level_shapes(shape))
    return DtfPyramid(levels, alpha, np.zeros(shape))


def dtf_from_plane(plane: np.ndarray, alpha: float) -> DtfPyramid:
    """Decompose a full-resolution DTF map along the ADM approximation chain.

    Each level's approximation band is divided by ``2**level`` so values stay on
    the intensity scale of the map; small negative ringing of the 9/7
    lowpass is clamped to zero.
    """
    bands = dwt2d(plane, ADM_LEVELS, ADM_FAMILY)
    levels = tuple(np.maximum(b.approx / 2.0 ** b.scale, 0.0) for b in bands)
    return DtfPyramid(levels, alpha, plane)


def compute_dtf(curr_ref: np.ndarray, prev_ref: Optional[np.ndarray],
                alpha: float = DEFAULT_ALPHA) -> DtfPyramid:
    """Absolute displaced-frame difference of consecutive reference luma frames.

    ``prev_ref=None`` (first frame) gives an all-zero pyramid.
    """
    curr_ref = np.asarray(curr_ref, dtype=np.float64)
    if prev_ref is None:
        return zero_dtf(curr_ref.shape, alpha)
    flow = lucas_kanade_flow(prev_ref, curr_ref)
    compensated = displaced_frame(prev_ref, flow)
    return dtf_from_plane(np.abs(curr_ref - compensated), alpha)


def modify_masking_thresholds(mt, dtf: DtfPyramid) -> MaskingThresholds:
    """Replace each level's masking threshold by ``MT / (1 + DTF) ** alpha``."""
    base = tuple(mt.base if isinstance(mt, MaskingThresholds) else mt)
    if len(base) != len(dtf.levels):
        raise DimensionError(f"{len(base)} threshold levels vs {len(dtf.levels)} DTF levels")
    new = []
    for m, d in zip(base, dtf.levels):
        if m.shape != d.shape:
            raise DimensionError(f"threshold shape {m.shape} vs DTF shape {d.shape}")
        new.append(m / (1.0 + d) ** dtf.alpha)
    return MaskingThresholds(base, tuple(new))


def _decouple(o: Sequence[np.ndarray], t: Sequence[np.ndarray]):
    """Split test detail into restored (detail kept from the reference) and additive parts."""
    oh, ov, _ = o
    th, tv, _ = t
    ot_dp = oh * th + ov * tv
    o_mag_sq = oh * oh + ov * ov
    t_mag_sq = th * th + tv * tv
    angle_ok = (ot_dp >= 0) & (ot_dp * ot_dp >= _COS_1DEG_SQ * o_mag_sq * t_mag_sq)
    restored = []
    for ob, tb in zip(o, t):
        k = np.divide(tb, ob, out=np.zeros_like(ob), where=ob != 0)
        k = np.clip(k, 0.0, 1.0)
        restored.append(np.where(angle_ok, tb, k * ob))
    additive = [tb - rb for tb, rb in zip(t, restored)]
    return restored, additive


def _masking_threshold(additive_csf: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros_like(additive_csf[0])
    for a in additive_csf:
        total += ndimage.correlate(np.abs(a), _MASK_KERNEL, mode="reflect")
    return total


@dataclass
class AdmTerms:
    """Per-level quantities of one reference/test luma pair, ready for scoring."""

    restored_csf: list
    ref_csf: list
    thresholds: list
    shape: tuple


def adm_terms(ref: np.ndarray, test: np.ndarray) -> AdmTerms:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise DimensionError(f"plane shapes differ: {ref.shape} vs {test.shape}")
    ref_bands = dwt2d(ref, ADM_LEVELS, ADM_FAMILY)
    test_bands = dwt2d(test, ADM_LEVELS, ADM_FAMILY)
    restored_csf, ref_csf, thresholds = [], [], []
    for rb, tb in zip(ref_bands, test_bands):
        restored, additive = _decouple(rb.details, tb.details)
        weights = [csf_weight(rb.scale, theta) for theta in (1, 1, 2)]
        r_csf = [w * x for w, x in zip(weights, restored)]
        a_csf = [w * x for w, x in zip(weights, additive)]
        o_csf = [w * x for w, x in zip(weights, rb.details)]
        restored_csf.append(r_csf)
        ref_csf.append(o_csf)
        thresholds.append(_masking_threshold(a_csf))
    return AdmTerms(restored_csf, ref_csf, thresholds, ref.shape)


def adm_score_from_terms(terms: AdmTerms, thresholds: Sequence[np.ndarray]) -> float:
    num = 0.0
    den = 0.0
    for r_csf, o_csf, mt in zip(terms.restored_csf, terms.ref_csf, thresholds):
        masked = sum(float(np.sum(np.maximum(np.abs(r) - mt, 0.0) ** 3)) for r in r_csf)
        ref_energy = sum(float(np.sum(np.abs(o) ** 3)) for o in o_csf)
        num += masked ** (1.0 / 3.0)
        den += ref_energy ** (1.0 / 3.0)
    c = 1e-5 * (terms.shape[0] * terms.shape[1]) ** (1.0 / 3.0)
    return min((num + c) / (den + c), 1.0)


def compute_adm(ref: np.ndarray, test: np.ndarray) -> float:
    """Plain detail-loss ADM score in [0, 1]."""
    terms = adm_terms(ref, test)
    return adm_score_from_terms(terms, terms.thresholds)


def eadm_from_terms(terms: AdmTerms, dtf: DtfPyramid) -> float:
    mt = modify_masking_thresholds(terms.thresholds, dtf)
    return adm_score_from_terms(terms, mt.new)


def compute_eadm(pair, prev_ref: Optional[np.ndarray] = None,
                 alpha: float = DEFAULT_ALPHA) -> float:
    """Enhanced ADM of the luma planes of ``pair``.

    ``pair`` is a FramePair or a ``(ref, test)`` tuple of luma planes; without
    ``prev_ref`` the score equals plain ADM.
    """
    if hasattr(pair, "ref_planes"):
        ref, test = pair.ref_planes[0], pair.test_planes[0]
    else:
        ref, test = pair
    terms = adm_terms(ref, test)
    return eadm_from_terms(terms, compute_dtf(ref, prev_ref, alpha))
