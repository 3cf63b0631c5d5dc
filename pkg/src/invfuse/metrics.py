"""Fusion quality metrics (numpy only, not differentiable).

Five scores, each comparing the fused image y against the source pair:

  * q_ssim  -- mean SSIM against each source, averaged
  * q_fmi   -- normalized mutual information between Sobel gradient-magnitude
               feature maps of source and fused, averaged over sources
  * q_ncie  -- nonlinear correlation information entropy of the (x1, x2, y)
               triple, from the eigenvalues of the 3x3 nonlinear correlation
               coefficient matrix (256-level histograms, base-256 entropies)
  * q_xy    -- gradient-preservation score: per-pixel edge strength and
               orientation agreement pushed through the canonical sigmoid
               model and weighted by source edge strength
  * q_p     -- saliency-weighted universal image quality index over 8x8
               sliding windows (variance saliency, max-saliency weights)

Conventions pinned here (and mirrored by the brute-force test oracles):
edge-replicated 3x3 Sobel, so a constant image has an identically-zero
gradient map (zero padding would manufacture border edges and break the
documented constant-image cases); min-max feature normalization to 256
levels for q_fmi; q_xy transfers nothing (score 0) at pixels where the
fused gradient vanishes; degenerate inputs yield a defined value plus a
flag instead of NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import _conv2d_data
from .errors import ShapeError
from .losses import SsimConfig, q_ssim

# canonical constants of the gradient-preservation sigmoid model
QXY_GAMMA_G = 0.9994
QXY_KAPPA_G = -15.0
QXY_SIGMA_G = 0.5
QXY_GAMMA_A = 0.9879
QXY_KAPPA_A = -22.0
QXY_SIGMA_A = 0.8

QP_WINDOW = 8

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def _check_images(*imgs):
    out = []
    shape = None
    for img in imgs:
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"metrics expect 2-d images, got shape {arr.shape}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ShapeError(f"image shapes differ: {arr.shape} vs {shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("metrics require finite image values")
        out.append(arr)
    return out


def _sobel(img):
    padded = np.pad(img, 1, mode="edge")[None, None]
    gx = _conv2d_data(padded, _SOBEL_X[None, None], 0, 0)[0, 0]
    gy = _conv2d_data(padded, _SOBEL_Y[None, None], 0, 0)[0, 0]
    return gx, gy


def _quantize256(img):
    """Clip to [0,1] and round to the 256-level integer grid."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.intp)


def _entropy_bits(counts):
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _joint_hist256(qa, qb):
    idx = qa.ravel() * 256 + qb.ravel()
    return np.bincount(idx, minlength=65536).astype(np.float64).reshape(256, 256)


# ---------------------------------------------------------------------------
# q_ssim
# ---------------------------------------------------------------------------

def fusion_ssim_pair(x1, x2, fused, ssim_config=SsimConfig()):
    """Per-source SSIM of the fused image: (ssim(x1,y), ssim(x2,y))."""
    x1, x2, fused = _check_images(x1, x2, fused)
    return q_ssim(x1, fused, ssim_config).item(), q_ssim(x2, fused, ssim_config).item()


def q_ssim_fusion(x1, x2, fused, ssim_config=SsimConfig()):
    s1, s2 = fusion_ssim_pair(x1, x2, fused, ssim_config)
    return 0.5 * (s1 + s2)


# ---------------------------------------------------------------------------
# q_fmi
# ---------------------------------------------------------------------------

def _feature_map(img):
    gx, gy = _sobel(img)
    return np.sqrt(gx * gx + gy * gy)


def _quantize_feature(feat):
    """Min-max normalize a feature map onto 256 levels; flag constant maps."""
    lo, hi = float(feat.min()), float(feat.max())
    if hi <= lo:
        return None
    return np.rint((feat - lo) / (hi - lo) * 255.0).astype(np.intp)


def nmi256(qa, qb):
    """Normalized mutual information 2*I/(Ha+Hb) of two 256-level maps."""
    joint = _joint_hist256(qa, qb)
    ha = _entropy_bits(joint.sum(axis=1))
    hb = _entropy_bits(joint.sum(axis=0))
    if ha + hb == 0.0:
        return 0.0
    hab = _entropy_bits(joint)
    return 2.0 * (ha + hb - hab) / (ha + hb)


def _q_fmi_impl(x1, x2, fused):
    x1, x2, fused = _check_images(x1, x2, fused)
    f1 = _quantize_feature(_feature_map(x1))
    f2 = _quantize_feature(_feature_map(x2))
    ff = _quantize_feature(_feature_map(fused))
    flagged = False
    vals = []
    for fs in (f1, f2):
        if fs is None or ff is None:
            # a constant feature map carries no information to share
            vals.append(0.0)
            flagged = True
        else:
            vals.append(nmi256(fs, ff))
    return 0.5 * (vals[0] + vals[1]), flagged


def q_fmi(x1, x2, fused):
    return _q_fmi_impl(x1, x2, fused)[0]


# ---------------------------------------------------------------------------
# q_ncie
# ---------------------------------------------------------------------------

def _log256(x):
    return np.log(x) / math.log(256.0)


def nonlinear_correlation(qa, qb):
    """NCC(a,b) = Ha + Hb - Hab with base-256 entropies, in [0, 1]."""
    joint = _joint_hist256(qa, qb)
    ha = _entropy_bits(joint.sum(axis=1)) / 8.0
    hb = _entropy_bits(joint.sum(axis=0)) / 8.0
    hab = _entropy_bits(joint) / 8.0
    return ha + hb - hab


def q_ncie(x1, x2, fused):
    x1, x2, fused = _check_images(x1, x2, fused)
    qs = [_quantize256(img) for img in (x1, x2, fused)]
    r = np.eye(3)
    for i in range(3):
        for j in range(i + 1, 3):
            r[i, j] = r[j, i] = nonlinear_correlation(qs[i], qs[j])
    eigvals = np.clip(np.linalg.eigvalsh(r), 0.0, None)
    nz = eigvals[eigvals > 0]
    return float(1.0 + np.sum(nz / 3.0 * _log256(nz / 3.0)))


# ---------------------------------------------------------------------------
# q_xy
# ---------------------------------------------------------------------------

def _strength_and_angle(img):
    gx, gy = _sobel(img)
    g = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(gx == 0.0, math.pi / 2.0, np.arctan(gy / gx))
    return g, alpha


def _preservation(g_src, a_src, g_fus, a_fus):
    """Per-pixel edge preservation Q = Qg * Qa; zero where the fused image
    has no gradient (nothing was transferred)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_src > g_fus,
                         np.divide(g_fus, g_src, out=np.zeros_like(g_src),
                                   where=g_src != 0),
                         np.divide(g_src, g_fus, out=np.ones_like(g_src),
                                   where=g_fus != 0))
    angle = 1.0 - np.abs(a_src - a_fus) / (math.pi / 2.0)
    qg = QXY_GAMMA_G / (1.0 + np.exp(QXY_KAPPA_G * (ratio - QXY_SIGMA_G)))
    qa = QXY_GAMMA_A / (1.0 + np.exp(QXY_KAPPA_A * (angle - QXY_SIGMA_A)))
    return np.where(g_fus == 0.0, 0.0, qg * qa)


def _q_xy_impl(x1, x2, fused):
    x1, x2, fused = _check_images(x1, x2, fused)
    g1, a1 = _strength_and_angle(x1)
    g2, a2 = _strength_and_angle(x2)
    gf, af = _strength_and_angle(fused)
    q1 = _preservation(g1, a1, gf, af)
    q2 = _preservation(g2, a2, gf, af)
    denom = float((g1 + g2).sum())
    if denom == 0.0:
        return 0.0, True
    return float((q1 * g1 + q2 * g2).sum() / denom), False


def q_xy(x1, x2, fused):
    return _q_xy_impl(x1, x2, fused)[0]


def qxy_perfect_score():
    """Value at exact preservation (ratio 1, angle match 1 everywhere)."""
    qg = QXY_GAMMA_G / (1.0 + math.exp(QXY_KAPPA_G * (1.0 - QXY_SIGMA_G)))
    qa = QXY_GAMMA_A / (1.0 + math.exp(QXY_KAPPA_A * (1.0 - QXY_SIGMA_A)))
    return qg * qa


# ---------------------------------------------------------------------------
# q_p
# ---------------------------------------------------------------------------

def _window_stats(img, size):
    # centered form: flat windows must give a variance of exactly zero for
    # the degenerate-window conventions to trigger (the E[x^2] - mu^2
    # shortcut leaks +/-1e-17 and even goes negative)
    win = sliding_window_view(img, (size, size))
    mu = win.mean(axis=(-2, -1))
    d = win - mu[..., None, None]
    return mu, (d * d).mean(axis=(-2, -1))


def _window_cov(a, b, mu_a, mu_b, size):
    wa = sliding_window_view(a, (size, size))
    wb = sliding_window_view(b, (size, size))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    return (da * db).mean(axis=(-2, -1))


def _uiqi_map(mu_a, var_a, mu_b, var_b, cov):
    """Universal image quality index per window, with the degenerate-window
    conventions: luminance-only when both windows are flat, structure-only
    when both means vanish, exactly 1 when the windows are identical zeros."""
    num1 = 2.0 * mu_a * mu_b
    den1 = mu_a * mu_a + mu_b * mu_b
    num2 = 2.0 * cov
    den2 = var_a + var_b
    out = np.ones_like(mu_a)
    both = (den1 > 0) & (den2 > 0)
    lum_only = (den1 > 0) & (den2 == 0)
    struct_only = (den1 == 0) & (den2 > 0)
    out[both] = (num1[both] * num2[both]) / (den1[both] * den2[both])
    out[lum_only] = num1[lum_only] / den1[lum_only]
    out[struct_only] = num2[struct_only] / den2[struct_only]
    return out


def _q_p_impl(x1, x2, fused):
    x1, x2, fused = _check_images(x1, x2, fused)
    size = QP_WINDOW
    if x1.shape[0] < size or x1.shape[1] < size:
        raise ShapeError(f"q_p needs images of at least {size}x{size}, got {x1.shape}")
    mu1, var1 = _window_stats(x1, size)
    mu2, var2 = _window_stats(x2, size)
    muf, varf = _window_stats(fused, size)
    cov1 = _window_cov(x1, fused, mu1, muf, size)
    cov2 = _window_cov(x2, fused, mu2, muf, size)

    sal = var1 + var2
    safe = np.where(sal > 0, sal, 1.0)
    lam = np.where(sal > 0, var1 / safe, 0.5)
    q01 = _uiqi_map(mu1, var1, muf, varf, cov1)
    q02 = _uiqi_map(mu2, var2, muf, varf, cov2)
    weight = np.maximum(var1, var2)
    total_weight = float(weight.sum())
    if total_weight == 0.0:
        return 0.0, True
    val = float((weight * (lam * q01 + (1.0 - lam) * q02)).sum() / total_weight)
    return val, False


def q_p(x1, x2, fused):
    return _q_p_impl(x1, x2, fused)[0]


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    pair_id: str
    q_ssim: float
    q_ssim_x1: float
    q_ssim_x2: float
    q_fmi: float
    q_ncie: float
    q_xy: float
    q_p: float
    dec_ssim_1: float
    dec_ssim_2: float
    flags: tuple = ()

    NUMERIC_FIELDS = ("q_ssim", "q_ssim_x1", "q_ssim_x2", "q_fmi", "q_ncie",
                      "q_xy", "q_p", "dec_ssim_1", "dec_ssim_2")


def evaluate_pair(x1, x2, fused, rec1=None, rec2=None, pair_id="pair",
                  ssim_config=SsimConfig()):
    """All metrics for one fused pair, plus decomposition SSIMs when
    reconstructions are supplied.  Degenerate cases come back flagged."""
    s1, s2 = fusion_ssim_pair(x1, x2, fused, ssim_config)
    fmi, fmi_flag = _q_fmi_impl(x1, x2, fused)
    xy, xy_flag = _q_xy_impl(x1, x2, fused)
    qp, qp_flag = _q_p_impl(x1, x2, fused)
    flags = []
    if fmi_flag:
        flags.append("fmi-constant-feature")
    if xy_flag:
        flags.append("qxy-no-source-gradients")
    if qp_flag:
        flags.append("qp-no-saliency")
    dec1 = q_ssim(*_check_images(x1, rec1), ssim_config).item() if rec1 is not None else math.nan
    dec2 = q_ssim(*_check_images(x2, rec2), ssim_config).item() if rec2 is not None else math.nan
    return MetricReport(
        pair_id=pair_id, q_ssim=0.5 * (s1 + s2), q_ssim_x1=s1, q_ssim_x2=s2,
        q_fmi=fmi, q_ncie=q_ncie(x1, x2, fused), q_xy=xy, q_p=qp,
        dec_ssim_1=dec1, dec_ssim_2=dec2, flags=tuple(flags))


def report_table(reports):
    """Tab-separated table: header, one row per pair, and a mean row.
    Numbers carry 10 significant digits."""
    cols = ("id",) + MetricReport.NUMERIC_FIELDS + ("flags",)
    lines = ["\t".join(cols)]
    for r in reports:
        vals = [f"{getattr(r, f):.10g}" for f in MetricReport.NUMERIC_FIELDS]
        lines.append("\t".join([r.pair_id] + vals + [";".join(r.flags) or "-"]))
    if reports:
        means = [f"{np.mean([getattr(r, f) for r in reports]):.10g}"
                 for f in MetricReport.NUMERIC_FIELDS]
        lines.append("\t".join(["mean"] + means + ["-"]))
    return "\n".join(lines) + "\n"
