"""Independent brute-force reference implementations used only by tests.

These deliberately avoid the vectorized code paths of the package: explicit
python loops, direct formulas, separate histogram bookkeeping.  Slow but
obviously correct, so they can serve as oracles.
"""

import math

import numpy as np


def gaussian_window_loops(size, sigma):
    w = np.empty((size, size))
    half = (size - 1) / 2.0
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def ssim_loops(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Mean SSIM over valid window positions, one window at a time."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    H, W = a.shape
    window = min(window, H, W)
    if window % 2 == 0:
        window -= 1
    w = gaussian_window_loops(window, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    vals = []
    for i in range(H - window + 1):
        for j in range(W - window + 1):
            pa = a[i:i + window, j:j + window]
            pb = b[i:i + window, j:j + window]
            mu_a = float((w * pa).sum())
            mu_b = float((w * pb).sum())
            var_a = float((w * pa * pa).sum()) - mu_a ** 2
            var_b = float((w * pb * pb).sum()) - mu_b ** 2
            cov = float((w * pa * pb).sum()) - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def mmd_loops(z, p, scales):
    """Biased V-statistic MMD^2 with IMQ kernels, via explicit pair loops."""
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    d = z.shape[1]

    def kernel(u, v, c):
        return c / (c + float(np.sum((u - v) ** 2)) / d)

    total = 0.0
    for c in scales:
        kzz = np.mean([[kernel(a, b, c) for b in z] for a in z])
        kpp = np.mean([[kernel(a, b, c) for b in p] for a in p])
        kzp = np.mean([[kernel(a, b, c) for b in p] for a in z])
        total += kzz + kpp - 2.0 * kzp
    return total


def sobel_loops(img):
    """3x3 Sobel gradients with edge replication (clamped indices), so a
    constant image yields identically-zero gradients; returns (gx, gy)."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[1, 2, 1], [0, 0, 0], [-1, -2, -1]]
    gx = np.zeros((H, W))
    gy = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            for u in range(3):
                for v in range(3):
                    ii = min(max(i + u - 1, 0), H - 1)
                    jj = min(max(j + v - 1, 0), W - 1)
                    gx[i, j] += img[ii, jj] * kx[u][v]
                    gy[i, j] += img[ii, jj] * ky[u][v]
    return gx, gy


def entropy_from_counts(counts):
    total = sum(counts.values()) if isinstance(counts, dict) else counts.sum()
    h = 0.0
    vals = counts.values() if isinstance(counts, dict) else counts.ravel()
    for c in vals:
        if c > 0:
            p = c / total
            h -= p * math.log2(p)
    return h


def nmi_loops(qa, qb):
    """NMI of two integer maps via dict-based histograms."""
    joint = {}
    ca, cb = {}, {}
    for u, v in zip(qa.ravel().tolist(), qb.ravel().tolist()):
        joint[(u, v)] = joint.get((u, v), 0) + 1
        ca[u] = ca.get(u, 0) + 1
        cb[v] = cb.get(v, 0) + 1
    ha, hb, hab = entropy_from_counts(ca), entropy_from_counts(cb), entropy_from_counts(joint)
    if ha + hb == 0:
        return 0.0
    return 2.0 * (ha + hb - hab) / (ha + hb)


def fmi_loops(x1, x2, fused):
    """Gradient-feature mutual information, recomputed with loops."""
    def feature(img):
        gx, gy = sobel_loops(img)
        return np.sqrt(gx ** 2 + gy ** 2)

    def quant(f):
        lo, hi = f.min(), f.max()
        if hi <= lo:
            return None
        return np.rint((f - lo) / (hi - lo) * 255).astype(int)

    ff = quant(feature(fused))
    vals = []
    for src in (x1, x2):
        fs = quant(feature(src))
        vals.append(0.0 if fs is None or ff is None else nmi_loops(fs, ff))
    return 0.5 * (vals[0] + vals[1])


def ncie_roots(x1, x2, fused):
    """NCIE with dict histograms and eigenvalues from the characteristic
    polynomial (independent of np.linalg.eigvalsh)."""
    def quant(img):
        return np.rint(np.clip(img, 0, 1) * 255).astype(int)

    def ncc(qa, qb):
        joint, ca, cb = {}, {}, {}
        for u, v in zip(qa.ravel().tolist(), qb.ravel().tolist()):
            joint[(u, v)] = joint.get((u, v), 0) + 1
            ca[u] = ca.get(u, 0) + 1
            cb[v] = cb.get(v, 0) + 1
        return (entropy_from_counts(ca) + entropy_from_counts(cb)
                - entropy_from_counts(joint)) / 8.0

    q = [quant(i) for i in (x1, x2, fused)]
    a, b, c = ncc(q[0], q[1]), ncc(q[0], q[2]), ncc(q[1], q[2])
    # characteristic polynomial of [[1,a,b],[a,1,c],[b,c,1]]:
    # -l^3 + 3 l^2 + (a^2+b^2+c^2-3) l + (1 - a^2 - b^2 - c^2 + 2abc) = 0
    coeffs = [-1.0, 3.0, a * a + b * b + c * c - 3.0,
              1.0 - a * a - b * b - c * c + 2.0 * a * b * c]
    lams = np.roots(coeffs)
    lams = np.clip(np.real(lams), 0.0, None)
    total = 1.0
    for lam in lams:
        if lam > 0:
            total += (lam / 3.0) * math.log(lam / 3.0) / math.log(256.0)
    return total


def qxy_loops(x1, x2, fused):
    """Edge-preservation score with per-pixel loops."""
    consts = dict(gg=0.9994, kg=-15.0, sg=0.5, ga=0.9879, ka=-22.0, sa=0.8)

    def strength_angle(img):
        gx, gy = sobel_loops(img)
        H, W = img.shape
        g = np.sqrt(gx ** 2 + gy ** 2)
        alpha = np.empty((H, W))
        for i in range(H):
            for j in range(W):
                alpha[i, j] = math.pi / 2 if gx[i, j] == 0 else math.atan(gy[i, j] / gx[i, j])
        return g, alpha

    g1, a1 = strength_angle(x1)
    g2, a2 = strength_angle(x2)
    gf, af = strength_angle(fused)
    H, W = np.asarray(x1).shape
    num = 0.0
    den = 0.0
    for i in range(H):
        for j in range(W):
            for gs, as_ in ((g1, a1), (g2, a2)):
                w = gs[i, j]
                den += w
                if gf[i, j] == 0.0:
                    continue  # nothing transferred -> Q = 0
                hi, lo = max(gs[i, j], gf[i, j]), min(gs[i, j], gf[i, j])
                ratio = lo / hi if hi > 0 else 0.0
                angle = 1.0 - abs(as_[i, j] - af[i, j]) / (math.pi / 2.0)
                qg = consts["gg"] / (1.0 + math.exp(consts["kg"] * (ratio - consts["sg"])))
                qa = consts["ga"] / (1.0 + math.exp(consts["ka"] * (angle - consts["sa"])))
                num += qg * qa * w
    return num / den if den > 0 else 0.0


def qp_loops(x1, x2, fused, window=8):
    """Saliency-weighted UIQI with explicit window loops."""
    def stats(a, b):
        # centered (two-pass) so flat windows give exactly zero
        mu_a, mu_b = a.mean(), b.mean()
        var_a = ((a - mu_a) ** 2).mean()
        var_b = ((b - mu_b) ** 2).mean()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        return mu_a, var_a, mu_b, var_b, cov

    def uiqi(a, b):
        mu_a, var_a, mu_b, var_b, cov = stats(a, b)
        den1 = mu_a ** 2 + mu_b ** 2
        den2 = var_a + var_b
        if den1 > 0 and den2 > 0:
            return (2 * mu_a * mu_b * 2 * cov) / (den1 * den2)
        if den1 > 0:
            return 2 * mu_a * mu_b / den1
        if den2 > 0:
            return 2 * cov / den2
        return 1.0

    x1, x2, fused = (np.asarray(i, dtype=np.float64) for i in (x1, x2, fused))
    H, W = x1.shape
    num = 0.0
    den = 0.0
    for i in range(H - window + 1):
        for j in range(W - window + 1):
            w1 = x1[i:i + window, j:j + window]
            w2 = x2[i:i + window, j:j + window]
            wf = fused[i:i + window, j:j + window]
            s1 = ((w1 - w1.mean()) ** 2).mean()
            s2 = ((w2 - w2.mean()) ** 2).mean()
            lam = s1 / (s1 + s2) if s1 + s2 > 0 else 0.5
            c = max(s1, s2)
            num += c * (lam * uiqi(w1, wf) + (1 - lam) * uiqi(w2, wf))
            den += c
    return num / den if den > 0 else 0.0
