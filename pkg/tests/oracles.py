"""Slow, obviously-correct reference implementations used as test oracles."""
import itertools

import numpy as np


def conv3d_direct(x, w, b=None, stride=(1, 1, 1), padding=(1, 1, 1)):
    """Seven nested loops over (n, o, t, h, w, c, taps)."""
    n, c, t, h, wd = x.shape
    o, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd] = x
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, to, ho, wo))
    for ni, oi, ti, hi, wi in itertools.product(range(n), range(o), range(to), range(ho), range(wo)):
        acc = 0.0 if b is None else float(b[oi])
        for ci, a, bb, cc in itertools.product(range(c), range(kt), range(kh), range(kw)):
            acc += w[oi, ci, a, bb, cc] * xp[ni, ci, ti * st + a, hi * sh + bb, wi * sw + cc]
        out[ni, oi, ti, hi, wi] = acc
    return out


def triplet_loop(emb, labels, margin):
    """Enumerate every (a, p, n) per strip; average positive hinges per strip, then over strips."""
    n, strips, _ = emb.shape
    per_strip = []
    for s in range(strips):
        vals = []
        for a, p, q in itertools.product(range(n), repeat=3):
            if a == p or labels[a] != labels[p] or labels[a] == labels[q]:
                continue
            d_ap = np.linalg.norm(emb[a, s] - emb[p, s])
            d_an = np.linalg.norm(emb[a, s] - emb[q, s])
            v = d_ap - d_an + margin
            if v > 0:
                vals.append(v)
        per_strip.append(np.mean(vals) if vals else 0.0)
    return float(np.mean(per_strip))


def nearest_loop(probe, gallery):
    """Brute-force Euclidean nearest neighbour, first index wins ties."""
    out = []
    for p in probe:
        best, best_d = -1, np.inf
        for j, g in enumerate(gallery):
            d = float(np.sum((p - g) ** 2))
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def central_difference(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g
