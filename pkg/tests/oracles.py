"""Slow, obviously-correct reference implementations used only by tests."""
import math

import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_patches(x, k):
    """(H, W, C) -> (H*W, k*k*C) by explicit index arithmetic."""
    h, w, c = x.shape
    r = k // 2
    rows = []
    for i in range(h):
        for j in range(w):
            row = []
            for du in range(-r, r + 1):
                for dv in range(-r, r + 1):
                    for ch in range(c):
                        ii, jj = i + du, j + dv
                        row.append(x[ii, jj, ch] if 0 <= ii < h and 0 <= jj < w else 0.0)
            rows.append(row)
    return np.array(rows)


def naive_involution(x, kern, groups):
    """x: (H, W, C); kern: (H, W, K, K, G). Five nested loops."""
    h, w, c = x.shape
    k = kern.shape[2]
    r = k // 2
    per = c // groups
    y = np.zeros_like(x, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                g = ch // per
                for a in range(k):
                    for b in range(k):
                        ii, jj = i + a - r, j + b - r
                        if 0 <= ii < h and 0 <= jj < w:
                            y[i, j, ch] += kern[i, j, a, b, g] * x[ii, jj, ch]
    return y


def naive_conv(x, wts, bias):
    h, w, cin = x.shape
    k, _, _, cout = wts.shape
    r = k // 2
    y = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = bias[o]
                for a in range(k):
                    for b in range(k):
                        ii, jj = i + a - r, j + b - r
                        if 0 <= ii < h and 0 <= jj < w:
                            for ch in range(cin):
                                acc += wts[a, b, ch, o] * x[ii, jj, ch]
                y[i, j, o] = acc
    return y


def scalar_gelu(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f w.r.t. every entry of x (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def brute_ms_loss(emb, labels, alpha, beta, lam, eps):
    """Scalar multi-similarity loss with mining, straight from the definition."""
    b = len(labels)
    s = [[sum(emb[i][d] * emb[j][d] for d in range(len(emb[i]))) for j in range(b)] for i in range(b)]
    total, m = 0.0, 0
    for i in range(b):
        pos = [j for j in range(b) if j != i and labels[j] == labels[i]]
        neg = [j for j in range(b) if labels[j] != labels[i]]
        if not pos:
            continue
        m += 1
        if neg:
            min_pos = min(s[i][j] for j in pos)
            max_neg = max(s[i][k] for k in neg)
            kept_neg = [k for k in neg if s[i][k] > min_pos - eps]
            kept_pos = [j for j in pos if s[i][j] < max_neg + eps]
        else:
            kept_pos, kept_neg = pos, []
        total += math.log(1 + sum(math.exp(-alpha * (s[i][j] - lam)) for j in kept_pos)) / alpha
        total += math.log(1 + sum(math.exp(beta * (s[i][k] - lam)) for k in kept_neg)) / beta
    return total / m if m else 0.0
