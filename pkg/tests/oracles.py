"""Slow, independent reference implementations used only by the tests."""

import math

import numpy as np


def naive_conv_same(x, w, b):
    """Quadruple loop 'same' cross-correlation: x (Cin, L), w (Cout, Cin, K)."""
    c_in, length = x.shape
    c_out, _, k = w.shape
    pad = (k - 1) // 2
    out = np.zeros((c_out, length))
    for o in range(c_out):
        for i in range(length):
            acc = b[o]
            for c in range(c_in):
                for t in range(k):
                    j = i + t - pad
                    if 0 <= j < length:
                        acc += w[o, c, t] * x[c, j]
            out[o, i] = acc
    return out


def naive_conv_grad_input(g, w):
    """d/dx of sum(g * conv(x)) by looping over every (o, i, c, t) term."""
    c_out, c_in, k = w.shape
    length = g.shape[1]
    pad = (k - 1) // 2
    gx = np.zeros((c_in, length))
    for o in range(c_out):
        for i in range(length):
            for c in range(c_in):
                for t in range(k):
                    j = i + t - pad
                    if 0 <= j < length:
                        gx[c, j] += w[o, c, t] * g[o, i]
    return gx


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def warping_paths(n, m):
    """Every monotone path from (0, 0) to (n-1, m-1) with unit steps."""
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni < n and nj < m:
                for rest in walk(ni, nj):
                    yield [(i, j)] + rest
    yield from walk(0, 0)


def brute_dtw(x, y):
    return min(sum(abs(x[i] - y[j]) for i, j in path) for path in warping_paths(len(x), len(y)))


def dcor_reference(x, y):
    """Distance correlation written straight from the double-centering definition."""
    n = len(x)
    a = [[abs(x[j] - x[k]) for k in range(n)] for j in range(n)]
    b = [[abs(y[j] - y[k]) for k in range(n)] for j in range(n)]

    def center(d):
        row = [sum(r) / n for r in d]
        col = [sum(d[j][k] for j in range(n)) / n for k in range(n)]
        grand = sum(row) / n
        return [[d[j][k] - row[j] - col[k] + grand for k in range(n)] for j in range(n)]

    A, B = center(a), center(b)
    dcov = sum(A[j][k] * B[j][k] for j in range(n) for k in range(n)) / n**2
    dvx = sum(A[j][k] ** 2 for j in range(n) for k in range(n)) / n**2
    dvy = sum(B[j][k] ** 2 for j in range(n) for k in range(n)) / n**2
    if dvx <= 0 or dvy <= 0:
        return 0.0
    return math.sqrt(max(dcov, 0.0) / math.sqrt(dvx * dvy))


def unpack_212_reference(data: bytes):
    """Bit-by-bit 212 decoding, independent of the vectorised decoder."""
    out = []
    for g in range(len(data) // 3):
        b0, b1, b2 = data[3 * g: 3 * g + 3]
        bits_a = [(b0 >> k) & 1 for k in range(8)] + [(b1 >> k) & 1 for k in range(4)]
        bits_b = [(b2 >> k) & 1 for k in range(8)] + [(b1 >> k) & 1 for k in range(4, 8)]
        for bits in (bits_a, bits_b):
            v = sum(bit << k for k, bit in enumerate(bits))
            out.append(v - 4096 if bits[11] else v)
    return out

