"""Independent reference computations used by the tests.

Plain Python loops only, written without looking at the library code paths,
so a shared bug is unlikely.
"""

import math


def mspe_terms_loop(xs, D, A, i):
    """g1, g2, g3(PR), g3(FH), bias(FH) for area i with 1- or 2-column covariates."""
    n = len(D)
    p = len(xs[0])
    info = [[0.0] * p for _ in range(p)]
    for xj, dj in zip(xs, D):
        for a in range(p):
            for b in range(p):
                info[a][b] += xj[a] * xj[b] / (A + dj)
    if p == 1:
        inv = [[1.0 / info[0][0]]]
    else:
        det = info[0][0] * info[1][1] - info[0][1] * info[1][0]
        inv = [[info[1][1] / det, -info[0][1] / det], [-info[1][0] / det, info[0][0] / det]]
    xi = xs[i]
    quad = sum(xi[a] * inv[a][b] * xi[b] for a in range(p) for b in range(p))
    Bi = D[i] / (A + D[i])
    g1 = A * D[i] / (A + D[i])
    g2 = Bi * Bi * quad
    v_pr = 2.0 / n**2 * sum((A + dj) ** 2 for dj in D)
    s1 = sum(1.0 / (A + dj) for dj in D)
    s2 = sum(1.0 / (A + dj) ** 2 for dj in D)
    v_fh = 2.0 * n / s1**2
    g3_pr = D[i] ** 2 / (A + D[i]) ** 3 * v_pr
    g3_fh = D[i] ** 2 / (A + D[i]) ** 3 * v_fh
    bias = 2.0 * (n * s2 - s1**2) / s1**3
    return g1, g2, g3_pr, g3_fh, bias, Bi


def shortest_window_brute(values, alpha):
    """Enumerate every window holding ceil(N(1-alpha)) order statistics."""
    v = sorted(values)
    n = len(v)
    w = math.ceil(n * (1 - alpha) - 1e-9)
    best = None
    for j in range(n - w + 1):
        width = v[j + w - 1] - v[j]
        if best is None or width < best[0]:
            best = (width, v[j], v[j + w - 1])
    return best[1], best[2]


def ecdf_inverse(values, prob):
    """Smallest sample value x with empirical CDF F(x) >= prob."""
    v = sorted(values)
    n = len(v)
    for x in v:
        if sum(1 for u in v if u <= x) / n >= prob - 1e-12:
            return x
    return v[-1]


def moment_equal_d(Y, D):
    """max(0, s^2 - D) for the mean-only, equal-variance model."""
    n = len(Y)
    ybar = sum(Y) / n
    s2 = sum((y - ybar) ** 2 for y in Y) / (n - 1)
    return max(0.0, s2 - D)
