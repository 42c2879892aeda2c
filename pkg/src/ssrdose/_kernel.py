"""Compiled inner loop of the Genz separation-of-variables integrand."""

import math

import numba
import numpy as np

_SQRT1_2 = 1.0 / math.sqrt(2.0)


@numba.njit(cache=True)
def ndtr(x):
    return 0.5 * math.erfc(-x * _SQRT1_2)


@numba.njit(cache=True)
def ndtri(p):
    # Wichura (1988), algorithm AS 241, PPND16
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@numba.njit(cache=True)
def genz(coef, bound, step, upper, w, out):
    """Fill ``out[b, p]`` with the integrand of problem ``b`` at point ``p``.

    coef (B, n, r), bound (B, n), step (n,), upper (n,), w (N, r - 1).
    """
    B, n, rank = coef.shape
    N = w.shape[0]
    z = np.empty(rank)
    lo_clip = 1e-300
    hi_clip = 1.0 - 2.0 ** -53
    for b in range(B):
        # the first latent variable has constant limits
        hi0 = np.inf
        lo0 = -np.inf
        for i in range(n):
            if step[i] == 0:
                t = bound[b, i] / coef[b, i, 0]
                if upper[i]:
                    hi0 = min(hi0, t)
                else:
                    lo0 = max(lo0, t)
        plo0 = ndtr(lo0) if lo0 > -np.inf else 0.0
        d0 = ndtr(hi0) - plo0
        for p in range(N):
            if d0 <= 0.0:
                out[b, p] = 0.0
                continue
            prob = d0
            plo = plo0
            d = d0
            for j in range(rank):
                if j > 0:
                    hi = np.inf
                    lo = -np.inf
                    for i in range(n):
                        if step[i] != j:
                            continue
                        t = bound[b, i]
                        for l in range(j):
                            t -= coef[b, i, l] * z[l]
                        t /= coef[b, i, j]
                        if upper[i]:
                            if t < hi:
                                hi = t
                        elif t > lo:
                            lo = t
                    plo = ndtr(lo) if lo > -np.inf else 0.0
                    d = (ndtr(hi) if hi < np.inf else 1.0) - plo
                    if d <= 0.0:
                        prob = 0.0
                        break
                    prob *= d
                if j < rank - 1:
                    u = plo + w[p, j] * d
                    if u < lo_clip:
                        u = lo_clip
                    elif u > hi_clip:
                        u = hi_clip
                    z[j] = ndtri(u)
            out[b, p] = prob
