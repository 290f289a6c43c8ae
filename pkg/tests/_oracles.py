"""Independent reference implementations used to check the fast paths.

Everything here is deliberately naive (explicit loops, enumeration,
central finite differences) and shares no code with the package.
"""

import itertools

import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, b, stride=1):
    """Valid-padding cross-correlation, one example: x (c,h,w), w (oc,c,kh,kw)."""
    c, h, ww = x.shape
    oc, c2, kh, kw = w.shape
    assert c == c2
    oh = (h - kh) // stride + 1
    ow = (ww - kw) // stride + 1
    out = np.zeros((oc, oh, ow))
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for ci in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            s += x[ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                out[o, i, j] = s + b[o]
    return out


def central_difference(f, arr, index, h=1e-5):
    """d f / d arr[index] by central differences; mutates and restores arr."""
    orig = arr[index]
    arr[index] = orig + h
    fp = f()
    arr[index] = orig - h
    fm = f()
    arr[index] = orig
    return (fp - fm) / (2.0 * h)


def relative_error(a, b, floor=1e-4):
    return abs(a - b) / max(abs(a), abs(b), floor)


def linf_vertex_max(grad, eps):
    """max of <grad, v> over all sign vertices v in {-eps, +eps}^d."""
    best = -np.inf
    for signs in itertools.product((-1.0, 1.0), repeat=grad.size):
        best = max(best, float(np.dot(grad.ravel(), eps * np.asarray(signs))))
    return best


def l1_vertex_max(grad, r):
    """max of <grad, v> over the 2d extreme points +-r e_i."""
    flat = grad.ravel()
    best = -np.inf
    for i in range(flat.size):
        for s in (-1.0, 1.0):
            best = max(best, s * r * flat[i])
    return best
