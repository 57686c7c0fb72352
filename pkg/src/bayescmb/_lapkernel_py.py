"""Pure-numpy fallback for the sparse Laplacian kernel."""

import numpy as np


def lap_combine(x, nbr, w, deg, a, b, out, z=None, c=0.0, g=None, d=0.0):
    M, N = x.shape
    if nbr.shape[0] != N or w.shape[0] != N or deg.shape[0] != N:
        raise ValueError("graph tables do not match signal length")
    if out.shape != (M, N):
        raise ValueError("output shape mismatch")
    if z is not None and z.shape != (M, N):
        raise ValueError("z shape mismatch")
    if g is not None and g.shape != (M, N):
        raise ValueError("g shape mismatch")
    acc = w[:, 0] * x[:, nbr[:, 0]]
    for k in range(1, nbr.shape[1]):
        acc += w[:, k] * x[:, nbr[:, k]]
    lx = deg * x - acc
    lx = a * lx + b * x
    if z is not None:
        lx += c * z
    if g is not None:
        lx += d * g
    out[...] = lx
    return out
