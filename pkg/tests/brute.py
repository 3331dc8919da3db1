"""Brute-force reference implementations used as test oracles.

Everything here is written as plain scalar loops, independent of the package
kernels, so agreement between the two routes is meaningful. Reductions use
math.fsum (exactly rounded) to keep reference values order-independent.
"""

import math

import numpy as np


def brute_pairwise_sq_dist(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    D = np.empty((X.shape[0], Y.shape[0]), dtype=np.float64)
    for i in range(X.shape[0]):
        for j in range(Y.shape[0]):
            dx = X[i, 0] - Y[j, 0]
            dy = X[i, 1] - Y[j, 1]
            dz = X[i, 2] - Y[j, 2]
            D[i, j] = (dx * dx + dy * dy) + dz * dz
    return D


def brute_nearest(X, Y):
    """Per-row nearest neighbor, lowest index on ties."""
    D = brute_pairwise_sq_dist(X, Y)
    dists = []
    idxs = []
    for i in range(D.shape[0]):
        best = D[i, 0]
        besti = 0
        for j in range(1, D.shape[1]):
            if D[i, j] < best:  # strict: keeps the lowest tied index
                best = D[i, j]
                besti = j
        dists.append(best)
        idxs.append(besti)
    return np.array(dists), np.array(idxs, dtype=np.int64)


def brute_ucd(X, Y):
    d, _ = brute_nearest(X, Y)
    return math.fsum(d.tolist()) / len(d)


def brute_cd(X, Y):
    return brute_ucd(X, Y) + brute_ucd(Y, X)


def brute_fps(X, k, start=0):
    """Greedy max-min selection, recomputing all distances every step."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    selected = [start]
    for _ in range(1, k):
        best_gain = -1.0
        best_i = -1
        for i in range(n):
            dmin = math.inf
            for s in selected:
                dx = X[i, 0] - X[s, 0]
                dy = X[i, 1] - X[s, 1]
                dz = X[i, 2] - X[s, 2]
                d = (dx * dx + dy * dy) + dz * dz
                if d < dmin:
                    dmin = d
            if dmin > best_gain:  # strict: keeps the lowest tied index
                best_gain = dmin
                best_i = i
        selected.append(best_i)
    return np.array(selected, dtype=np.int64)
