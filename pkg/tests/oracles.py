"""Brute-force reference implementations, deliberately loop-based and slow."""

import math

import numpy as np


def conv2d_loops(x, k, b, stride, pad):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for f in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[f]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * k[f, ch, u, v]
                    out[i, f, r, s] = acc
    return out


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for s in range(wo):
                    out[i, ch, r, s] = max(x[i, ch, r * stride + u, s * stride + v]
                                           for u in range(k) for v in range(k))
    return out


def matmul_loops(x, wt, b):
    n, d = x.shape
    m = wt.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = b[j] + sum(x[i, t] * wt[j, t] for t in range(d))
    return out


def average_precision_direct(relevance):
    """AP straight from the definition: mean over relevant ranks of precision@k."""
    precisions = []
    for k in range(1, len(relevance) + 1):
        if relevance[k - 1]:
            precisions.append(sum(relevance[:k]) / k)
    return sum(precisions) / len(precisions) if precisions else 0.0


def cosine_distance_direct(a, b):
    return 1.0 - math.fsum(float(x) * float(y) for x, y in zip(a, b))


def softmax_ce_naive(z, y):
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return float(np.mean(-(y * np.log(p)).sum(axis=1)))
